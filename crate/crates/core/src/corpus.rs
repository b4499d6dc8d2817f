//! Report corpus ingestion, tokenization, vocabulary, labels, and splits.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One radiology case: both text sections, finding labels, and both views.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Report {
    pub id: String,
    pub findings: String,
    pub impression: String,
    #[serde(default)]
    pub labels: Vec<String>,
    pub frontal_ref: String,
    pub lateral_ref: String,
}

/// Lowercased, sentence-segmented token view of a report.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedReport {
    pub id: String,
    pub sentences: Vec<Vec<String>>,
    pub flat_tokens: Vec<String>,
}

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const START_TOKEN: &str = "<start>";
pub const END_TOKEN: &str = "<end>";
pub const UNK_TOKEN: &str = "<unk>";

/// Sentence terminator used throughout decoding.
pub const SENT_END: &str = ".";

/// Token/index map with the four specials pinned at indices 0-3. Non-special
/// tokens are admitted only at corpus frequency >= `min_frequency`.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    token_to_index: HashMap<String, usize>,
    index_to_token: Vec<String>,
    pub min_frequency: usize,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    findings: Option<String>,
    impression: Option<String>,
    #[serde(default)]
    labels: Vec<String>,
    frontal_ref: Option<String>,
    lateral_ref: Option<String>,
}

/// Outcome of [`load_reports`]: kept reports plus the count of records
/// skipped for missing views or sections.
#[derive(Debug)]
pub struct LoadedCorpus {
    pub reports: Vec<Report>,
    pub skipped: usize,
}

/// Read a line-delimited JSON corpus. Records missing either view reference
/// or either text section are skipped and counted; malformed lines and
/// duplicate ids are hard errors naming the line.
pub fn load_reports(path: &Path) -> Result<LoadedCorpus> {
    let f = std::fs::File::open(path)?;
    load_reports_from(std::io::BufReader::new(f))
}

pub fn load_reports_from<R: BufRead>(reader: R) -> Result<LoadedCorpus> {
    let mut reports = Vec::new();
    let mut skipped = 0usize;
    let mut seen = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let id = match raw.id {
            Some(id) if !id.is_empty() => id,
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "record missing id".into(),
                })
            }
        };
        if let Some(prev) = seen.insert(id.clone(), lineno) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("duplicate id {id:?} (first at line {prev})"),
            });
        }
        let nonempty = |s: &Option<String>| {
            s.as_deref()
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
        };
        match (
            nonempty(&raw.findings),
            nonempty(&raw.impression),
            nonempty(&raw.frontal_ref),
            nonempty(&raw.lateral_ref),
        ) {
            (Some(findings), Some(impression), Some(frontal_ref), Some(lateral_ref)) => {
                reports.push(Report {
                    id,
                    findings,
                    impression,
                    labels: raw.labels,
                    frontal_ref,
                    lateral_ref,
                });
            }
            _ => skipped += 1,
        }
    }
    Ok(LoadedCorpus { reports, skipped })
}

pub fn save_reports(path: &Path, reports: &[Report]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::format(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Punctuation separated into standalone tokens before whitespace splitting.
const SEPARABLE: &[char] = &['.', ',', ';', ':', '!', '?', '(', ')', '"'];
const SENTENCE_TERMINALS: &[char] = &['.', '!', '?'];

/// Concatenate findings then impression, lowercase, split punctuation into
/// tokens, and segment into sentences at `.`/`!`/`?`. Every sentence ends
/// with the `.` marker token; terminal variants are normalized to it.
pub fn preprocess(report: &Report) -> Result<TokenizedReport> {
    let text = format!("{} {}", report.findings, report.impression);
    let tokens = tokenize(&text);
    if tokens.is_empty() {
        return Err(Error::invalid(format!(
            "report {:?}: empty findings+impression text",
            report.id
        )));
    }
    let mut sentences = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for tok in tokens {
        if tok.len() == 1 && SENTENCE_TERMINALS.contains(&tok.chars().next().unwrap()) {
            if !current.is_empty() {
                current.push(SENT_END.to_string());
                sentences.push(std::mem::take(&mut current));
            }
        } else {
            current.push(tok);
        }
    }
    if !current.is_empty() {
        current.push(SENT_END.to_string());
        sentences.push(current);
    }
    if sentences.is_empty() {
        return Err(Error::invalid(format!(
            "report {:?}: no sentences after tokenization",
            report.id
        )));
    }
    let flat_tokens = sentences.iter().flatten().cloned().collect();
    Ok(TokenizedReport {
        id: report.id.clone(),
        sentences,
        flat_tokens,
    })
}

/// Lowercase and split on whitespace after isolating separable punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 16);
    for ch in text.to_lowercase().chars() {
        if SEPARABLE.contains(&ch) {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        } else {
            spaced.push(ch);
        }
    }
    spaced.split_whitespace().map(String::from).collect()
}

impl Vocabulary {
    /// Count token frequencies across the corpus and keep tokens with
    /// frequency >= `min_freq`, ordered by descending count then token.
    pub fn build(corpus: &[TokenizedReport], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("build_vocab: empty corpus"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for rep in corpus {
            for tok in &rep.flat_tokens {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !is_special(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut vocab = Vocabulary::empty(min_freq);
        for (tok, _) in kept {
            vocab.push(tok.to_string());
        }
        Ok(vocab)
    }

    fn empty(min_frequency: usize) -> Self {
        let specials = [PAD_TOKEN, START_TOKEN, END_TOKEN, UNK_TOKEN];
        let mut v = Vocabulary {
            token_to_index: HashMap::new(),
            index_to_token: Vec::new(),
            min_frequency,
        };
        for s in specials {
            v.push(s.to_string());
        }
        v
    }

    fn push(&mut self, token: String) {
        let idx = self.index_to_token.len();
        self.token_to_index.insert(token.clone(), idx);
        self.index_to_token.push(token);
    }

    pub fn len(&self) -> usize {
        self.index_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_token.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.token_to_index.get(token).copied()
    }

    pub fn token_at(&self, index: usize) -> Option<&str> {
        self.index_to_token.get(index).map(String::as_str)
    }

    /// Map tokens to indices; out-of-vocabulary tokens become `UNK`.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.index_of(t).unwrap_or(UNK))
            .collect()
    }

    /// Map indices back to surface tokens. UNK keeps its surface form.
    pub fn decode(&self, indices: &[usize]) -> Result<Vec<String>> {
        indices
            .iter()
            .map(|&i| {
                self.token_at(i)
                    .map(String::from)
                    .ok_or_else(|| Error::invalid(format!("decode: index {i} out of range")))
            })
            .collect()
    }

    /// Write `token<TAB>index` lines, specials first (they hold indices 0-3).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (i, tok) in self.index_to_token.iter().enumerate() {
            writeln!(f, "{tok}\t{i}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut v = Vocabulary {
            token_to_index: HashMap::new(),
            index_to_token: Vec::new(),
            min_frequency: 0,
        };
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, idx) = line.split_once('\t').ok_or(Error::Parse {
                line: lineno + 1,
                msg: "expected token<TAB>index".into(),
            })?;
            let idx: usize = idx.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("bad index {idx:?}"),
            })?;
            if idx != v.index_to_token.len() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("non-contiguous index {idx}"),
                });
            }
            v.push(tok.to_string());
        }
        for (i, expect) in [PAD_TOKEN, START_TOKEN, END_TOKEN, UNK_TOKEN]
            .iter()
            .enumerate()
        {
            if v.token_at(i) != Some(expect) {
                return Err(Error::format(format!(
                    "vocabulary file: special {expect:?} missing at index {i}"
                )));
            }
        }
        Ok(v)
    }
}

fn is_special(tok: &str) -> bool {
    matches!(tok, PAD_TOKEN | START_TOKEN | END_TOKEN | UNK_TOKEN)
}

/// Binary label vector over the primary nodes: element k is 1 when some
/// label string equals node k's name, case-insensitively. Returns the vector
/// plus the labels that matched nothing.
pub fn extract_labels(report: &Report, primary_nodes: &[String]) -> (Vec<f64>, Vec<String>) {
    let mut out = vec![0.0; primary_nodes.len()];
    let mut unmatched = Vec::new();
    for label in &report.labels {
        let mut hit = false;
        for (k, node) in primary_nodes.iter().enumerate() {
            if label.eq_ignore_ascii_case(node) {
                out[k] = 1.0;
                hit = true;
            }
        }
        if !hit {
            unmatched.push(label.clone());
        }
    }
    (out, unmatched)
}

/// Deterministic seeded shuffle, then contiguous slices sized
/// `floor(n*train)`, `floor(n*val)`, remainder.
pub fn split_dataset<T: Clone>(
    corpus: &[T],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (tr, va, te) = ratios;
    if (tr + va + te - 1.0).abs() > 1e-9 || tr < 0.0 || va < 0.0 || te < 0.0 {
        return Err(Error::invalid(format!(
            "split ratios must be nonnegative and sum to 1, got ({tr}, {va}, {te})"
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n = corpus.len();
    let n_train = (n as f64 * tr).floor() as usize;
    let n_val = (n as f64 * va).floor() as usize;
    let take = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_val]),
        take(&order[n_train + n_val..]),
    ))
}
