//! Concept mining: lemmatization, greedy longest matching, auxiliary node
//! selection, and document co-occurrence counting.

use std::collections::{BTreeSet, HashMap, HashSet};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ConceptCategory {
    AnatomicalEntity,
    ClinicalFinding,
    ImagingObservation,
}

impl std::str::FromStr for ConceptCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AnatomicalEntity" => Ok(ConceptCategory::AnatomicalEntity),
            "ClinicalFinding" => Ok(ConceptCategory::ClinicalFinding),
            "ImagingObservation" => Ok(ConceptCategory::ImagingObservation),
            other => Err(Error::format(format!("unknown concept category {other:?}"))),
        }
    }
}

/// A lexicon entry: 1-5 lemmatized tokens plus its category.
#[derive(Clone, Debug, PartialEq)]
pub struct Concept {
    pub tokens: Vec<String>,
    pub category: ConceptCategory,
}

impl Concept {
    pub fn name(&self) -> String {
        self.tokens.join(" ")
    }
}

/// A matched span: concept index plus the half-open token range it covers.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ConceptMatch {
    pub concept: usize,
    pub start: usize,
    pub end: usize,
}

/// Plural reduction: an exception table for irregulars, then ordered suffix
/// rules. Deterministic; the `-es` rule only fires when the stripped base is
/// a known lexicon token.
pub struct Lemmatizer {
    exceptions: HashMap<&'static str, &'static str>,
    base_vocab: HashSet<String>,
}

const IRREGULAR_PLURALS: &[(&str, &str)] = &[
    ("alveoli", "alveolus"),
    ("apices", "apex"),
    ("atelectases", "atelectasis"),
    ("bronchi", "bronchus"),
    ("bullae", "bulla"),
    ("calculi", "calculus"),
    ("children", "child"),
    ("diagnoses", "diagnosis"),
    ("emboli", "embolus"),
    ("feet", "foot"),
    ("foci", "focus"),
    ("men", "man"),
    ("metastases", "metastasis"),
    ("nuclei", "nucleus"),
    ("pleurae", "pleura"),
    ("pneumothoraces", "pneumothorax"),
    ("stenoses", "stenosis"),
    ("teeth", "tooth"),
    ("thoraces", "thorax"),
    ("vertebrae", "vertebra"),
    ("women", "woman"),
];

impl Lemmatizer {
    /// `base_vocab` is the set of raw lowercase tokens appearing in lexicon
    /// entry names; it gates the `-es` rule.
    pub fn new(base_vocab: HashSet<String>) -> Self {
        Lemmatizer {
            exceptions: IRREGULAR_PLURALS.iter().copied().collect(),
            base_vocab,
        }
    }

    pub fn from_lexicon(lexicon: &[Concept]) -> Self {
        let vocab = lexicon
            .iter()
            .flat_map(|c| c.tokens.iter().cloned())
            .collect();
        Self::new(vocab)
    }

    /// Lemmatize one lowercase token.
    pub fn lemma(&self, token: &str) -> String {
        if let Some(&l) = self.exceptions.get(token) {
            return l.to_string();
        }
        if token.len() > 4 {
            if let Some(stem) = token.strip_suffix("ies") {
                return format!("{stem}y");
            }
        }
        if token.len() > 3 {
            if let Some(base) = token.strip_suffix("es") {
                if self.base_vocab.contains(base) {
                    return base.to_string();
                }
            }
        }
        if token.len() > 3
            && token.ends_with('s')
            && !token.ends_with("ss")
            && !token.ends_with("us")
            && !token.ends_with("is")
        {
            return token[..token.len() - 1].to_string();
        }
        token.to_string()
    }
}

pub fn lemmatize_tokens(tokens: &[String], lemmatizer: &Lemmatizer) -> Vec<String> {
    tokens.iter().map(|t| lemmatizer.lemma(t)).collect()
}

/// Left-to-right greedy scan: at each position take the longest lexicon
/// entry whose tokens equal the lemma window, then jump past it. Matches
/// never overlap.
pub fn match_concepts(lemmas: &[String], lexicon: &[Concept]) -> Vec<ConceptMatch> {
    // entries grouped by first token, longest first
    let mut by_first: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, c) in lexicon.iter().enumerate() {
        if let Some(first) = c.tokens.first() {
            by_first.entry(first).or_default().push(i);
        }
    }
    for v in by_first.values_mut() {
        v.sort_by(|&a, &b| {
            lexicon[b]
                .tokens
                .len()
                .cmp(&lexicon[a].tokens.len())
                .then(a.cmp(&b))
        });
    }

    let mut matches = Vec::new();
    let mut pos = 0;
    while pos < lemmas.len() {
        let mut advanced = false;
        if let Some(cands) = by_first.get(lemmas[pos].as_str()) {
            for &ci in cands {
                let toks = &lexicon[ci].tokens;
                if pos + toks.len() <= lemmas.len()
                    && toks.iter().zip(&lemmas[pos..]).all(|(a, b)| a == b)
                {
                    matches.push(ConceptMatch {
                        concept: ci,
                        start: pos,
                        end: pos + toks.len(),
                    });
                    pos += toks.len();
                    advanced = true;
                    break;
                }
            }
        }
        if !advanced {
            pos += 1;
        }
    }
    matches
}

/// Pick the `q` most document-frequent concepts not already in the graph.
/// Ties break lexicographically by name. When fewer than `q` candidates
/// exist, all of them are returned (the caller warns).
pub fn select_auxiliary(
    doc_freqs: &HashMap<String, usize>,
    q: usize,
    existing: &HashSet<String>,
) -> Vec<(String, usize)> {
    let mut cands: Vec<(String, usize)> = doc_freqs
        .iter()
        .filter(|(name, _)| !existing.contains(&name.to_lowercase()))
        .map(|(name, &c)| (name.clone(), c))
        .collect();
    cands.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    cands.truncate(q);
    cands
}

/// Symmetric document-level co-occurrence counts over `n` concepts. The
/// diagonal holds per-concept document frequencies; each document counts
/// once regardless of mention multiplicity.
#[derive(Clone, Debug, PartialEq)]
pub struct CooccurrenceMatrix {
    counts: Vec<u64>,
    n: usize,
    pub doc_count: usize,
}

impl CooccurrenceMatrix {
    pub fn n_concepts(&self) -> usize {
        self.n
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.n + j]
    }
}

pub fn build_cooccurrence(per_doc: &[BTreeSet<usize>], n_concepts: usize) -> CooccurrenceMatrix {
    let mut counts = vec![0u64; n_concepts * n_concepts];
    for doc in per_doc {
        for &i in doc {
            for &j in doc {
                counts[i * n_concepts + j] += 1;
            }
        }
    }
    CooccurrenceMatrix {
        counts,
        n: n_concepts,
        doc_count: per_doc.len(),
    }
}

/// Threshold off-diagonal counts: edge iff `i != j` and `count >= tau`.
pub fn binarize(counts: &CooccurrenceMatrix, tau: u64) -> Result<Vec<u8>> {
    if tau == 0 {
        return Err(Error::invalid("binarize: tau must be positive"));
    }
    let n = counts.n;
    let mut adj = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j && counts.count(i, j) >= tau {
                adj[i * n + j] = 1;
            }
        }
    }
    Ok(adj)
}

/// Default binarization threshold: drops singleton co-occurrences while
/// scaling gently with corpus size.
pub fn default_tau(doc_count: usize) -> u64 {
    2u64.max((0.01 * doc_count as f64).ceil() as u64)
}

/// Parse `name<TAB>category` lines. Entry names are stored lowercase; the
/// caller lemmatizes them against the final lemmatizer.
pub fn parse_lexicon(text: &str) -> Result<Vec<Concept>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, cat) = line.split_once('\t').ok_or(Error::Parse {
            line: lineno + 1,
            msg: "expected name<TAB>category".into(),
        })?;
        let tokens: Vec<String> = name.to_lowercase().split_whitespace().map(String::from).collect();
        if tokens.is_empty() || tokens.len() > 5 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("concept name must be 1-5 tokens, got {:?}", name),
            });
        }
        out.push(Concept {
            tokens,
            category: cat.trim().parse()?,
        });
    }
    Ok(out)
}

pub fn load_lexicon(path: &std::path::Path) -> Result<Vec<Concept>> {
    parse_lexicon(&std::fs::read_to_string(path)?)
}

/// Re-lemmatize lexicon entries so matching operates lemma-to-lemma and
/// drop exact duplicates that lemmatization may introduce.
pub fn lemmatize_lexicon(lexicon: Vec<Concept>, lemmatizer: &Lemmatizer) -> Vec<Concept> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for c in lexicon {
        let tokens: Vec<String> = c.tokens.iter().map(|t| lemmatizer.lemma(t)).collect();
        if seen.insert(tokens.join(" ")) {
            out.push(Concept {
                tokens,
                category: c.category,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lemmatizer_with(bases: &[&str]) -> Lemmatizer {
        Lemmatizer::new(bases.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn lemma_ies_rule() {
        let l = lemmatizer_with(&[]);
        assert_eq!(l.lemma("opacities"), "opacity");
        assert_eq!(l.lemma("densities"), "density");
    }

    #[test]
    fn lemma_plain_s_rule() {
        let l = lemmatizer_with(&[]);
        assert_eq!(l.lemma("lungs"), "lung");
        assert_eq!(l.lemma("granulomas"), "granuloma");
    }

    #[test]
    fn lemma_full_table_against_word_list() {
        // hand-built oracle list covering every rule branch
        let l = lemmatizer_with(&["mass", "base"]);
        let cases = [
            ("opacities", "opacity"),      // -ies
            ("granulomas", "granuloma"),   // -s
            ("lungs", "lung"),             // -s
            ("masses", "mass"),            // -es with base in vocab
            ("bases", "base"),             // -es with base in vocab
            ("mass", "mass"),              // ss guard
            ("pectus", "pectus"),          // us guard
            ("fibrosis", "fibrosis"),      // is guard
            ("vertebrae", "vertebra"),     // exception
            ("pneumothoraces", "pneumothorax"), // exception
            ("atelectases", "atelectasis"),     // exception
            ("apices", "apex"),            // exception
            ("effusion", "effusion"),      // no rule
            ("pain", "pain"),              // no rule
            ("gas", "gas"),                // too short for -s rule
        ];
        for (input, expect) in cases {
            assert_eq!(l.lemma(input), expect, "lemma({input})");
        }
    }

    fn lex(entries: &[&str]) -> Vec<Concept> {
        entries
            .iter()
            .map(|e| Concept {
                tokens: e.split_whitespace().map(String::from).collect(),
                category: ConceptCategory::ClinicalFinding,
            })
            .collect()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn match_prefers_longer_entries() {
        let lexicon = lex(&["granuloma", "calcified granuloma"]);
        let m = match_concepts(&toks("calcified granuloma"), &lexicon);
        assert_eq!(
            m,
            vec![ConceptMatch {
                concept: 1,
                start: 0,
                end: 2
            }]
        );
    }

    #[test]
    fn match_empty_document() {
        let lexicon = lex(&["granuloma"]);
        assert!(match_concepts(&[], &lexicon).is_empty());
    }

    #[test]
    fn match_interleaved_matches_exhaustive_oracle() {
        // oracle: same greedy policy but trying every entry by brute force
        let oracle = |lemmas: &[String], lexicon: &[Concept]| -> Vec<ConceptMatch> {
            let mut out = Vec::new();
            let mut pos = 0;
            while pos < lemmas.len() {
                let mut best: Option<(usize, usize)> = None; // (len, idx)
                for (ci, c) in lexicon.iter().enumerate() {
                    let n = c.tokens.len();
                    if pos + n <= lemmas.len() && c.tokens[..] == lemmas[pos..pos + n] {
                        let better = match best {
                            None => true,
                            Some((blen, bidx)) => n > blen || (n == blen && ci < bidx),
                        };
                        if better {
                            best = Some((n, ci));
                        }
                    }
                }
                match best {
                    Some((n, ci)) => {
                        out.push(ConceptMatch {
                            concept: ci,
                            start: pos,
                            end: pos + n,
                        });
                        pos += n;
                    }
                    None => pos += 1,
                }
            }
            out
        };
        let lexicon = lex(&["pleural effusion", "effusion", "pleural", "small pleural effusion"]);
        let doc = toks("small pleural effusion with effusion near pleural space");
        assert_eq!(match_concepts(&doc, &lexicon), oracle(&doc, &lexicon));
    }

    #[test]
    fn matches_never_overlap_and_are_increasing() {
        let lexicon = lex(&["a b", "b c", "c", "a"]);
        let doc = toks("a b c a b c c");
        let ms = match_concepts(&doc, &lexicon);
        for w in ms.windows(2) {
            assert!(w[0].end <= w[1].start);
        }
        for m in &ms {
            assert!(m.start < m.end);
        }
    }

    #[test]
    fn select_auxiliary_orders_and_excludes() {
        let mut freqs = HashMap::new();
        freqs.insert("granuloma".to_string(), 5);
        freqs.insert("congestion".to_string(), 5);
        freqs.insert("opacity".to_string(), 9);
        freqs.insert("infection".to_string(), 2);
        let existing: HashSet<String> = ["opacity".to_string()].into_iter().collect();
        let sel = select_auxiliary(&freqs, 2, &existing);
        assert_eq!(
            sel,
            vec![("congestion".to_string(), 5), ("granuloma".to_string(), 5)]
        );
    }

    #[test]
    fn select_auxiliary_q_zero_and_underfull() {
        let mut freqs = HashMap::new();
        freqs.insert("a".to_string(), 1);
        assert!(select_auxiliary(&freqs, 0, &HashSet::new()).is_empty());
        let sel = select_auxiliary(&freqs, 10, &HashSet::new());
        assert_eq!(sel.len(), 1);
    }

    #[test]
    fn cooccurrence_brute_force_case() {
        // docs [{a,b},{a},{b}] with a=0, b=1
        let docs = vec![
            BTreeSet::from([0usize, 1]),
            BTreeSet::from([0usize]),
            BTreeSet::from([1usize]),
        ];
        let m = build_cooccurrence(&docs, 2);
        assert_eq!(m.count(0, 1), 1);
        assert_eq!(m.count(1, 0), 1);
        assert_eq!(m.count(0, 0), 2);
        assert_eq!(m.count(1, 1), 2);
        assert_eq!(m.doc_count, 3);
    }

    #[test]
    fn cooccurrence_empty_and_multiplicity() {
        let m = build_cooccurrence(&[], 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.count(i, j), 0);
            }
        }
        // a document mentions concept 0 five times -> still a set, count 1
        let docs = vec![BTreeSet::from([0usize])];
        let m = build_cooccurrence(&docs, 1);
        assert_eq!(m.count(0, 0), 1);
    }

    #[test]
    fn binarize_threshold_boundary() {
        let docs: Vec<BTreeSet<usize>> = (0..4).map(|_| BTreeSet::from([0usize, 1])).collect();
        let m = build_cooccurrence(&docs, 2);
        assert_eq!(m.count(0, 1), 4);
        let adj5 = binarize(&m, 5).unwrap();
        assert_eq!(adj5[1], 0, "count 4 < tau 5: no edge");
        let adj4 = binarize(&m, 4).unwrap();
        assert_eq!(adj4[1], 1, "count 4 >= tau 4: edge (boundary inclusive)");
        // diagonal never edges
        assert_eq!(adj4[0], 0);
    }

    #[test]
    fn default_tau_floors_at_two() {
        assert_eq!(default_tau(10), 2);
        assert_eq!(default_tau(0), 2);
        assert_eq!(default_tau(1000), 10);
    }

    #[test]
    fn parse_lexicon_rejects_bad_category() {
        assert!(parse_lexicon("granuloma\tNotACategory").is_err());
        let ok = parse_lexicon("granuloma\tClinicalFinding\nchest pain\tClinicalFinding").unwrap();
        assert_eq!(ok.len(), 2);
        assert_eq!(ok[1].tokens, vec!["chest", "pain"]);
    }
}
