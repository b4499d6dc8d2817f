//! Deterministic synthetic corpus: template reports whose finding labels
//! are painted into the views as per-finding blobs, so the labels are
//! visually recoverable by the small CNN.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{save_reports, Report};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::kg::{default_lexicon, KnowledgeGraph};

pub const SYNTH_IMAGE_SIDE: usize = 64;

/// One generated case: the report record plus both rendered views.
pub struct SynthCase {
    pub report: Report,
    pub frontal: FeatureMap,
    pub lateral: FeatureMap,
}

/// Context terms available to the templates: lexicon entries that are not
/// primary findings, in sorted order for determinism.
fn context_terms(graph: &KnowledgeGraph) -> Vec<String> {
    let primary: HashSet<String> = graph
        .primary_names()
        .iter()
        .map(|n| n.to_lowercase())
        .collect();
    let mut terms: Vec<String> = default_lexicon()
        .into_iter()
        .map(|c| c.name())
        .filter(|n| !primary.contains(n))
        .collect();
    terms.sort();
    terms.dedup();
    terms
}

/// Paint a filled square for finding `k` (0-based primary index) into the
/// image. Every finding gets its own grid cell and its own intensity, so
/// identity is recoverable both from position and from local appearance.
/// The lateral view mirrors the cell so both views carry signal.
fn paint_blob(img: &mut FeatureMap, k: usize, mirrored: bool) {
    let cell = 12;
    let cols = 5;
    let idx = if mirrored { 19 - (k % 20) } else { k % 20 };
    let row = idx / cols;
    let col = idx % cols;
    let y0 = 2 + row * cell + 2;
    let x0 = 2 + col * cell + 2;
    let intensity = 0.25 + 0.75 * ((k % 20) + 1) as f64 / 20.0;
    for y in y0..y0 + 8 {
        for x in x0..x0 + 8 {
            *img.at_mut(0, y, x) = intensity;
        }
    }
}

const SENTENCE_TEMPLATES: [(&str, &str); 3] = [
    ("there is ", " near the "),
    ("", " is present at the "),
    ("findings suggest ", " with "),
];

/// Generate `n_pairs` cases. Each samples 1-3 distinct primary findings
/// (finding sets never repeat across the corpus), renders one sentence per
/// finding plus a closing sentence, and cycles through the context-term
/// list so a 20-pair corpus mentions every non-primary lexicon concept.
pub fn synth_corpus(seed: u64, n_pairs: usize, graph: &KnowledgeGraph) -> Result<Vec<SynthCase>> {
    let primary = graph.primary_names();
    if primary.is_empty() {
        return Err(Error::invalid("synth_corpus: graph has no primary nodes"));
    }
    let terms = context_terms(graph);
    if terms.len() < 2 {
        return Err(Error::invalid("synth_corpus: not enough context terms"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used_sets: HashSet<Vec<usize>> = HashSet::new();
    let mut term_cursor = 0usize;
    let next_term = |cursor: &mut usize| -> String {
        let t = terms[*cursor % terms.len()].clone();
        *cursor += 1;
        t
    };
    let mut cases = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        // distinct finding set per case so reports stay distinguishable
        let mut findings: Vec<usize> = Vec::new();
        for _attempt in 0..200 {
            let count = rng.gen_range(1..=3usize.min(primary.len()));
            let mut pool: Vec<usize> = (0..primary.len()).collect();
            pool.shuffle(&mut rng);
            let mut set: Vec<usize> = pool[..count].to_vec();
            set.sort_unstable();
            if used_sets.insert(set.clone()) {
                findings = set;
                break;
            }
        }
        if findings.is_empty() {
            return Err(Error::invalid(
                "synth_corpus: exhausted distinct finding sets; lower n_pairs",
            ));
        }

        let mut sentences = Vec::new();
        for (j, &k) in findings.iter().enumerate() {
            let (pre, mid) = SENTENCE_TEMPLATES[(i + j) % SENTENCE_TEMPLATES.len()];
            let term = next_term(&mut term_cursor);
            sentences.push(format!(
                "{pre}{}{mid}{term} .",
                primary[k].to_lowercase()
            ));
        }
        let ta = next_term(&mut term_cursor);
        let tb = next_term(&mut term_cursor);
        sentences.push(format!("the {ta} and {tb} appear unremarkable ."));
        let findings_text = sentences.join(" ");
        let impression = format!(
            "overall consistent with {} .",
            primary[findings[0]].to_lowercase()
        );

        let id = format!("synth{i:04}");
        let mut frontal = FeatureMap::zeros(1, SYNTH_IMAGE_SIDE, SYNTH_IMAGE_SIDE);
        let mut lateral = FeatureMap::zeros(1, SYNTH_IMAGE_SIDE, SYNTH_IMAGE_SIDE);
        for &k in &findings {
            paint_blob(&mut frontal, k, false);
            paint_blob(&mut lateral, k, true);
        }
        let labels: Vec<String> = findings.iter().map(|&k| primary[k].clone()).collect();
        cases.push(SynthCase {
            report: Report {
                id: id.clone(),
                findings: findings_text,
                impression,
                labels,
                frontal_ref: format!("images/{id}_f.fmap"),
                lateral_ref: format!("images/{id}_l.fmap"),
            },
            frontal,
            lateral,
        });
    }
    Ok(cases)
}

/// Write the corpus and its view images under `dir` in the external file
/// formats (`reports.jsonl` plus `images/*.fmap`).
pub fn write_synth_corpus(dir: &Path, cases: &[SynthCase]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let reports: Vec<Report> = cases.iter().map(|c| c.report.clone()).collect();
    save_reports(&dir.join("reports.jsonl"), &reports)?;
    for c in cases {
        c.frontal.save(&dir.join(&c.report.frontal_ref))?;
        c.lateral.save(&dir.join(&c.report.lateral_ref))?;
    }
    Ok(())
}
