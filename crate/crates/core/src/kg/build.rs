//! End-to-end graph assembly from a report corpus and a lexicon.

use std::collections::{BTreeSet, HashMap, HashSet};

use super::mine::{
    binarize, build_cooccurrence, lemmatize_lexicon, lemmatize_tokens, match_concepts,
    select_auxiliary, Concept, Lemmatizer,
};
use super::{merge_graph, KnowledgeGraph};
use crate::corpus::{preprocess, Report};
use crate::error::Result;

/// What the mining pass saw, for `kg-stats` style reporting.
#[derive(Debug)]
pub struct BuildStats {
    pub doc_count: usize,
    pub n_matched_concepts: usize,
    pub requested_q: usize,
    pub selected: Vec<(String, usize)>,
    pub tau: u64,
    pub mined_edges: usize,
}

/// Mine the corpus, select `q` auxiliary concepts, threshold document
/// co-occurrences at `tau`, and merge everything into the manual graph.
pub fn build_graph_from_corpus(
    reports: &[Report],
    lexicon: Vec<Concept>,
    manual: &KnowledgeGraph,
    q: usize,
    tau: Option<u64>,
) -> Result<(KnowledgeGraph, BuildStats)> {
    let lemmatizer = Lemmatizer::from_lexicon(&lexicon);
    let lexicon = lemmatize_lexicon(lexicon, &lemmatizer);

    let mut per_doc: Vec<BTreeSet<usize>> = Vec::with_capacity(reports.len());
    for report in reports {
        let toks = preprocess(report)?;
        let lemmas = lemmatize_tokens(&toks.flat_tokens, &lemmatizer);
        let matches = match_concepts(&lemmas, &lexicon);
        per_doc.push(matches.iter().map(|m| m.concept).collect());
    }

    let names: Vec<String> = lexicon.iter().map(|c| c.name()).collect();
    let cooc = build_cooccurrence(&per_doc, lexicon.len());

    let mut doc_freqs: HashMap<String, usize> = HashMap::new();
    for (i, name) in names.iter().enumerate() {
        let f = cooc.count(i, i) as usize;
        if f > 0 {
            doc_freqs.insert(name.clone(), f);
        }
    }

    // exclusion set: manual node names, raw and lemma-normalized
    let mut existing: HashSet<String> = HashSet::new();
    for node in manual.nodes() {
        let lower = node.name.to_lowercase();
        let lemmas: Vec<String> = lower
            .split_whitespace()
            .map(|t| lemmatizer.lemma(t))
            .collect();
        existing.insert(lemmas.join(" "));
        existing.insert(lower);
    }

    let selected = select_auxiliary(&doc_freqs, q, &existing);
    let selected_names: HashSet<&str> = selected.iter().map(|(n, _)| n.as_str()).collect();

    let tau = tau.unwrap_or_else(|| super::mine::default_tau(cooc.doc_count));
    let adj = binarize(&cooc, tau)?;

    // Resolve each mined concept to a final node name: a manual node when the
    // lemma form matches one, a selected auxiliary otherwise.
    let resolve = |name: &str| -> Option<String> {
        for node in manual.nodes() {
            let lower = node.name.to_lowercase();
            let lemma_form: Vec<String> = lower
                .split_whitespace()
                .map(|t| lemmatizer.lemma(t))
                .collect();
            if lemma_form.join(" ") == name || lower == name {
                return Some(node.name.clone());
            }
        }
        if selected_names.contains(name) {
            return Some(name.to_string());
        }
        None
    };

    let mut mined_edges = Vec::new();
    let n = lexicon.len();
    for i in 0..n {
        for j in (i + 1)..n {
            if adj[i * n + j] != 0 {
                if let (Some(a), Some(b)) = (resolve(&names[i]), resolve(&names[j])) {
                    if !a.eq_ignore_ascii_case(&b) {
                        mined_edges.push((a, b));
                    }
                }
            }
        }
    }

    let aux_names: Vec<String> = selected.iter().map(|(n, _)| n.clone()).collect();
    let graph = merge_graph(manual, &aux_names, &mined_edges)?;
    let stats = BuildStats {
        doc_count: reports.len(),
        n_matched_concepts: doc_freqs.len(),
        requested_q: q,
        selected,
        tau,
        mined_edges: mined_edges.len(),
    };
    Ok((graph, stats))
}
