//! Multi-label finding prediction head and its evaluation helpers.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tape, TensorId};

/// Graph-level pooling then a linear map: `h [d, B*N]` is mean-pooled over
/// each sample's `n_nodes` columns and projected to per-finding logits
/// `[K, B]`.
pub fn classify(
    tape: &mut Tape,
    store: &ParamStore,
    h: TensorId,
    n_nodes: usize,
) -> Result<TensorId> {
    let pooled = tape.block_mean(h, n_nodes)?;
    let w = tape.param(store, "classifier.w");
    let b = tape.param(store, "classifier.b");
    tape.conv_k1(pooled, w, b)
}

/// Per-class positive/negative weights over the training labels:
/// `w_pos = (P+N)/max(P,1)`, `w_neg = (P+N)/max(N,1)`.
pub fn class_weights(labels: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = labels
        .first()
        .map(|l| l.len())
        .ok_or_else(|| Error::invalid("class_weights: no labels"))?;
    let mut w_pos = vec![0.0; k];
    let mut w_neg = vec![0.0; k];
    let total = labels.len() as f64;
    for c in 0..k {
        let pos: f64 = labels.iter().map(|l| l[c]).sum();
        let neg = total - pos;
        w_pos[c] = total / pos.max(1.0);
        w_neg[c] = total / neg.max(1.0);
    }
    Ok((w_pos, w_neg))
}

/// Area under the ROC curve via the rank statistic, ties counted half.
/// Undefined (None) when either class is absent.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // midranks over the pooled sample
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = (0..scores.len())
        .filter(|&i| labels[i] > 0.5)
        .map(|i| ranks[i])
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}
