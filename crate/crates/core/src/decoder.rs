//! Two-level report decoder: additive attention over node features feeds a
//! topic recurrence with a learned stop gate; each topic vector drives a
//! word-level recurrence that emits one sentence.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{Vocabulary, SENT_END, START};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{lstm_cell, LstmCellIds, LstmGateIds, ParamStore, Tape, Tensor, TensorId};

/// Topic-level recurrent state on the current tape.
#[derive(Copy, Clone)]
pub struct TopicState {
    pub h: TensorId,
    pub c: TensorId,
}

impl TopicState {
    pub fn zeros(tape: &mut Tape, hidden: usize) -> Self {
        TopicState {
            h: tape.leaf(Tensor::zeros(vec![hidden, 1])),
            c: tape.leaf(Tensor::zeros(vec![hidden, 1])),
        }
    }
}

/// A generated multi-sentence report with the per-step stop probabilities.
#[derive(Clone, Debug)]
pub struct GeneratedReport {
    pub sentences: Vec<Vec<String>>,
    pub stop_probs: Vec<f64>,
}

impl GeneratedReport {
    pub fn text(&self) -> String {
        self.sentences
            .iter()
            .map(|s| s.join(" "))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn bind_lstm(tape: &mut Tape, store: &ParamStore, prefix: &str) -> LstmCellIds {
    let gate = |tape: &mut Tape, g: &str| LstmGateIds {
        w: tape.param(store, &format!("{prefix}.{g}.w")),
        u: tape.param(store, &format!("{prefix}.{g}.u")),
        b: tape.param(store, &format!("{prefix}.{g}.b")),
    };
    LstmCellIds {
        input: gate(tape, "i"),
        forget: gate(tape, "f"),
        output: gate(tape, "o"),
        cell: gate(tape, "g"),
    }
}

/// Additive attention over node columns:
/// `score_i = v^T tanh(Wq q + Wk node_i)`, softmax over nodes, context is
/// the weighted node sum `[d, 1]`.
pub fn attend(
    tape: &mut Tape,
    store: &ParamStore,
    nodes: TensorId,
    query: TensorId,
) -> Result<TensorId> {
    let wq = tape.param(store, "decoder.attn.wq");
    let wk = tape.param(store, "decoder.attn.wk");
    let v = tape.param(store, "decoder.attn.v");
    let q = tape.matmul(wq, query)?; // [att, 1]
    let att = tape.value(q).shape()[0];
    let keys = tape.matmul(wk, nodes)?; // [att, N]
    let qcol = tape.reshape(q, vec![att])?;
    let summed = tape.add_col(keys, qcol)?;
    let t = tape.tanh(summed);
    let scores = tape.matmul(v, t)?; // [1, N]
    let weights = tape.softmax(scores, 1)?;
    let wt = tape.transpose(weights)?; // [N, 1]
    tape.matmul(nodes, wt)
}

/// One topic step: recurrent update on the context, a stop logit, and the
/// projected topic vector.
pub fn topic_step(
    tape: &mut Tape,
    store: &ParamStore,
    context: TensorId,
    state: TopicState,
) -> Result<(TensorId, TensorId, TopicState)> {
    let ids = bind_lstm(tape, store, "decoder.topic");
    let (h, c) = lstm_cell(tape, context, state.h, state.c, &ids)?;
    let sw = tape.param(store, "decoder.stop.w");
    let sb = tape.param(store, "decoder.stop.b");
    let stop_lin = tape.matmul(sw, h)?;
    let stop_logit = tape.add_col(stop_lin, sb)?; // [1, 1]
    let pw = tape.param(store, "decoder.proj.w");
    let pb = tape.param(store, "decoder.proj.b");
    let proj = tape.matmul(pw, h)?;
    let topic = tape.add_col(proj, pb)?; // [d, 1]
    Ok((topic, stop_logit, TopicState { h, c }))
}

fn word_input(
    tape: &mut Tape,
    emb: TensorId,
    token: usize,
    topic: TensorId,
) -> Result<TensorId> {
    let e = tape.embed_lookup(emb, token)?;
    let edim = tape.value(e).shape()[0];
    let ecol = tape.reshape(e, vec![edim, 1])?;
    tape.concat(&[ecol, topic], 0) // [E + d, 1]
}

fn word_logits(
    tape: &mut Tape,
    store: &ParamStore,
    h: TensorId,
) -> Result<TensorId> {
    let ow = tape.param(store, "decoder.out.w");
    let ob = tape.param(store, "decoder.out.b");
    let lin = tape.matmul(ow, h)?;
    tape.add_col(lin, ob) // [V, 1]
}

/// Teacher-forced sentence pass: feed `START, gold[0], ..` and return the
/// `[T, V]` logits scored against every gold token (terminator included).
pub fn word_teacher(
    tape: &mut Tape,
    store: &ParamStore,
    topic: TensorId,
    gold: &[usize],
) -> Result<TensorId> {
    if gold.is_empty() {
        return Err(Error::invalid("word_teacher: empty gold sentence"));
    }
    let hidden = store
        .get("decoder.out.w")
        .expect("decoder.out.w present")
        .shape()[1];
    let emb = tape.param(store, "decoder.embedding");
    let ids = bind_lstm(tape, store, "decoder.word");
    let mut h = tape.leaf(Tensor::zeros(vec![hidden, 1]));
    let mut c = tape.leaf(Tensor::zeros(vec![hidden, 1]));
    let mut rows = Vec::with_capacity(gold.len());
    let mut prev = START;
    for &target in gold {
        let x = word_input(tape, emb, prev, topic)?;
        let (h2, c2) = lstm_cell(tape, x, h, c, &ids)?;
        h = h2;
        c = c2;
        let logits = word_logits(tape, store, h)?;
        rows.push(tape.transpose(logits)?); // [1, V]
        prev = target;
    }
    tape.concat(&rows, 0)
}

/// Greedy sentence decode: argmax token by token, stopping at the sentence
/// terminator or `max_len`.
pub fn word_greedy(
    tape: &mut Tape,
    store: &ParamStore,
    topic: TensorId,
    terminator: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let hidden = store
        .get("decoder.out.w")
        .expect("decoder.out.w present")
        .shape()[1];
    let emb = tape.param(store, "decoder.embedding");
    let ids = bind_lstm(tape, store, "decoder.word");
    let mut h = tape.leaf(Tensor::zeros(vec![hidden, 1]));
    let mut c = tape.leaf(Tensor::zeros(vec![hidden, 1]));
    let mut prev = START;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let x = word_input(tape, emb, prev, topic)?;
        let (h2, c2) = lstm_cell(tape, x, h, c, &ids)?;
        h = h2;
        c = c2;
        let logits = word_logits(tape, store, h)?;
        let next = argmax(tape.value(logits).data());
        out.push(next);
        if next == terminator {
            break;
        }
        prev = next;
    }
    Ok(out)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Combine per-sentence token logits with the stop-gate trajectory:
/// summed PAD-free token cross-entropy plus
/// `lambda_stop * BCE(stop, last-sentence indicator)`.
pub fn sequence_loss(
    tape: &mut Tape,
    sentence_logits: &[TensorId],
    gold: &[Vec<usize>],
    stop_logits: &[TensorId],
    lambda_stop: f64,
) -> Result<TensorId> {
    if sentence_logits.len() != gold.len() {
        return Err(Error::invalid(format!(
            "sequence_loss: {} logit blocks for {} gold sentences",
            sentence_logits.len(),
            gold.len()
        )));
    }
    if stop_logits.len() != gold.len() {
        return Err(Error::invalid(format!(
            "sequence_loss: {} stop logits for {} sentences",
            stop_logits.len(),
            gold.len()
        )));
    }
    let mut total: Option<TensorId> = None;
    for (logits, sent) in sentence_logits.iter().zip(gold) {
        let ce = tape.cross_entropy(*logits, sent, None)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    let mut loss = total.ok_or_else(|| Error::invalid("sequence_loss: no sentences"))?;
    if lambda_stop != 0.0 {
        let n = stop_logits.len();
        let flat: Result<Vec<TensorId>> = stop_logits
            .iter()
            .map(|&s| tape.reshape(s, vec![1]))
            .collect();
        let stacked = tape.concat(&flat?, 0)?; // [n]
        let mut targets = vec![0.0; n];
        targets[n - 1] = 1.0;
        let ones = vec![1.0; n];
        let bce = tape.weighted_bce(stacked, &targets, &ones, &ones)?;
        let scaled = tape.scale(bce, lambda_stop);
        loss = tape.add(loss, scaled)?;
    }
    Ok(loss)
}

/// Full teacher-forced loss for one report against frozen node features.
/// Sentences beyond `max_sentences` and tokens beyond `max_len` are
/// truncated.
pub fn decoder_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    nodes: TensorId,
    gold_sentences: &[Vec<usize>],
    lambda_stop: f64,
    max_sentences: usize,
    max_len: usize,
) -> Result<TensorId> {
    let n_sent = gold_sentences.len().min(max_sentences).max(1);
    let mut state = TopicState::zeros(tape, cfg.decoder_hidden);
    let mut sent_logits = Vec::with_capacity(n_sent);
    let mut stops = Vec::with_capacity(n_sent);
    let mut truncated: Vec<Vec<usize>> = Vec::with_capacity(n_sent);
    for sent in gold_sentences.iter().take(n_sent) {
        let context = attend(tape, store, nodes, state.h)?;
        let (topic, stop_logit, next) = topic_step(tape, store, context, state)?;
        state = next;
        let gold: Vec<usize> = sent.iter().take(max_len).copied().collect();
        let logits = word_teacher(tape, store, topic, &gold)?;
        sent_logits.push(logits);
        stops.push(stop_logit);
        truncated.push(gold);
    }
    sequence_loss(tape, &sent_logits, &truncated, &stops, lambda_stop)
}

/// Greedy multi-sentence generation: attend, advance the topic state,
/// decode one sentence, and stop once the gate fires or the sentence budget
/// is exhausted.
pub fn generate_report(
    store: &ParamStore,
    cfg: &ModelConfig,
    nodes: &Tensor,
    vocab: &Vocabulary,
    max_sentences: usize,
    stop_threshold: f64,
    max_len: usize,
) -> Result<GeneratedReport> {
    let terminator = vocab
        .index_of(SENT_END)
        .ok_or_else(|| Error::invalid("vocabulary lacks the sentence terminator token"))?;
    let mut tape = Tape::new();
    let nodes_id = tape.leaf(nodes.clone());
    let mut state = TopicState::zeros(&mut tape, cfg.decoder_hidden);
    let mut sentences = Vec::new();
    let mut stop_probs = Vec::new();
    for _ in 0..max_sentences {
        let context = attend(&mut tape, store, nodes_id, state.h)?;
        let (topic, stop_logit, next) = topic_step(&mut tape, store, context, state)?;
        state = next;
        let stop_prob = sigmoid(tape.value(stop_logit).item());
        let tokens = word_greedy(&mut tape, store, topic, terminator, max_len)?;
        sentences.push(vocab.decode(&tokens)?);
        stop_probs.push(stop_prob);
        if stop_prob > stop_threshold {
            break;
        }
    }
    Ok(GeneratedReport {
        sentences,
        stop_probs,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Build the `[V, dim]` embedding table: rows for words found in the
/// whitespace `word v1..vdim` file, seeded N(0, 0.01^2) rows elsewhere.
/// `force_random` ignores the file entirely (the random-embeddings
/// ablation).
pub fn load_embeddings(
    path: Option<&Path>,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
    force_random: bool,
) -> Result<Tensor> {
    let v = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    let mut data: Vec<f64> = (0..v * dim).map(|_| normal.sample(&mut rng)).collect();
    if force_random {
        return Tensor::new(vec![v, dim], data);
    }
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().ok_or(Error::Parse {
                line: lineno + 1,
                msg: "empty embedding line".into(),
            })?;
            let values: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|_| Error::Parse {
                        line: lineno + 1,
                        msg: format!("bad float {p:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!(
                        "embedding width {} does not match expected {dim}",
                        values.len()
                    ),
                });
            }
            if let Some(row) = vocab.index_of(word) {
                data[row * dim..(row + 1) * dim].copy_from_slice(&values);
            }
        }
    }
    Tensor::new(vec![v, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenizedReport;
    use crate::model::{init_decoder_params, ModelConfig};
    use crate::tensor::{adam_step, random_tensor, AdamConfig, AdamState};

    fn tiny_cfg(vocab: usize) -> (ModelConfig, usize) {
        let mut cfg = ModelConfig::reference(3, 2);
        cfg.gcn_hidden = 4; // node / topic dim
        cfg.decoder_hidden = 5;
        cfg.attention_dim = 3;
        cfg.embedding_dim = 4;
        (cfg, vocab)
    }

    fn decoder_store(cfg: &ModelConfig, vocab: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let normal = Normal::new(0.0, 0.3).unwrap();
        let emb = Tensor::new(
            vec![vocab, cfg.embedding_dim],
            (0..vocab * cfg.embedding_dim)
                .map(|_| normal.sample(&mut rng))
                .collect(),
        )
        .unwrap();
        init_decoder_params(&mut store, cfg, emb, &mut rng).unwrap();
        store
    }

    fn test_vocab(extra: &[&str]) -> Vocabulary {
        let toks: Vec<String> = extra
            .iter()
            .map(|s| s.to_string())
            .chain(std::iter::once(".".to_string()))
            .collect();
        let rep = TokenizedReport {
            id: "v".into(),
            sentences: vec![toks.clone()],
            flat_tokens: toks,
        };
        Vocabulary::build(&[rep], 1).unwrap()
    }

    #[test]
    fn attend_single_node_returns_that_node() {
        let (cfg, v) = tiny_cfg(8);
        let store = decoder_store(&cfg, v, 1);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let node = random_tensor(vec![cfg.gcn_hidden, 1], &mut r, 0.0);
        let mut tape = Tape::new();
        let nid = tape.leaf(node.clone());
        let q = tape.leaf(Tensor::zeros(vec![cfg.decoder_hidden, 1]));
        let ctx = attend(&mut tape, &store, nid, q).unwrap();
        for (a, b) in tape.value(ctx).data().iter().zip(node.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attend_zero_score_params_is_node_mean() {
        let (cfg, v) = tiny_cfg(8);
        let mut store = decoder_store(&cfg, v, 3);
        store
            .get_mut("decoder.attn.v")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let nodes = random_tensor(vec![cfg.gcn_hidden, 5], &mut r, 0.0);
        let mut tape = Tape::new();
        let nid = tape.leaf(nodes.clone());
        let q = tape.leaf(random_tensor(vec![cfg.decoder_hidden, 1], &mut r, 0.0));
        let ctx = attend(&mut tape, &store, nid, q).unwrap();
        for c in 0..cfg.gcn_hidden {
            let mean: f64 = (0..5).map(|j| nodes.at2(c, j)).sum::<f64>() / 5.0;
            assert!((tape.value(ctx).at2(c, 0) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn attend_gradient_check_on_parameters() {
        let (cfg, v) = tiny_cfg(8);
        let mut store = decoder_store(&cfg, v, 5);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let nodes = random_tensor(vec![cfg.gcn_hidden, 4], &mut r, 0.0);
        let query = random_tensor(vec![cfg.decoder_hidden, 1], &mut r, 0.0);
        let probes: Vec<(String, usize)> = ["decoder.attn.wq", "decoder.attn.wk", "decoder.attn.v"]
            .iter()
            .flat_map(|n| (0..3).map(move |j| (n.to_string(), j)))
            .collect();
        crate::tensor::check_param_gradients(&mut store, &probes, 1e-5, 1e-4, |tape, store| {
            let nid = tape.leaf(nodes.clone());
            let q = tape.leaf(query.clone());
            let ctx = attend(tape, store, nid, q)?;
            Ok(tape.sum(ctx))
        })
        .unwrap();
    }

    #[test]
    fn topic_step_zero_params_gives_half_stop() {
        let (cfg, v) = tiny_cfg(8);
        let mut store = decoder_store(&cfg, v, 7);
        for name in ["decoder.stop.w", "decoder.stop.b"] {
            store
                .get_mut(name)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        let mut tape = Tape::new();
        let ctx = tape.leaf(Tensor::zeros(vec![cfg.gcn_hidden, 1]));
        let state = TopicState::zeros(&mut tape, cfg.decoder_hidden);
        let (_, stop_logit, _) = topic_step(&mut tape, &store, ctx, state).unwrap();
        assert_eq!(tape.value(stop_logit).item(), 0.0); // sigmoid(0) = 0.5
    }

    #[test]
    fn topic_step_deterministic() {
        let (cfg, v) = tiny_cfg(8);
        let store = decoder_store(&cfg, v, 8);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let ctx_val = random_tensor(vec![cfg.gcn_hidden, 1], &mut r, 0.0);
        let run = || {
            let mut tape = Tape::new();
            let ctx = tape.leaf(ctx_val.clone());
            let state = TopicState::zeros(&mut tape, cfg.decoder_hidden);
            let (topic, stop, _) = topic_step(&mut tape, &store, ctx, state).unwrap();
            (
                tape.value(topic).data().to_vec(),
                tape.value(stop).item(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn topic_two_chained_steps_gradient_check() {
        let (cfg, v) = tiny_cfg(8);
        let mut store = decoder_store(&cfg, v, 10);
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let c1 = random_tensor(vec![cfg.gcn_hidden, 1], &mut r, 0.0);
        let c2 = random_tensor(vec![cfg.gcn_hidden, 1], &mut r, 0.0);
        let probes: Vec<(String, usize)> = [
            "decoder.topic.i.w",
            "decoder.topic.f.u",
            "decoder.topic.g.b",
            "decoder.proj.w",
            "decoder.stop.w",
        ]
        .iter()
        .map(|n| (n.to_string(), 0))
        .collect();
        crate::tensor::check_param_gradients(&mut store, &probes, 1e-5, 1e-4, |tape, store| {
            let i1 = tape.leaf(c1.clone());
            let i2 = tape.leaf(c2.clone());
            let s0 = TopicState::zeros(tape, cfg.decoder_hidden);
            let (t1, stop1, s1) = topic_step(tape, store, i1, s0)?;
            let (t2, stop2, _) = topic_step(tape, store, i2, s1)?;
            let ts = tape.concat(&[t1, t2], 0)?;
            let ss = tape.concat(&[stop1, stop2], 0)?;
            let a = tape.sum(ts);
            let b = tape.sum(ss);
            tape.add(a, b)
        })
        .unwrap();
    }

    #[test]
    fn word_greedy_forced_terminator_gives_one_token() {
        let vocab = test_vocab(&["lung", "clear", "heart", "mild"]);
        let (cfg, _) = tiny_cfg(vocab.len());
        let mut store = decoder_store(&cfg, vocab.len(), 12);
        let term = vocab.index_of(SENT_END).unwrap();
        {
            let b = store.get_mut("decoder.out.b").unwrap();
            b.data_mut().iter_mut().for_each(|x| *x = 0.0);
            b.data_mut()[term] = 50.0;
        }
        let mut tape = Tape::new();
        let topic = tape.leaf(Tensor::zeros(vec![cfg.gcn_hidden, 1]));
        let toks = word_greedy(&mut tape, &store, topic, term, 30).unwrap();
        assert_eq!(toks, vec![term]);
    }

    #[test]
    fn word_teacher_logit_rows_match_gold_length() {
        let vocab = test_vocab(&["lung", "clear"]);
        let (cfg, _) = tiny_cfg(vocab.len());
        let store = decoder_store(&cfg, vocab.len(), 13);
        let gold = vocab.encode(&["lung".into(), "clear".into(), ".".into()]);
        let mut tape = Tape::new();
        let topic = tape.leaf(Tensor::zeros(vec![cfg.gcn_hidden, 1]));
        let logits = word_teacher(&mut tape, &store, topic, &gold).unwrap();
        assert_eq!(tape.value(logits).shape(), &[3, vocab.len()]);
    }

    #[test]
    fn word_greedy_matches_scalar_simulation() {
        let vocab = test_vocab(&["a", "b", "c", "d"]);
        let v = vocab.len();
        let (cfg, _) = tiny_cfg(v);
        let store = decoder_store(&cfg, v, 14);
        let mut r = ChaCha8Rng::seed_from_u64(15);
        let topic = random_tensor(vec![cfg.gcn_hidden, 1], &mut r, 0.0);
        let term = vocab.index_of(SENT_END).unwrap();

        let mut tape = Tape::new();
        let tid = tape.leaf(topic.clone());
        let got = word_greedy(&mut tape, &store, tid, term, 6).unwrap();

        // scalar simulation
        let h_dim = cfg.decoder_hidden;
        let get = |n: &str| store.get(n).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut h = vec![0.0; h_dim];
        let mut c = vec![0.0; h_dim];
        let mut prev = START;
        let mut sim = Vec::new();
        for _ in 0..6 {
            // input = [embedding(prev); topic]
            let emb = get("decoder.embedding");
            let mut x = Vec::with_capacity(cfg.embedding_dim + cfg.gcn_hidden);
            for e in 0..cfg.embedding_dim {
                x.push(emb.at2(prev, e));
            }
            for d in 0..cfg.gcn_hidden {
                x.push(topic.data()[d]);
            }
            let gate_pre = |g: &str, k: usize, h: &[f64]| {
                let w = get(&format!("decoder.word.{g}.w"));
                let u = get(&format!("decoder.word.{g}.u"));
                let b = get(&format!("decoder.word.{g}.b"));
                let mut acc = b.data()[k];
                for (j, xv) in x.iter().enumerate() {
                    acc += w.at2(k, j) * xv;
                }
                for (j, hv) in h.iter().enumerate() {
                    acc += u.at2(k, j) * hv;
                }
                acc
            };
            let mut h2 = vec![0.0; h_dim];
            let mut c2 = vec![0.0; h_dim];
            for k in 0..h_dim {
                let ig = sig(gate_pre("i", k, &h));
                let fg = sig(gate_pre("f", k, &h));
                let og = sig(gate_pre("o", k, &h));
                let gg = gate_pre("g", k, &h).tanh();
                c2[k] = fg * c[k] + ig * gg;
                h2[k] = og * c2[k].tanh();
            }
            h = h2;
            c = c2;
            let ow = get("decoder.out.w");
            let ob = get("decoder.out.b");
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for t in 0..v {
                let mut acc = ob.data()[t];
                for (j, hv) in h.iter().enumerate() {
                    acc += ow.at2(t, j) * hv;
                }
                if acc > best_v {
                    best_v = acc;
                    best = t;
                }
            }
            sim.push(best);
            if best == term {
                break;
            }
            prev = best;
        }
        assert_eq!(got, sim);
    }

    #[test]
    fn sequence_loss_perfect_predictions_approach_zero() {
        let v = 6;
        let mut tape = Tape::new();
        let gold = vec![vec![2usize, 4], vec![5usize]];
        let mut logit_ids = Vec::new();
        for sent in &gold {
            let mut data = vec![0.0; sent.len() * v];
            for (t, &tok) in sent.iter().enumerate() {
                data[t * v + tok] = 60.0;
            }
            logit_ids.push(tape.leaf(Tensor::new(vec![sent.len(), v], data).unwrap()));
        }
        let stops = vec![
            tape.leaf(Tensor::new(vec![1, 1], vec![-60.0]).unwrap()),
            tape.leaf(Tensor::new(vec![1, 1], vec![60.0]).unwrap()),
        ];
        let loss = sequence_loss(&mut tape, &logit_ids, &gold, &stops, 1.0).unwrap();
        assert!(tape.value(loss).item() < 1e-10);
    }

    #[test]
    fn sequence_loss_lambda_zero_is_pure_token_ce() {
        let v = 4;
        let mut tape = Tape::new();
        let gold = vec![vec![1usize, 2]];
        let logits = tape.leaf(Tensor::zeros(vec![2, v]));
        let stop = tape.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let with = sequence_loss(&mut tape, &[logits], &gold, &[stop], 0.0).unwrap();
        let expect = 2.0 * (v as f64).ln();
        assert!((tape.value(with).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn sequence_loss_hand_computed_two_sentences() {
        // sentence 1: 2 tokens, sentence 2: 1 token, V = 3, all logits zero
        // except a bump on the gold of the first token.
        let v = 3;
        let mut tape = Tape::new();
        let mut d1 = vec![0.0; 2 * v];
        d1[0 * v + 1] = 1.0; // bump gold token 1 at step 1
        let l1 = tape.leaf(Tensor::new(vec![2, v], d1).unwrap());
        let l2 = tape.leaf(Tensor::zeros(vec![1, v]));
        let gold = vec![vec![1usize, 0], vec![2usize]];
        let s1 = tape.leaf(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let s2 = tape.leaf(Tensor::new(vec![1, 1], vec![-0.25]).unwrap());
        let loss = sequence_loss(&mut tape, &[l1, l2], &gold, &[s1, s2], 1.0).unwrap();

        // scalar oracle
        let softmax_nll = |logits: &[f64], t: usize| {
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            -(logits[t].exp() / z).ln()
        };
        let tok = softmax_nll(&[0.0, 1.0, 0.0], 1)
            + softmax_nll(&[0.0, 0.0, 0.0], 0)
            + softmax_nll(&[0.0, 0.0, 0.0], 2);
        let sig = |x: f64| 1.0 / (1.0 + (-x as f64).exp());
        let stop = -(1.0 - sig(0.5)).ln() - sig(-0.25).ln();
        assert!((tape.value(loss).item() - (tok + stop)).abs() < 1e-12);
    }

    #[test]
    fn sequence_loss_rejects_count_mismatch() {
        let mut tape = Tape::new();
        let l1 = tape.leaf(Tensor::zeros(vec![1, 3]));
        let s1 = tape.leaf(Tensor::zeros(vec![1, 1]));
        let gold = vec![vec![0usize], vec![1usize]];
        assert!(sequence_loss(&mut tape, &[l1], &gold, &[s1], 1.0).is_err());
    }

    #[test]
    fn decoder_loss_gradient_check_sampled_params() {
        let vocab = test_vocab(&["a", "b", "c"]);
        let (cfg, _) = tiny_cfg(vocab.len());
        let mut store = decoder_store(&cfg, vocab.len(), 16);
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let nodes = random_tensor(vec![cfg.gcn_hidden, 4], &mut r, 0.0);
        let gold = vec![
            vocab.encode(&["a".into(), "b".into(), ".".into()]),
            vocab.encode(&["c".into(), ".".into()]),
        ];
        let probes = crate::tensor::probe_all_params(&store, 2);
        crate::tensor::check_param_gradients(&mut store, &probes, 1e-5, 1e-3, |tape, store| {
            let nid = tape.leaf(nodes.clone());
            decoder_loss(tape, store, &cfg, nid, &gold, 1.0, 7, 30)
        })
        .unwrap();
    }

    #[test]
    fn generate_stops_on_saturated_gate_and_respects_budget() {
        let vocab = test_vocab(&["a", "b"]);
        let (cfg, _) = tiny_cfg(vocab.len());
        let mut store = decoder_store(&cfg, vocab.len(), 18);
        store.get_mut("decoder.stop.b").unwrap().data_mut()[0] = 50.0;
        let mut r = ChaCha8Rng::seed_from_u64(19);
        let nodes = random_tensor(vec![cfg.gcn_hidden, 3], &mut r, 0.0);
        let rep = generate_report(&store, &cfg, &nodes, &vocab, 7, 0.5, 10).unwrap();
        assert_eq!(rep.sentences.len(), 1, "gate fires after first sentence");
        assert!(rep.stop_probs[0] > 0.99);

        let mut store2 = decoder_store(&cfg, vocab.len(), 18);
        store2.get_mut("decoder.stop.b").unwrap().data_mut()[0] = -50.0;
        let rep2 = generate_report(&store2, &cfg, &nodes, &vocab, 1, 0.5, 10).unwrap();
        assert_eq!(rep2.sentences.len(), 1, "budget of one sentence");
    }

    #[test]
    fn generate_is_deterministic() {
        let vocab = test_vocab(&["a", "b", "c"]);
        let (cfg, _) = tiny_cfg(vocab.len());
        let store = decoder_store(&cfg, vocab.len(), 20);
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let nodes = random_tensor(vec![cfg.gcn_hidden, 3], &mut r, 0.0);
        let a = generate_report(&store, &cfg, &nodes, &vocab, 4, 0.5, 8).unwrap();
        let b = generate_report(&store, &cfg, &nodes, &vocab, 4, 0.5, 8).unwrap();
        assert_eq!(a.sentences, b.sentences);
        assert_eq!(a.stop_probs, b.stop_probs);
    }

    #[test]
    fn generated_sentences_end_with_terminator_or_budget() {
        let vocab = test_vocab(&["a", "b", "c"]);
        let (cfg, _) = tiny_cfg(vocab.len());
        let store = decoder_store(&cfg, vocab.len(), 22);
        let mut r = ChaCha8Rng::seed_from_u64(23);
        let nodes = random_tensor(vec![cfg.gcn_hidden, 3], &mut r, 0.0);
        let max_len = 5;
        let rep = generate_report(&store, &cfg, &nodes, &vocab, 4, 0.5, max_len).unwrap();
        for s in &rep.sentences {
            assert!(s.last().map(String::as_str) == Some(SENT_END) || s.len() == max_len);
        }
        for p in &rep.stop_probs {
            assert!(*p > 0.0 && *p < 1.0);
        }
    }

    #[test]
    fn embeddings_full_file_loads_bit_equal() {
        let vocab = test_vocab(&["aa", "bb"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        let dim = 4;
        let mut lines = Vec::new();
        for i in 0..vocab.len() {
            let tok = vocab.token_at(i).unwrap();
            let vals: Vec<String> = (0..dim).map(|j| format!("{}", 0.25 * (i * dim + j) as f64)).collect();
            lines.push(format!("{tok} {}", vals.join(" ")));
        }
        std::fs::write(&path, lines.join("\n")).unwrap();
        let emb = load_embeddings(Some(&path), &vocab, dim, 7, false).unwrap();
        for i in 0..vocab.len() {
            for j in 0..dim {
                assert_eq!(emb.at2(i, j), 0.25 * (i * dim + j) as f64);
            }
        }
    }

    #[test]
    fn embeddings_empty_file_equals_forced_random() {
        let vocab = test_vocab(&["aa", "bb"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        std::fs::write(&path, "").unwrap();
        let from_empty = load_embeddings(Some(&path), &vocab, 8, 7, false).unwrap();
        let forced = load_embeddings(None, &vocab, 8, 7, true).unwrap();
        assert_eq!(from_empty, forced);
    }

    #[test]
    fn embeddings_partial_file_mixes_loaded_and_random() {
        let vocab = test_vocab(&["aa", "bb"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.txt");
        std::fs::write(&path, "aa 1.0 2.0 3.0").unwrap();
        let emb = load_embeddings(Some(&path), &vocab, 3, 7, false).unwrap();
        let row = vocab.index_of("aa").unwrap();
        assert_eq!(
            &emb.data()[row * 3..(row + 1) * 3],
            &[1.0, 2.0, 3.0]
        );
        let baseline = load_embeddings(None, &vocab, 3, 7, true).unwrap();
        let other = vocab.index_of("bb").unwrap();
        assert_eq!(
            &emb.data()[other * 3..(other + 1) * 3],
            &baseline.data()[other * 3..(other + 1) * 3]
        );
    }

    #[test]
    fn embeddings_reject_wrong_width() {
        let vocab = test_vocab(&["aa"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "aa 1.0 2.0").unwrap();
        assert!(load_embeddings(Some(&path), &vocab, 3, 7, false).is_err());
    }

    #[test]
    fn teacher_forced_loss_decreases_on_memorizable_pair() {
        let vocab = test_vocab(&["the", "lungs", "are", "clear"]);
        let (cfg, _) = tiny_cfg(vocab.len());
        let mut store = decoder_store(&cfg, vocab.len(), 24);
        let mut r = ChaCha8Rng::seed_from_u64(25);
        let nodes = random_tensor(vec![cfg.gcn_hidden, 3], &mut r, 0.0);
        let gold = vec![vocab.encode(&[
            "the".into(),
            "lungs".into(),
            "are".into(),
            "clear".into(),
            ".".into(),
        ])];
        let mut state = AdamState::new(&store);
        let adam = AdamConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut losses = Vec::new();
        for _ in 0..50 {
            store.zero_grads();
            let mut tape = Tape::new();
            let nid = tape.leaf(nodes.clone());
            let loss = decoder_loss(&mut tape, &store, &cfg, nid, &gold, 1.0, 7, 30).unwrap();
            losses.push(tape.value(loss).item());
            tape.backward(loss).unwrap();
            tape.scatter_grads(&mut store);
            adam_step(&mut store, &mut state, &adam);
        }
        assert!(losses[49] < losses[0], "loss must decrease overall");
        // no 5-step window with a net increase
        for w in losses.windows(5) {
            assert!(
                w[4] <= w[0] + 1e-9,
                "window with net increase: {:?}",
                w
            );
        }
    }
}
