//! Two-stage training orchestration: classify first, then freeze the
//! encoder and GCN and train the report decoder.

pub mod ablation;
pub mod config;
pub mod synth;

pub use config::{FeatureMode, TrainConfig};

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{auc, class_weights, classify};
use crate::corpus::{
    extract_labels, load_reports, preprocess, split_dataset, Report, TokenizedReport, Vocabulary,
};
use crate::decoder::{decoder_loss, generate_report, load_embeddings};
use crate::encoder::{add_gaussian_noise, FeatureMap};
use crate::error::{Error, Result};
use crate::gcn::normalize_adjacency;
use crate::kg::KnowledgeGraph;
use crate::metrics::evaluate;
use crate::model::{
    forward_nodes_batch, init_decoder_params, init_stage1_params, mark_bn_buffers, node_features,
    ModelConfig, Phase, ViewPair,
};
use crate::tensor::{adam_step, AdamConfig, AdamState, ParamStore, Tape, Tensor};
use crate::util::derive_seed;

/// One report ready for training: text, views, and its label vector.
#[derive(Clone)]
pub struct Sample {
    pub report: Report,
    pub tokenized: TokenizedReport,
    pub pair: ViewPair,
    pub labels: Vec<f64>,
}

/// The corpus split into train/val/test with its vocabulary, graph, and
/// normalized adjacency.
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub vocab: Vocabulary,
    pub graph: KnowledgeGraph,
    pub s: Tensor,
    pub model_cfg: ModelConfig,
    pub unmatched_labels: usize,
    pub skipped_records: usize,
}

const FROZEN_PREFIXES: [&str; 3] = ["encoder.", "gcn.", "classifier."];

fn resolve_ref(base: &Path, reference: &str) -> std::path::PathBuf {
    let p = Path::new(reference);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Load the corpus, graph, views, labels, and vocabulary described by the
/// config, applying training-image noise when `noise_sigma > 0`.
pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let loaded = load_reports(&cfg.corpus)?;
    if loaded.reports.is_empty() {
        return Err(Error::invalid("dataset: corpus has no usable reports"));
    }
    let graph = KnowledgeGraph::load(&cfg.graph)?;
    let primary = graph.primary_names();
    let base = cfg
        .corpus
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    let mut samples = Vec::with_capacity(loaded.reports.len());
    let mut unmatched = 0usize;
    for report in &loaded.reports {
        let tokenized = preprocess(report)?;
        let (labels, miss) = extract_labels(report, &primary);
        unmatched += miss.len();
        let frontal = FeatureMap::load(&resolve_ref(&base, &report.frontal_ref))?;
        let lateral = FeatureMap::load(&resolve_ref(&base, &report.lateral_ref))?;
        samples.push(Sample {
            report: report.clone(),
            tokenized,
            pair: ViewPair { frontal, lateral },
            labels,
        });
    }

    let feature_channels = match cfg.feature_mode {
        FeatureMode::Image => {
            for s in &samples {
                if s.pair.frontal.channels != 1 || s.pair.lateral.channels != 1 {
                    return Err(Error::invalid(format!(
                        "image mode expects C=1 views, report {:?} differs",
                        s.report.id
                    )));
                }
            }
            crate::encoder::CNN_CHANNELS[2]
        }
        FeatureMode::Precomputed => {
            let c = samples[0].pair.frontal.channels;
            for s in &samples {
                if s.pair.frontal.channels != c || s.pair.lateral.channels != c {
                    return Err(Error::invalid(
                        "precomputed mode: inconsistent feature channels",
                    ));
                }
            }
            c
        }
    };

    let vocab = Vocabulary::build(
        &samples.iter().map(|s| s.tokenized.clone()).collect::<Vec<_>>(),
        cfg.min_freq,
    )?;

    let (mut train, val, test) = split_dataset(
        &samples,
        (cfg.train_ratio, cfg.val_ratio, cfg.test_ratio),
        cfg.seed,
    )?;

    if cfg.noise_sigma > 0.0 {
        let noise_base = derive_seed(cfg.seed, 0x4E6F_6973);
        for (i, s) in train.iter_mut().enumerate() {
            s.pair.frontal = add_gaussian_noise(
                &s.pair.frontal,
                cfg.noise_sigma,
                derive_seed(noise_base, 2 * i as u64),
            )?;
            s.pair.lateral = add_gaussian_noise(
                &s.pair.lateral,
                cfg.noise_sigma,
                derive_seed(noise_base, 2 * i as u64 + 1),
            )?;
        }
    }

    let mut model_cfg = ModelConfig::reference(graph.n_findings(), graph.n_primary());
    model_cfg.feature_channels = feature_channels;
    model_cfg.use_cnn = cfg.feature_mode == FeatureMode::Image;
    model_cfg.gcn_hidden = cfg.gcn_hidden;
    model_cfg.n_gcn_layers = cfg.n_gcn_layers;
    model_cfg.gcn_variant = cfg.gcn_variant;
    model_cfg.decoder_hidden = cfg.decoder_hidden;
    model_cfg.attention_dim = cfg.attention_dim;
    model_cfg.embedding_dim = cfg.embedding_dim;

    let s = normalize_adjacency(&graph.adjacency())?;
    Ok(Dataset {
        train,
        val,
        test,
        vocab,
        graph,
        s,
        model_cfg,
        unmatched_labels: unmatched,
        skipped_records: loaded.skipped,
    })
}

/// One log line: `epoch,step,loss,auc` (the last column carries the
/// validation mean caption metric during stage 2).
#[derive(Clone, Debug)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub score: Option<f64>,
}

pub fn write_log_csv<W: Write>(w: &mut W, rows: &[TrainLogRow]) -> Result<()> {
    writeln!(w, "epoch,step,loss,auc")?;
    for r in rows {
        match r.score {
            Some(s) => writeln!(w, "{},{},{},{}", r.epoch, r.step, r.loss, s)?,
            None => writeln!(w, "{},{},{},", r.epoch, r.step, r.loss)?,
        }
    }
    Ok(())
}

/// Per-class evaluation row for the `node,auc,n_pos,n_neg` CSV.
#[derive(Clone, Debug)]
pub struct ClassAuc {
    pub node: String,
    pub auc: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn write_class_auc_csv<W: Write>(w: &mut W, rows: &[ClassAuc]) -> Result<()> {
    writeln!(w, "node,auc,n_pos,n_neg")?;
    for r in rows {
        match r.auc {
            Some(a) => writeln!(w, "{},{},{},{}", r.node, a, r.n_pos, r.n_neg)?,
            None => writeln!(w, "{},,{},{}", r.node, r.n_pos, r.n_neg)?,
        }
    }
    Ok(())
}

/// Classifier scores over a sample set (one eval-mode batched pass), then
/// per-class AUCs and their mean over the classes where AUC is defined.
pub fn evaluate_classifier(
    store: &mut ParamStore,
    ds: &Dataset,
    samples: &[Sample],
) -> Result<(Option<f64>, Vec<ClassAuc>)> {
    if samples.is_empty() {
        return Ok((None, Vec::new()));
    }
    let n_nodes = ds.model_cfg.n_nodes();
    let k = ds.model_cfg.n_primary;
    let mut tape = Tape::new();
    let pairs: Vec<&ViewPair> = samples.iter().map(|s| &s.pair).collect();
    let h = forward_nodes_batch(&mut tape, store, &ds.model_cfg, &ds.s, &pairs, Phase::Eval)?;
    let logits = classify(&mut tape, store, h, n_nodes)?;
    let values = tape.value(logits);
    let primary = ds.graph.primary_names();
    let mut rows = Vec::with_capacity(k);
    let mut defined = Vec::new();
    for c in 0..k {
        let scores: Vec<f64> = (0..samples.len()).map(|b| values.at2(c, b)).collect();
        let labels: Vec<f64> = samples.iter().map(|s| s.labels[c]).collect();
        let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
        let a = auc(&scores, &labels);
        if let Some(v) = a {
            defined.push(v);
        }
        rows.push(ClassAuc {
            node: primary[c].clone(),
            auc: a,
            n_pos,
            n_neg: samples.len() - n_pos,
        });
    }
    let mean = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok((mean, rows))
}

pub struct Stage1Output {
    pub store: ParamStore,
    pub log: Vec<TrainLogRow>,
    pub best_val_auc: Option<f64>,
    pub train_auc: Option<f64>,
    pub steps: usize,
}

/// Stage 1: train encoder + GCN + classifier with class-weighted BCE on the
/// primary nodes; keep the best-validation-AUC parameters.
pub fn train_stage1(ds: &Dataset, cfg: &TrainConfig) -> Result<Stage1Output> {
    if ds.train.is_empty() {
        return Err(Error::invalid("train_stage1: empty training split"));
    }
    if ds.train.iter().all(|s| s.labels.iter().all(|&y| y <= 0.5)) {
        return Err(Error::invalid(
            "train_stage1: corpus carries no positive labels",
        ));
    }
    let label_rows: Vec<Vec<f64>> = ds.train.iter().map(|s| s.labels.clone()).collect();
    let (w_pos, w_neg) = class_weights(&label_rows)?;

    let mut store = init_stage1_params(&ds.model_cfg, derive_seed(cfg.seed, 1));
    let mut state = AdamState::new(&store);
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };

    let k = ds.model_cfg.n_primary;
    let n_nodes = ds.model_cfg.n_nodes();
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut step = 0usize;
    let mut done = false;
    for epoch in 0..cfg.epochs {
        if done {
            break;
        }
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let pairs: Vec<&ViewPair> = chunk.iter().map(|&i| &ds.train[i].pair).collect();
            let mut labels = vec![0.0; k * chunk.len()];
            for (b, &i) in chunk.iter().enumerate() {
                for c in 0..k {
                    labels[c * chunk.len() + b] = ds.train[i].labels[c];
                }
            }
            let mut tape = Tape::new();
            let h =
                forward_nodes_batch(&mut tape, &mut store, &ds.model_cfg, &ds.s, &pairs, Phase::Train)?;
            let logits = classify(&mut tape, &store, h, n_nodes)?;
            let loss = tape.weighted_bce(logits, &labels, &w_pos, &w_neg)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "stage 1 loss is {loss_val} at epoch {epoch}, step {step}"
                )));
            }
            store.zero_grads();
            tape.backward(loss)?;
            tape.scatter_grads(&mut store);
            adam_step(&mut store, &mut state, &adam);
            epoch_loss += loss_val;
            batches += 1;
            step += 1;
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                done = true;
                break;
            }
        }
        let (val_auc, _) = evaluate_classifier(&mut store, ds, &ds.val)?;
        let score = match val_auc {
            Some(v) => Some(v),
            None => evaluate_classifier(&mut store, ds, &ds.train)?.0,
        };
        if let Some(v) = score {
            let better = match &best {
                Some((b, _)) => v > *b,
                None => true,
            };
            if better {
                best = Some((v, store.clone()));
            }
        }
        log.push(TrainLogRow {
            epoch,
            step,
            loss: if batches > 0 { epoch_loss / batches as f64 } else { 0.0 },
            score,
        });
    }
    let (best_val_auc, mut final_store) = match best {
        Some((v, s)) => (Some(v), s),
        None => (None, store),
    };
    let train_auc = evaluate_classifier(&mut final_store, ds, &ds.train)?.0;
    Ok(Stage1Output {
        store: final_store,
        log,
        best_val_auc,
        train_auc,
        steps: step,
    })
}

/// Load a stage-1 checkpoint and restore buffer flags.
pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::load(path)?;
    mark_bn_buffers(&mut store);
    Ok(store)
}

pub struct Stage2Output {
    pub store: ParamStore,
    pub log: Vec<TrainLogRow>,
    pub best_val_mean: Option<f64>,
    pub frozen_hash_before: [u64; 3],
    pub frozen_hash_after: [u64; 3],
    pub steps: usize,
}

fn frozen_hashes(store: &ParamStore) -> [u64; 3] {
    [
        store.hash_prefix(FROZEN_PREFIXES[0]),
        store.hash_prefix(FROZEN_PREFIXES[1]),
        store.hash_prefix(FROZEN_PREFIXES[2]),
    ]
}

/// Teacher-forced gold sentences, encoded (out-of-vocabulary tokens map to
/// UNK, mirroring how references are normalized for evaluation).
fn gold_sentences(sample: &Sample, vocab: &Vocabulary) -> Vec<Vec<usize>> {
    sample
        .tokenized
        .sentences
        .iter()
        .map(|s| vocab.encode(s))
        .collect()
}

/// Stage 2: freeze encoder, GCN, and classifier, then train the decoder on
/// teacher-forced reports against precomputed (frozen) node features.
pub fn train_stage2(
    ds: &Dataset,
    cfg: &TrainConfig,
    stage1_store: &ParamStore,
) -> Result<Stage2Output> {
    let mut store = stage1_store.clone();
    mark_bn_buffers(&mut store);
    for p in FROZEN_PREFIXES {
        store.freeze_prefix(p);
    }
    let frozen_hash_before = frozen_hashes(&store);

    let emb = load_embeddings(
        cfg.embeddings.as_deref(),
        &ds.vocab,
        ds.model_cfg.embedding_dim,
        derive_seed(cfg.seed, 2),
        cfg.random_embeddings,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    init_decoder_params(&mut store, &ds.model_cfg, emb, &mut rng)?;

    // frozen modules: node features are constant across epochs
    let mut features = Vec::with_capacity(ds.train.len());
    for s in &ds.train {
        features.push(node_features(&mut store, &ds.model_cfg, &ds.s, &s.pair)?);
    }
    let gold: Vec<Vec<Vec<usize>>> = ds
        .train
        .iter()
        .map(|s| gold_sentences(s, &ds.vocab))
        .collect();

    let mut state = AdamState::new(&store);
    let adam = AdamConfig {
        lr: cfg.stage2_lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };

    let mut log = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut step = 0usize;
    let mut done = false;
    for epoch in 0..cfg.stage2_epochs {
        if done {
            break;
        }
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        let mut erng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2000 + epoch as u64));
        order.shuffle(&mut erng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            store.zero_grads();
            let mut chunk_loss = 0.0;
            for &i in chunk {
                let mut tape = Tape::new();
                let nodes = tape.leaf(features[i].clone());
                let loss = decoder_loss(
                    &mut tape,
                    &store,
                    &ds.model_cfg,
                    nodes,
                    &gold[i],
                    cfg.lambda_stop,
                    cfg.max_sentences,
                    cfg.max_sentence_len,
                )?;
                let loss_val = tape.value(loss).item();
                if !loss_val.is_finite() {
                    return Err(Error::Numeric(format!(
                        "stage 2 loss is {loss_val} at epoch {epoch}, step {step}, report {:?}",
                        ds.train[i].report.id
                    )));
                }
                chunk_loss += loss_val;
                tape.backward(loss)?;
                tape.scatter_grads(&mut store);
            }
            store.scale_grads(1.0 / chunk.len() as f64);
            adam_step(&mut store, &mut state, &adam);
            epoch_loss += chunk_loss / chunk.len() as f64;
            batches += 1;
            step += 1;
            if cfg.stage2_max_steps > 0 && step >= cfg.stage2_max_steps {
                done = true;
                break;
            }
        }
        let last_epoch = done || epoch + 1 == cfg.stage2_epochs;
        let score = if (epoch + 1) % cfg.stage2_eval_every == 0 || last_epoch {
            validation_mean(&mut store, ds, cfg)?
        } else {
            None
        };
        if let Some(v) = score {
            let better = match &best {
                Some((b, _)) => v > *b,
                None => true,
            };
            if better {
                best = Some((v, store.clone()));
            }
        }
        log.push(TrainLogRow {
            epoch,
            step,
            loss: if batches > 0 { epoch_loss / batches as f64 } else { 0.0 },
            score,
        });
    }
    let (best_val_mean, final_store) = match best {
        Some((v, s)) => (Some(v), s),
        None => (None, store),
    };
    let frozen_hash_after = frozen_hashes(&final_store);
    if frozen_hash_before != frozen_hash_after {
        return Err(Error::invalid(
            "stage 2 freeze contract violated: frozen parameters changed",
        ));
    }
    Ok(Stage2Output {
        store: final_store,
        log,
        best_val_mean,
        frozen_hash_before,
        frozen_hash_after,
        steps: step,
    })
}

/// Mean caption metric over the validation split (needs at least two
/// validation reports for CIDEr's IDF).
fn validation_mean(
    store: &mut ParamStore,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    if ds.val.len() < 2 {
        return Ok(None);
    }
    let hyps = generate_split(store, ds, &ds.val, cfg)?;
    let refs = reference_texts(&ds.val, &ds.vocab);
    let hyp_records: Vec<(String, String)> =
        hyps.into_iter().map(|(id, text, _)| (id, text)).collect();
    let pairs = crate::metrics::align(&hyp_records, &refs)?;
    Ok(Some(evaluate(&pairs)?.mean))
}

/// Greedy generation over a sample set: `(id, text, stop_probs)` per report.
pub fn generate_split(
    store: &mut ParamStore,
    ds: &Dataset,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<Vec<(String, String, Vec<f64>)>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let nodes = node_features(store, &ds.model_cfg, &ds.s, &s.pair)?;
        let rep = generate_report(
            store,
            &ds.model_cfg,
            &nodes,
            &ds.vocab,
            cfg.max_sentences,
            cfg.stop_threshold,
            cfg.max_sentence_len,
        )?;
        out.push((s.report.id.clone(), rep.text(), rep.stop_probs));
    }
    Ok(out)
}

/// Reference texts with out-of-vocabulary tokens replaced by the UNK
/// surface form, matching the decoder's reachable vocabulary.
pub fn reference_texts(samples: &[Sample], vocab: &Vocabulary) -> Vec<(String, String)> {
    samples
        .iter()
        .map(|s| {
            let norm = vocab
                .decode(&vocab.encode(&s.tokenized.flat_tokens))
                .expect("indices from encode are in range");
            (s.report.id.clone(), norm.join(" "))
        })
        .collect()
}

/// Evaluate generated text for a split against UNK-normalized references.
pub fn evaluate_split(
    store: &mut ParamStore,
    ds: &Dataset,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<crate::metrics::EvalResult> {
    let hyps = generate_split(store, ds, samples, cfg)?;
    let refs = reference_texts(samples, &ds.vocab);
    let hyp_records: Vec<(String, String)> =
        hyps.into_iter().map(|(id, text, _)| (id, text)).collect();
    let pairs = crate::metrics::align(&hyp_records, &refs)?;
    evaluate(&pairs)
}

/// Reference sentence counts keyed by report id (complexity analysis input).
pub fn sentence_counts(samples: &[Sample]) -> HashMap<String, usize> {
    samples
        .iter()
        .map(|s| (s.report.id.clone(), s.tokenized.sentences.len()))
        .collect()
}
