//! Comparison harnesses: the five ablation variants, the image-noise sweep,
//! and the retrain-per-replicate bootstrap.

use std::io::Write;
use std::path::PathBuf;

use super::{
    evaluate_classifier, evaluate_split, load_dataset, train_stage1, train_stage2, Dataset,
    Sample, TrainConfig,
};
use crate::error::{Error, Result};
use crate::gcn::GcnVariant;
use crate::kg::{build_graph_from_corpus, default_lexicon, default_manual_graph, mine};
use crate::metrics::{replicate_indices, summarize_bootstrap, BootstrapResult, EvalSummary};
use crate::util::derive_seed;

/// The comparison conditions. `Nodes*` counts are finding nodes (primary +
/// auxiliary, excluding the Global hub).
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    RandomEmbs,
    GcnZhang,
    Nodes20,
    Nodes40,
    Nodes60,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::RandomEmbs,
        AblationVariant::GcnZhang,
        AblationVariant::Nodes20,
        AblationVariant::Nodes40,
        AblationVariant::Nodes60,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::RandomEmbs => "random-embs",
            AblationVariant::GcnZhang => "gcn-zhang",
            AblationVariant::Nodes20 => "nodes-20",
            AblationVariant::Nodes40 => "nodes-40",
            AblationVariant::Nodes60 => "nodes-60",
        }
    }

    /// Auxiliary-node budget for the graph-size variants.
    fn aux_q(&self) -> Option<usize> {
        match self {
            AblationVariant::Nodes20 => Some(0),
            AblationVariant::Nodes40 => Some(20),
            AblationVariant::Nodes60 => Some(40),
            _ => None,
        }
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub finding_nodes: usize,
    pub auc: Option<f64>,
    pub metrics: EvalSummary,
}

pub fn write_ablation_csv<W: Write>(w: &mut W, rows: &[AblationRow]) -> Result<()> {
    writeln!(
        w,
        "variant,finding_nodes,auc,bleu1,bleu2,bleu3,bleu4,rougeL,cider,mean"
    )?;
    for r in rows {
        let auc = r.auc.map(|a| a.to_string()).unwrap_or_default();
        let m = &r.metrics;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.finding_nodes,
            auc,
            m.bleu1,
            m.bleu2,
            m.bleu3,
            m.bleu4,
            m.rouge_l,
            m.cider,
            m.mean
        )?;
    }
    Ok(())
}

/// Rebuild the knowledge graph for a node-count variant from the corpus in
/// the config, writing it next to the other run outputs.
fn rebuild_graph(cfg: &TrainConfig, q: usize, tag: &str) -> Result<PathBuf> {
    let loaded = crate::corpus::load_reports(&cfg.corpus)?;
    let lexicon = match &cfg.lexicon {
        Some(p) => mine::load_lexicon(p)?,
        None => default_lexicon(),
    };
    let manual = default_manual_graph();
    let (graph, stats) = build_graph_from_corpus(&loaded.reports, lexicon, &manual, q, None)?;
    if stats.selected.len() < q {
        return Err(Error::invalid(format!(
            "graph rebuild for {tag}: only {} auxiliary candidates for q={q}",
            stats.selected.len()
        )));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("graph-{tag}.txt"));
    graph.save(&path)?;
    Ok(path)
}

/// Full two-stage run for one configuration; returns test AUC and test
/// caption metrics.
fn run_condition(cfg: &TrainConfig) -> Result<(Dataset, Option<f64>, EvalSummary)> {
    let ds = load_dataset(cfg)?;
    let stage1 = train_stage1(&ds, cfg)?;
    let stage2 = train_stage2(&ds, cfg, &stage1.store)?;
    let mut store = stage2.store;
    let eval_samples: &[Sample] = if ds.test.len() >= 2 { &ds.test } else { &ds.train };
    let (auc, _) = evaluate_classifier(&mut store, &ds, eval_samples)?;
    let metrics = evaluate_split(&mut store, &ds, eval_samples, cfg)?.summary();
    Ok((ds, auc, metrics))
}

/// Run the baseline plus the requested variants and collect one row each.
pub fn run_ablation(cfg: &TrainConfig, variants: &[AblationVariant]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len() + 1);
    let (ds, auc, metrics) = run_condition(cfg)?;
    rows.push(AblationRow {
        variant: "baseline".into(),
        finding_nodes: ds.graph.n_findings(),
        auc,
        metrics,
    });
    for v in variants {
        let mut vcfg = cfg.clone();
        match v {
            AblationVariant::RandomEmbs => vcfg.random_embeddings = true,
            AblationVariant::GcnZhang => vcfg.gcn_variant = GcnVariant::MessageOnly,
            _ => {
                let q = v.aux_q().expect("node-count variant");
                vcfg.graph = rebuild_graph(cfg, q, v.name())?;
            }
        }
        let (vds, vauc, vmetrics) = run_condition(&vcfg)?;
        rows.push(AblationRow {
            variant: v.name().into(),
            finding_nodes: vds.graph.n_findings(),
            auc: vauc,
            metrics: vmetrics,
        });
    }
    Ok(rows)
}

/// Reference values reported at full scale; carried in the CSV as
/// documentation fields, never asserted at desk scale.
pub const NOISE_REFERENCE_AUC: &str = "0.786->0.683";
pub const NOISE_REFERENCE_MEAN: &str = "0.308->0.282";

#[derive(Clone, Debug)]
pub struct NoiseRow {
    pub sigma: f64,
    pub auc: Option<f64>,
    pub metrics: Option<EvalSummary>,
    /// Content hash of the stage-1 checkpoint, for bit-identity checks.
    pub ckpt_hash: u64,
}

pub fn write_noise_csv<W: Write>(w: &mut W, rows: &[NoiseRow]) -> Result<()> {
    writeln!(
        w,
        "sigma,auc,bleu1,bleu2,bleu3,bleu4,rougeL,cider,mean,paper_ref_auc,paper_ref_mean"
    )?;
    for r in rows {
        let auc = r.auc.map(|a| a.to_string()).unwrap_or_default();
        let m = match &r.metrics {
            Some(m) => format!(
                "{},{},{},{},{},{},{}",
                m.bleu1, m.bleu2, m.bleu3, m.bleu4, m.rouge_l, m.cider, m.mean
            ),
            None => ",,,,,,".to_string(),
        };
        writeln!(
            w,
            "{},{},{},{},{}",
            r.sigma, auc, m, NOISE_REFERENCE_AUC, NOISE_REFERENCE_MEAN
        )?;
    }
    Ok(())
}

/// Retrain stage 1 per noise level (optionally stage 2 with caption
/// metrics). Sigma 0 reproduces the clean baseline bit for bit.
pub fn run_noise_sweep(
    cfg: &TrainConfig,
    sigmas: &[f64],
    with_generation: bool,
) -> Result<Vec<NoiseRow>> {
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut scfg = cfg.clone();
        scfg.noise_sigma = sigma;
        let ds = load_dataset(&scfg)?;
        let stage1 = train_stage1(&ds, &scfg)?;
        let mut store = stage1.store;
        let eval_samples: &[Sample] = if ds.test.len() >= 2 { &ds.test } else { &ds.train };
        let (auc, _) = evaluate_classifier(&mut store, &ds, eval_samples)?;
        let ckpt_hash = store.hash_prefix("");
        let metrics = if with_generation {
            let stage2 = train_stage2(&ds, &scfg, &store)?;
            let mut full = stage2.store;
            Some(evaluate_split(&mut full, &ds, eval_samples, &scfg)?.summary())
        } else {
            None
        };
        rows.push(NoiseRow {
            sigma,
            auc,
            metrics,
            ckpt_hash,
        });
    }
    Ok(rows)
}

/// One bootstrap replicate: retrain both stages on a resampled training
/// multiset, evaluate on the fixed test split.
fn bootstrap_replicate(
    ds: &Dataset,
    cfg: &TrainConfig,
    replicate: usize,
) -> Result<Vec<(String, f64)>> {
    let indices = replicate_indices(cfg.seed, replicate, ds.train.len());
    let resampled: Vec<Sample> = indices.iter().map(|&i| ds.train[i].clone()).collect();
    let rds = Dataset {
        train: resampled,
        val: ds.val.clone(),
        test: ds.test.clone(),
        vocab: ds.vocab.clone(),
        graph: ds.graph.clone(),
        s: ds.s.clone(),
        model_cfg: ds.model_cfg.clone(),
        unmatched_labels: ds.unmatched_labels,
        skipped_records: ds.skipped_records,
    };
    let mut rcfg = cfg.clone();
    rcfg.seed = derive_seed(cfg.seed, 5000 + replicate as u64);
    let stage1 = train_stage1(&rds, &rcfg)?;
    let stage2 = train_stage2(&rds, &rcfg, &stage1.store)?;
    let mut store = stage2.store;
    let result = evaluate_split(&mut store, &rds, &ds.test, &rcfg)?;
    Ok(result
        .headline()
        .into_iter()
        .map(|(n, v)| (n.to_string(), v))
        .collect())
}

/// Resample-retrain-evaluate bootstrap over the full pipeline. Replicates
/// fan out over `cfg.threads` workers; the merge is by replicate index, so
/// the result does not depend on the thread count.
pub fn pipeline_bootstrap(cfg: &TrainConfig, b: usize, conf: f64) -> Result<BootstrapResult> {
    if b < 2 {
        return Err(Error::invalid("bootstrap: needs at least 2 replicates"));
    }
    if ds_needs_two_test(cfg)? {
        return Err(Error::invalid(
            "bootstrap: test split needs at least 2 reports",
        ));
    }
    let ds = load_dataset(cfg)?;
    let threads = cfg.threads.max(1).min(b);
    let mut results: Vec<Option<Result<Vec<(String, f64)>>>> = (0..b).map(|_| None).collect();
    if threads <= 1 {
        for (r, slot) in results.iter_mut().enumerate() {
            *slot = Some(bootstrap_replicate(&ds, cfg, r));
        }
    } else {
        let ds_ref = &ds;
        let chunks: Vec<Vec<usize>> = (0..threads)
            .map(|t| (0..b).filter(|r| r % threads == t).collect())
            .collect();
        let mut outputs: Vec<(usize, Result<Vec<(String, f64)>>)> = Vec::with_capacity(b);
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .into_iter()
                            .map(|r| (r, bootstrap_replicate(ds_ref, cfg, r)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                outputs.extend(h.join().expect("bootstrap worker panicked"));
            }
        });
        for (r, res) in outputs {
            results[r] = Some(res);
        }
    }

    let mut names: Vec<String> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for (r, slot) in results.into_iter().enumerate() {
        let metrics = slot.expect("replicate scheduled")?;
        if r == 0 {
            names = metrics.iter().map(|(n, _)| n.clone()).collect();
            values = vec![Vec::with_capacity(b); names.len()];
        }
        for (k, (_, v)) in metrics.into_iter().enumerate() {
            values[k].push(v);
        }
    }
    Ok(summarize_bootstrap(&names, &values, conf))
}

fn ds_needs_two_test(cfg: &TrainConfig) -> Result<bool> {
    // cheap pre-check on split sizes without loading feature maps
    let loaded = crate::corpus::load_reports(&cfg.corpus)?;
    let n = loaded.reports.len();
    let n_train = (n as f64 * cfg.train_ratio).floor() as usize;
    let n_val = (n as f64 * cfg.val_ratio).floor() as usize;
    Ok(n - n_train - n_val < 2)
}
