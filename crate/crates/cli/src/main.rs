//! Command-line entry point for the report generation pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure (NaN/Inf during training or evaluation).

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rrgen_core::corpus::load_reports;
use rrgen_core::error::Error;
use rrgen_core::kg::{
    build_graph_from_corpus, default_lexicon, default_manual_graph, mine, KnowledgeGraph,
};
use rrgen_core::metrics::{
    align, complexity_table, evaluate, load_text_records, save_text_records, write_bootstrap_csv,
    write_complexity_csv, write_eval_csv,
};
use rrgen_core::training::ablation::{
    pipeline_bootstrap, run_ablation, run_noise_sweep, write_ablation_csv, write_noise_csv,
    AblationVariant,
};
use rrgen_core::training::synth::{synth_corpus, write_synth_corpus};
use rrgen_core::training::{
    evaluate_classifier, generate_split, load_checkpoint, load_dataset, reference_texts,
    train_stage1, train_stage2, write_class_auc_csv, write_log_csv, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "rrgen",
    version,
    about = "Knowledge-graph enhanced radiology report generation pipeline"
)]
struct Cli {
    /// Run configuration file (key=value lines)
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed override for every random choice in the command
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for fan-out commands (bootstrap)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory override
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine the corpus and assemble the prior knowledge graph
    KgBuild(KgBuildArgs),
    /// Print node/edge statistics for a graph file
    KgStats {
        #[arg(long)]
        graph: PathBuf,
    },
    /// Generate a synthetic desk-scale corpus with rendered views
    Synth {
        /// Number of report/image pairs
        #[arg(long, default_value_t = 20)]
        pairs: usize,
        /// Manual graph supplying the primary finding names
        #[arg(long)]
        manual: Option<PathBuf>,
    },
    /// Stage 1: train encoder + GCN + multi-label classifier
    TrainClassify,
    /// Stage 2: freeze stage 1 and train the report decoder
    TrainGenerate {
        /// Stage-1 checkpoint (default: <out_dir>/stage1.ckpt)
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Greedy-decode reports for one split with a trained checkpoint
    Generate {
        /// Stage-2 checkpoint (default: <out_dir>/stage2.ckpt)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score hypothesis reports against references
    Evaluate(EvaluateArgs),
    /// Resample-retrain-evaluate bootstrap with t-based confidence intervals
    Bootstrap {
        #[arg(long, default_value_t = 15)]
        replicates: usize,
        #[arg(long, default_value_t = 0.95)]
        conf: f64,
    },
    /// Run comparison variants (graph size, embeddings, propagation rule)
    Ablate {
        /// Variant names, or "all": random-embs|gcn-zhang|nodes-20|nodes-40|nodes-60
        #[arg(long, default_value = "all")]
        variant: String,
    },
    /// Retrain under Gaussian image noise and tabulate the degradation
    Noise {
        /// Comma-separated noise standard deviations
        #[arg(long, default_value = "0,1,2")]
        sigmas: String,
        /// Also train stage 2 and report caption metrics per sigma
        #[arg(long)]
        with_generation: bool,
    },
    /// Sentence-count versus BLEU-1 complexity table
    Complexity(EvaluateArgs),
}

#[derive(Args)]
struct KgBuildArgs {
    /// Report corpus (line-delimited JSON records)
    #[arg(long)]
    corpus: PathBuf,
    /// Concept lexicon (name<TAB>category); built-in default when omitted
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Manual sub-graph file; built-in 20-finding default when omitted
    #[arg(long)]
    manual: Option<PathBuf>,
    /// Auxiliary concepts to mine
    #[arg(long, default_value_t = 10)]
    q: usize,
    /// Co-occurrence binarization threshold; defaults to
    /// max(2, ceil(0.01 * documents))
    #[arg(long)]
    tau: Option<u64>,
    /// Output graph file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Hypothesis records {id, text}, line-delimited JSON
    #[arg(long)]
    hyp: PathBuf,
    /// Reference records {id, text}, line-delimited JSON
    #[arg(long = "ref")]
    reference: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numeric(_) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<TrainConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => return Err(Error::Config("this command needs --config <FILE>".into())),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::KgBuild(args) => kg_build(args),
        Command::KgStats { graph } => kg_stats(graph),
        Command::Synth { pairs, manual } => {
            let out_dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("synth"));
            let seed = cli.seed.unwrap_or(0);
            synth(seed, *pairs, manual.as_deref(), &out_dir)
        }
        Command::TrainClassify => train_classify(&load_config(&cli)?),
        Command::TrainGenerate { stage1 } => {
            let cfg = load_config(&cli)?;
            let stage1 = stage1
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join("stage1.ckpt"));
            train_generate(&cfg, &stage1)
        }
        Command::Generate { checkpoint, split } => {
            let cfg = load_config(&cli)?;
            let ckpt = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join("stage2.ckpt"));
            generate(&cfg, &ckpt, split)
        }
        Command::Evaluate(args) => evaluate_cmd(args, cli.out_dir.as_deref()),
        Command::Bootstrap { replicates, conf } => {
            let cfg = load_config(&cli)?;
            bootstrap_cmd(&cfg, *replicates, *conf)
        }
        Command::Ablate { variant } => {
            let cfg = load_config(&cli)?;
            ablate(&cfg, variant)
        }
        Command::Noise {
            sigmas,
            with_generation,
        } => {
            let cfg = load_config(&cli)?;
            noise(&cfg, sigmas, *with_generation)
        }
        Command::Complexity(args) => complexity(args, cli.out_dir.as_deref()),
    }
}

fn kg_build(args: &KgBuildArgs) -> Result<(), Error> {
    let loaded = load_reports(&args.corpus)?;
    if loaded.skipped > 0 {
        eprintln!("skipped {} incomplete records", loaded.skipped);
    }
    let lexicon = match &args.lexicon {
        Some(p) => mine::load_lexicon(p)?,
        None => default_lexicon(),
    };
    let manual = match &args.manual {
        Some(p) => KnowledgeGraph::load(p)?,
        None => default_manual_graph(),
    };
    let (graph, stats) =
        build_graph_from_corpus(&loaded.reports, lexicon, &manual, args.q, args.tau)?;
    if stats.selected.len() < args.q {
        eprintln!(
            "warning: only {} auxiliary candidates available for q={}",
            stats.selected.len(),
            args.q
        );
    }
    graph.save(&args.out)?;
    println!(
        "graph: {} nodes ({} primary, {} auxiliary), {} edges -> {}",
        graph.n_nodes(),
        graph.n_primary(),
        graph.n_auxiliary(),
        graph.n_edges(),
        args.out.display()
    );
    println!(
        "mined over {} documents, tau {}, {} co-occurrence edges kept",
        stats.doc_count, stats.tau, stats.mined_edges
    );
    for (name, freq) in &stats.selected {
        println!("  aux {name} (df {freq})");
    }
    Ok(())
}

fn kg_stats(path: &PathBuf) -> Result<(), Error> {
    let graph = KnowledgeGraph::load(path)?;
    println!("nodes: {}", graph.n_nodes());
    println!("  global: 1");
    println!("  primary findings: {}", graph.n_primary());
    println!("  auxiliary findings: {}", graph.n_auxiliary());
    println!("edges: {}", graph.n_edges());
    let degrees: Vec<usize> = (0..graph.n_nodes()).map(|i| graph.degree(i)).collect();
    let max = degrees.iter().max().copied().unwrap_or(0);
    let min = degrees.iter().min().copied().unwrap_or(0);
    let mean = degrees.iter().sum::<usize>() as f64 / degrees.len() as f64;
    println!("degree: min {min}, mean {mean:.2}, max {max}");
    Ok(())
}

fn synth(
    seed: u64,
    pairs: usize,
    manual: Option<&std::path::Path>,
    out_dir: &PathBuf,
) -> Result<(), Error> {
    let graph = match manual {
        Some(p) => KnowledgeGraph::load(p)?,
        None => default_manual_graph(),
    };
    let cases = synth_corpus(seed, pairs, &graph)?;
    write_synth_corpus(out_dir, &cases)?;
    println!(
        "wrote {} reports and {} images under {}",
        cases.len(),
        2 * cases.len(),
        out_dir.display()
    );
    Ok(())
}

fn train_classify(cfg: &TrainConfig) -> Result<(), Error> {
    let ds = load_dataset(cfg)?;
    if ds.skipped_records > 0 {
        eprintln!("skipped {} incomplete records", ds.skipped_records);
    }
    if ds.unmatched_labels > 0 {
        eprintln!(
            "warning: {} label strings matched no primary node",
            ds.unmatched_labels
        );
    }
    let out = train_stage1(&ds, cfg)?;
    let mut store = out.store;
    store.save(&cfg.out_dir.join("stage1.ckpt"))?;
    let mut log = std::fs::File::create(cfg.out_dir.join("stage1_log.csv"))?;
    write_log_csv(&mut log, &out.log)?;
    for (name, samples) in [("val", &ds.val), ("test", &ds.test)] {
        if samples.is_empty() {
            continue;
        }
        let (mean, rows) = evaluate_classifier(&mut store, &ds, samples)?;
        let mut f = std::fs::File::create(cfg.out_dir.join(format!("stage1_auc_{name}.csv")))?;
        write_class_auc_csv(&mut f, &rows)?;
        println!(
            "{name} mean AUC: {}",
            mean.map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "undefined".into())
        );
    }
    println!(
        "stage 1 done: {} steps, best validation AUC {}",
        out.steps,
        out.best_val_auc
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "undefined".into())
    );
    println!("checkpoint: {}", cfg.out_dir.join("stage1.ckpt").display());
    Ok(())
}

fn train_generate(cfg: &TrainConfig, stage1: &PathBuf) -> Result<(), Error> {
    let ds = load_dataset(cfg)?;
    let stage1_store = load_checkpoint(stage1)?;
    let out = train_stage2(&ds, cfg, &stage1_store)?;
    out.store.save(&cfg.out_dir.join("stage2.ckpt"))?;
    ds.vocab.save(&cfg.out_dir.join("vocab.tsv"))?;
    let mut log = std::fs::File::create(cfg.out_dir.join("stage2_log.csv"))?;
    write_log_csv(&mut log, &out.log)?;
    println!(
        "stage 2 done: {} steps, best validation mean {}",
        out.steps,
        out.best_val_mean
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "not evaluated".into())
    );
    println!(
        "frozen parameters unchanged: {}",
        out.frozen_hash_before == out.frozen_hash_after
    );
    println!("checkpoint: {}", cfg.out_dir.join("stage2.ckpt").display());
    Ok(())
}

fn generate(cfg: &TrainConfig, checkpoint: &PathBuf, split: &str) -> Result<(), Error> {
    let ds = load_dataset(cfg)?;
    let mut store = load_checkpoint(checkpoint)?;
    let samples = match split {
        "train" => &ds.train,
        "val" => &ds.val,
        "test" => &ds.test,
        other => {
            return Err(Error::invalid(format!(
                "unknown split {other:?} (train|val|test)"
            )))
        }
    };
    let generated = generate_split(&mut store, &ds, samples, cfg)?;
    let path = cfg.out_dir.join(format!("generated_{split}.jsonl"));
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    for (id, text, stop_probs) in &generated {
        let record = serde_json::json!({
            "id": id,
            "text": text,
            "stop_probs": stop_probs,
        });
        writeln!(f, "{record}").map_err(Error::Io)?;
    }
    f.flush()?;
    let refs = reference_texts(samples, &ds.vocab);
    save_text_records(&cfg.out_dir.join(format!("references_{split}.jsonl")), &refs)?;
    println!("wrote {} reports to {}", generated.len(), path.display());
    Ok(())
}

fn evaluate_cmd(args: &EvaluateArgs, out_dir: Option<&std::path::Path>) -> Result<(), Error> {
    let hyps = load_text_records(&args.hyp)?;
    let refs = load_text_records(&args.reference)?;
    let pairs = align(&hyps, &refs)?;
    let result = evaluate(&pairs)?;
    for (name, value) in result.headline() {
        println!("{name}: {value:.6}");
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut csv = std::fs::File::create(dir.join("eval.csv"))?;
        write_eval_csv(&mut csv, &result)?;
        let json = serde_json::to_string_pretty(&result.summary())
            .map_err(|e| Error::format(e.to_string()))?;
        std::fs::write(dir.join("eval.json"), json)?;
        let mut per = std::fs::File::create(dir.join("per_report.csv"))?;
        writeln!(per, "id,bleu1").map_err(Error::Io)?;
        for row in &result.per_report {
            writeln!(per, "{},{}", row.id, row.bleu1).map_err(Error::Io)?;
        }
    }
    Ok(())
}

fn bootstrap_cmd(cfg: &TrainConfig, replicates: usize, conf: f64) -> Result<(), Error> {
    let result = pipeline_bootstrap(cfg, replicates, conf)?;
    let mut csv = std::fs::File::create(cfg.out_dir.join("bootstrap.csv"))?;
    write_bootstrap_csv(&mut csv, &result)?;
    for m in &result.metrics {
        println!(
            "{}: {:.4} +- {:.4} (sd {:.4}, {:.0}% CI [{:.4}, {:.4}])",
            m.name,
            m.point,
            m.half_width,
            m.sd,
            100.0 * result.conf,
            m.lower,
            m.upper
        );
    }
    Ok(())
}

fn ablate(cfg: &TrainConfig, variant: &str) -> Result<(), Error> {
    let variants: Vec<AblationVariant> = if variant == "all" {
        AblationVariant::ALL.to_vec()
    } else {
        variant
            .split(',')
            .map(|v| v.trim().parse())
            .collect::<Result<_, _>>()?
    };
    let rows = run_ablation(cfg, &variants)?;
    let path = cfg.out_dir.join("ablation.csv");
    let mut csv = std::fs::File::create(&path)?;
    write_ablation_csv(&mut csv, &rows)?;
    for r in &rows {
        println!(
            "{}: {} finding nodes, mean {:.4}",
            r.variant, r.finding_nodes, r.metrics.mean
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn noise(cfg: &TrainConfig, sigmas: &str, with_generation: bool) -> Result<(), Error> {
    let sigmas: Vec<f64> = sigmas
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad sigma {s:?}")))
        })
        .collect::<Result<_, _>>()?;
    let rows = run_noise_sweep(cfg, &sigmas, with_generation)?;
    let path = cfg.out_dir.join("noise.csv");
    let mut csv = std::fs::File::create(&path)?;
    write_noise_csv(&mut csv, &rows)?;
    for r in &rows {
        println!(
            "sigma {}: AUC {}",
            r.sigma,
            r.auc
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "undefined".into())
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn complexity(args: &EvaluateArgs, out_dir: Option<&std::path::Path>) -> Result<(), Error> {
    let hyps = load_text_records(&args.hyp)?;
    let refs = load_text_records(&args.reference)?;
    let pairs = align(&hyps, &refs)?;
    let result = evaluate(&pairs)?;
    // every preprocessed sentence ends with exactly one terminator token
    let counts: HashMap<String, usize> = pairs
        .iter()
        .map(|p| {
            let n = p.reference.iter().filter(|t| t.as_str() == ".").count();
            (p.id.clone(), n.max(1))
        })
        .collect();
    let bins = complexity_table(&result.per_report, &counts)?;
    let dir = out_dir.unwrap_or_else(|| std::path::Path::new("."));
    std::fs::create_dir_all(dir)?;
    let path = dir.join("complexity.csv");
    let mut csv = std::fs::File::create(&path)?;
    write_complexity_csv(&mut csv, &bins)?;
    for b in &bins {
        println!(
            "[{:.1}, {:.1}): {} reports, mean sentences {:.2}",
            b.low, b.high, b.count, b.mean_sentences
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}
