//! Scratch probe for desk-scale convergence tuning (not part of the build).
use rrgen_core::kg::default_manual_graph;
use rrgen_core::training::synth::{synth_corpus, write_synth_corpus};
use rrgen_core::training::{
    evaluate_classifier, evaluate_split, load_dataset, train_stage1, train_stage2, TrainConfig,
};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let s2lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let s2epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(60);
    let dh: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(128);

    let dir = std::path::PathBuf::from("/tmp/probe");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let graph = default_manual_graph();
    // build the reference 31-node graph via kg-build on the synthetic corpus
    let cases = synth_corpus(42, 20, &graph).unwrap();
    write_synth_corpus(&dir, &cases).unwrap();
    let loaded = rrgen_core::corpus::load_reports(&dir.join("reports.jsonl")).unwrap();
    let (kg, stats) = rrgen_core::kg::build_graph_from_corpus(
        &loaded.reports,
        rrgen_core::kg::default_lexicon(),
        &graph,
        10,
        None,
    )
    .unwrap();
    println!("graph: {} nodes, {} edges, tau {} selected {:?}", kg.n_nodes(), kg.n_edges(), stats.tau, stats.selected.iter().map(|(n,c)| format!("{n}:{c}")).collect::<Vec<_>>());
    kg.save(&dir.join("graph.txt")).unwrap();

    let mut cfg = TrainConfig::default();
    cfg.corpus = dir.join("reports.jsonl");
    cfg.graph = dir.join("graph.txt");
    cfg.out_dir = dir.clone();
    cfg.seed = 7;
    cfg.lr = lr;
    cfg.stage2_lr = s2lr;
    cfg.epochs = 1000;
    cfg.max_steps = 500;
    cfg.stage2_epochs = s2epochs;
    cfg.batch_size = 8;
    cfg.decoder_hidden = dh;
    cfg.attention_dim = 64;
    cfg.embedding_dim = 64;
    cfg.stage2_eval_every = 10;
    cfg.train_ratio = 1.0;
    cfg.val_ratio = 0.0;
    cfg.test_ratio = 0.0;
    cfg.min_freq = 1;

    let t0 = Instant::now();
    let ds = load_dataset(&cfg).unwrap();
    println!("dataset: {} train / {} val / {} test, vocab {}", ds.train.len(), ds.val.len(), ds.test.len(), ds.vocab.len());
    let s1 = train_stage1(&ds, &cfg).unwrap();
    let mut store = s1.store.clone();
    let (train_auc, _) = evaluate_classifier(&mut store, &ds, &ds.train).unwrap();
    println!("stage1: {} steps, {:.1}s, train AUC {:?} val AUC {:?}", s1.steps, t0.elapsed().as_secs_f64(), train_auc, s1.best_val_auc);

    let t1 = Instant::now();
    let s2 = train_stage2(&ds, &cfg, &s1.store).unwrap();
    let mut full = s2.store.clone();
    let res = evaluate_split(&mut full, &ds, &ds.train, &cfg).unwrap();
    println!("stage2: {} steps, {:.1}s, train BLEU-1 {:.3} mean {:.3} (val mean {:?})", s2.steps, t1.elapsed().as_secs_f64(), res.bleu[0], res.mean, s2.best_val_mean);
    for row in s2.log.iter().filter(|r| r.score.is_some()).take(12) {
        println!("  epoch {} loss {:.3} val {:?}", row.epoch, row.loss, row.score);
    }
    let hyps = rrgen_core::training::generate_split(&mut full, &ds, &ds.train[..3.min(ds.train.len())], &cfg).unwrap();
    for (id, text, stops) in hyps {
        println!("  {id}: {text}  (stops {:?})", stops.iter().map(|p| (p*100.0).round()/100.0).collect::<Vec<_>>());
    }
}
