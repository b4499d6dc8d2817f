//! Stage-1 diagnosis probe.
use rrgen_core::classifier::classify;
use rrgen_core::kg::default_manual_graph;
use rrgen_core::model::{forward_nodes_batch, Phase, ViewPair};
use rrgen_core::tensor::Tape;
use rrgen_core::training::synth::{synth_corpus, write_synth_corpus};
use rrgen_core::training::{evaluate_classifier, load_dataset, train_stage1, TrainConfig};

fn main() {
    let lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let dir = std::path::PathBuf::from("/tmp/probe2");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let graph = default_manual_graph();
    let cases = synth_corpus(42, 20, &graph).unwrap();
    write_synth_corpus(&dir, &cases).unwrap();
    let loaded0 = rrgen_core::corpus::load_reports(&dir.join("reports.jsonl")).unwrap();
    let (kg, _stats) = rrgen_core::kg::build_graph_from_corpus(&loaded0.reports, rrgen_core::kg::default_lexicon(), &graph, 10, None).unwrap();
    kg.save(&dir.join("graph.txt")).unwrap();

    let mut cfg = TrainConfig::default();
    cfg.corpus = dir.join("reports.jsonl");
    cfg.graph = dir.join("graph.txt");
    cfg.seed = 7;
    cfg.lr = lr;
    cfg.min_freq = 1;
    cfg.epochs = 1000;
    cfg.max_steps = steps;
    cfg.batch_size = 8;
    // use the whole corpus as train for diagnosis
    cfg.train_ratio = 1.0; cfg.val_ratio = 0.0; cfg.test_ratio = 0.0;

    let ds = load_dataset(&cfg).unwrap();
    let s1 = train_stage1(&ds, &cfg).unwrap();
    for row in s1.log.iter().step_by(10) {
        println!("epoch {:3} step {:4} loss {:8.4} auc {:?}", row.epoch, row.step, row.loss, row.score);
    }
    let mut store = s1.store.clone();
    let (auc_eval, _) = evaluate_classifier(&mut store, &ds, &ds.train).unwrap();
    println!("eval-mode train AUC: {:?}", auc_eval);

    // train-mode probe: batch stats over the whole train set
    let pairs: Vec<&ViewPair> = ds.train.iter().map(|s| &s.pair).collect();
    let mut tape = Tape::new();
    let h = forward_nodes_batch(&mut tape, &mut store, &ds.model_cfg, &ds.s, &pairs, Phase::Train).unwrap();
    let logits = classify(&mut tape, &store, h, ds.model_cfg.n_nodes()).unwrap();
    let vals = tape.value(logits).clone();
    let mut defined = vec![];
    for c in 0..ds.model_cfg.n_primary {
        let scores: Vec<f64> = (0..ds.train.len()).map(|b| vals.at2(c, b)).collect();
        let labels: Vec<f64> = ds.train.iter().map(|s| s.labels[c]).collect();
        if let Some(a) = rrgen_core::classifier::auc(&scores, &labels) { defined.push(a); }
    }
    println!("train-mode-BN train AUC: {:.4} over {} classes", defined.iter().sum::<f64>() / defined.len() as f64, defined.len());
}
