//! Model assembly: configuration, parameter initialization, and the forward
//! paths shared by training, evaluation, and generation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, FeatureMap, CNN_CHANNELS};
use crate::error::{Error, Result};
use crate::gcn::{gcn_forward, GcnVariant};
use crate::tensor::{ParamStore, Tape, Tensor, TensorId};

/// Whether batch-norm layers use batch statistics (and update running
/// stats) or the stored running statistics.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Dimension and wiring choices. The defaults are the reference
/// configuration; desk-scale runs shrink them through the run config.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// Per-view feature channels: the small CNN emits 32; ingested maps may
    /// carry more (e.g. 1024 from an external backbone).
    pub feature_channels: usize,
    /// True when views arrive as grayscale images for the built-in CNN;
    /// false when precomputed feature maps are ingested.
    pub use_cnn: bool,
    pub gcn_hidden: usize,
    pub n_gcn_layers: usize,
    pub gcn_variant: GcnVariant,
    /// Finding nodes (primary + auxiliary); the graph adds one Global node.
    pub n_findings: usize,
    pub n_primary: usize,
    pub decoder_hidden: usize,
    pub attention_dim: usize,
    pub embedding_dim: usize,
}

impl ModelConfig {
    pub fn reference(n_findings: usize, n_primary: usize) -> Self {
        ModelConfig {
            feature_channels: CNN_CHANNELS[2],
            use_cnn: true,
            gcn_hidden: 256,
            n_gcn_layers: 3,
            gcn_variant: GcnVariant::Full,
            n_findings,
            n_primary,
            decoder_hidden: 512,
            attention_dim: 128,
            embedding_dim: 200,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_findings + 1
    }

    /// Node-feature width after per-view attention concat.
    pub fn d_init(&self) -> usize {
        3 * self.feature_channels
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

fn insert_bn(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(&format!("{prefix}.gamma"), Tensor::filled(vec![c], 1.0));
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(vec![c]));
    store.insert_buffer(&format!("{prefix}.bn_mean"), Tensor::zeros(vec![c]));
    store.insert_buffer(&format!("{prefix}.bn_var"), Tensor::filled(vec![c], 1.0));
}

/// Encoder parameters: the three CNN stages (when images are ingested) and
/// the spatial-attention convolution mapping features to one channel per
/// finding node.
pub fn init_encoder_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    if cfg.use_cnn {
        let mut cin = 1;
        for (i, &cout) in CNN_CHANNELS.iter().enumerate() {
            let p = format!("encoder.cnn.stage{i}");
            store.insert(
                &format!("{p}.w"),
                uniform_init(rng, vec![cout, cin, 3, 3], cin * 9),
            );
            store.insert(&format!("{p}.b"), Tensor::zeros(vec![cout]));
            insert_bn(store, &p, cout);
            cin = cout;
        }
    }
    let c = cfg.feature_channels;
    store.insert(
        "encoder.attn.w",
        uniform_init(rng, vec![cfg.n_findings, c], c),
    );
    store.insert("encoder.attn.b", Tensor::zeros(vec![cfg.n_findings]));
}

pub fn init_gcn_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let mut d_in = cfg.d_init();
    for l in 0..cfg.n_gcn_layers {
        let d_out = cfg.gcn_hidden;
        let p = format!("gcn.layer{l}");
        store.insert(&format!("{p}.W"), uniform_init(rng, vec![d_out, d_in], d_in));
        if cfg.gcn_variant == GcnVariant::Full {
            store.insert(
                &format!("{p}.conv_a.w"),
                uniform_init(rng, vec![d_out, d_in], d_in),
            );
            store.insert(&format!("{p}.conv_a.b"), Tensor::zeros(vec![d_out]));
            insert_bn(store, &format!("{p}.bn_a"), d_out);
            store.insert(
                &format!("{p}.conv_b.w"),
                uniform_init(rng, vec![d_out, 2 * d_out], 2 * d_out),
            );
            store.insert(&format!("{p}.conv_b.b"), Tensor::zeros(vec![d_out]));
            insert_bn(store, &format!("{p}.bn_b"), d_out);
        }
        d_in = d_out;
    }
}

pub fn init_classifier_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    store.insert(
        "classifier.w",
        uniform_init(rng, vec![cfg.n_primary, cfg.gcn_hidden], cfg.gcn_hidden),
    );
    store.insert("classifier.b", Tensor::zeros(vec![cfg.n_primary]));
}

fn insert_lstm(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) {
    for gate in ["i", "f", "o", "g"] {
        store.insert(
            &format!("{prefix}.{gate}.w"),
            uniform_init(rng, vec![hidden, input], input),
        );
        store.insert(
            &format!("{prefix}.{gate}.u"),
            uniform_init(rng, vec![hidden, hidden], hidden),
        );
        store.insert(&format!("{prefix}.{gate}.b"), Tensor::zeros(vec![hidden]));
    }
}

/// Decoder parameters. `embedding` rows come from [`crate::decoder::load_embeddings`];
/// the table is `[vocab, embedding_dim]`.
pub fn init_decoder_params(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    embedding: Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let vocab = embedding.shape()[0];
    if embedding.shape()[1] != cfg.embedding_dim {
        return Err(Error::shape(format!(
            "embedding table {:?} does not match embedding_dim {}",
            embedding.shape(),
            cfg.embedding_dim
        )));
    }
    let (h, att, d) = (cfg.decoder_hidden, cfg.attention_dim, cfg.gcn_hidden);
    store.insert("decoder.attn.wq", uniform_init(rng, vec![att, h], h));
    store.insert("decoder.attn.wk", uniform_init(rng, vec![att, d], d));
    store.insert("decoder.attn.v", uniform_init(rng, vec![1, att], att));
    insert_lstm(store, "decoder.topic", d, h, rng);
    store.insert("decoder.stop.w", uniform_init(rng, vec![1, h], h));
    store.insert("decoder.stop.b", Tensor::zeros(vec![1]));
    store.insert("decoder.proj.w", uniform_init(rng, vec![d, h], h));
    store.insert("decoder.proj.b", Tensor::zeros(vec![d]));
    insert_lstm(store, "decoder.word", cfg.embedding_dim + d, h, rng);
    store.insert("decoder.embedding", embedding);
    store.insert("decoder.out.w", uniform_init(rng, vec![vocab, h], h));
    store.insert("decoder.out.b", Tensor::zeros(vec![vocab]));
    Ok(())
}

/// Fresh stage-1 parameters (encoder + GCN + classifier), deterministic in
/// the seed.
pub fn init_stage1_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_encoder_params(&mut store, cfg, &mut rng);
    init_gcn_params(&mut store, cfg, &mut rng);
    init_classifier_params(&mut store, cfg, &mut rng);
    store
}

/// Restore buffer flags on a store loaded from a checkpoint (running stats
/// must not receive optimizer updates).
pub fn mark_bn_buffers(store: &mut ParamStore) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.ends_with(".bn_mean") || n.ends_with(".bn_var"))
        .map(String::from)
        .collect();
    for n in names {
        store.freeze_prefix(&n);
    }
}

/// A report's two views, either raw grayscale images (C = 1) or precomputed
/// feature maps.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub frontal: FeatureMap,
    pub lateral: FeatureMap,
}

/// Put the batch's views onto the tape as flat `[C, H*W]` feature tensors,
/// two per sample (frontal then lateral). In image mode all views share one
/// batched CNN pass so batch-norm statistics pool over batch x positions.
fn batch_view_features(
    tape: &mut Tape,
    store: &mut ParamStore,
    cfg: &ModelConfig,
    pairs: &[&ViewPair],
    phase: Phase,
) -> Result<Vec<(TensorId, TensorId)>> {
    if cfg.use_cnn {
        let mut images = Vec::with_capacity(2 * pairs.len());
        for pair in pairs {
            for view in [&pair.frontal, &pair.lateral] {
                if view.channels != 1 {
                    return Err(Error::invalid(format!(
                        "image mode expects single-channel views, got C={}",
                        view.channels
                    )));
                }
                images.push(tape.leaf(view.to_tensor()));
            }
        }
        let feats =
            encoder::tiny_cnn_forward_batch(tape, store, "encoder.cnn", &images, phase)?;
        Ok(feats.chunks(2).map(|c| (c[0], c[1])).collect())
    } else {
        pairs
            .iter()
            .map(|pair| {
                for view in [&pair.frontal, &pair.lateral] {
                    if view.channels != cfg.feature_channels {
                        return Err(Error::shape(format!(
                            "feature map carries {} channels, model expects {}",
                            view.channels, cfg.feature_channels
                        )));
                    }
                }
                Ok((
                    tape.leaf(pair.frontal.to_flat_tensor()),
                    tape.leaf(pair.lateral.to_flat_tensor()),
                ))
            })
            .collect()
    }
}

/// Initial node features `[3C, N]` for one sample.
pub fn forward_h0(
    tape: &mut Tape,
    store: &mut ParamStore,
    cfg: &ModelConfig,
    pair: &ViewPair,
    phase: Phase,
) -> Result<TensorId> {
    let views = batch_view_features(tape, store, cfg, &[pair], phase)?;
    encoder::init_nodes(tape, store, "encoder.attn", views[0].0, views[0].1, cfg.n_findings)
}

/// Node features after graph propagation for a batch: `[gcn_hidden, B*N]`.
/// Batch-norm statistics pool over batch x views/nodes in train mode.
pub fn forward_nodes_batch(
    tape: &mut Tape,
    store: &mut ParamStore,
    cfg: &ModelConfig,
    s: &Tensor,
    pairs: &[&ViewPair],
    phase: Phase,
) -> Result<TensorId> {
    let views = batch_view_features(tape, store, cfg, pairs, phase)?;
    let mut h0s = Vec::with_capacity(pairs.len());
    for (f_f, f_l) in views {
        h0s.push(encoder::init_nodes(
            tape,
            store,
            "encoder.attn",
            f_f,
            f_l,
            cfg.n_findings,
        )?);
    }
    let h0 = tape.concat(&h0s, 1)?;
    gcn_forward(
        tape,
        store,
        h0,
        s,
        cfg.n_gcn_layers,
        phase,
        cfg.gcn_variant,
    )
}

/// Eval-mode node features for one sample, extracted off the tape. Used for
/// decoding against a frozen encoder/GCN.
pub fn node_features(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    s: &Tensor,
    pair: &ViewPair,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let h = forward_nodes_batch(&mut tape, store, cfg, s, &[pair], Phase::Eval)?;
    Ok(tape.value(h).clone())
}
