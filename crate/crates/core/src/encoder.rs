//! Visual feature handling: feature-map files, the built-in small CNN, view
//! pooling, spatial attention, and graph node initialization.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::Phase;
use crate::tensor::{ParamStore, Tape, Tensor, TensorId};

/// Per-view visual feature block. A grayscale image is the `C = 1` case.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("feature map: zero dimension"));
        }
        if values.len() != channels * height * width {
            return Err(Error::shape(format!(
                "feature map: {} values for {}x{}x{}",
                values.len(),
                channels,
                height,
                width
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.values[(c * self.height + y) * self.width + x]
    }

    /// Rank-3 tensor `[C, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.values.clone(),
        )
        .expect("consistent dims")
    }

    /// Rank-2 tensor `[C, H*W]` with positions flattened row-major.
    pub fn to_flat_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height * self.width],
            self.values.clone(),
        )
        .expect("consistent dims")
    }

    /// Binary format: magic `FMAP`, u32 version 1, u32 C/H/W, then C*H*W
    /// 32-bit little-endian floats, channel-major.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"FMAP")?;
        w.write_all(&1u32.to_le_bytes())?;
        for d in [self.channels, self.height, self.width] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("feature map: missing magic"))?;
        if &magic != b"FMAP" {
            return Err(Error::format("feature map: bad magic"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != 1 {
            return Err(Error::format(format!(
                "feature map: unsupported version {version}"
            )));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut u32buf)?;
            *d = u32::from_le_bytes(u32buf) as usize;
        }
        let n = dims[0] * dims[1] * dims[2];
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u32buf)?;
            values.push(f32::from_le_bytes(u32buf) as f64);
        }
        FeatureMap::new(dims[0], dims[1], dims[2], values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_binary(&mut f)
    }

    /// Textual fixture format: a `C H W` header line, then `C*H` lines of
    /// `W` whitespace-separated floats.
    pub fn write_text<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{} {} {}", self.channels, self.height, self.width)?;
        for c in 0..self.channels {
            for y in 0..self.height {
                let row: Vec<String> = (0..self.width)
                    .map(|x| format!("{}", self.at(c, y, x) as f32))
                    .collect();
                writeln!(w, "{}", row.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read_text(text: &str) -> Result<Self> {
        let mut it = text.split_whitespace();
        let mut dim = || -> Result<usize> {
            it.next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::format("feature map text: bad header"))
        };
        let (c, h, w) = (dim()?, dim()?, dim()?);
        let n = c * h * w;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let v: f32 = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::format("feature map text: missing value"))?;
            values.push(v as f64);
        }
        if it.next().is_some() {
            return Err(Error::format("feature map text: trailing values"));
        }
        FeatureMap::new(c, h, w, values)
    }
}

/// Add i.i.d. N(0, sigma^2) noise per value, deterministically from `seed`.
/// `sigma = 0` returns the input bit-identically (no RNG draws).
pub fn add_gaussian_noise(image: &FeatureMap, sigma: f64, seed: u64) -> Result<FeatureMap> {
    if sigma < 0.0 {
        return Err(Error::invalid("noise sigma must be nonnegative"));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = image.clone();
    for v in &mut out.values {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

/// The built-in encoder: three {conv 3x3 stride 2, batch norm, ReLU} stages,
/// channels 8 -> 16 -> 32. Minimum input side is 16.
pub const CNN_CHANNELS: [usize; 3] = [8, 16, 32];
pub const MIN_IMAGE_SIDE: usize = 16;

/// Forward the small CNN over a grayscale image already on the tape as a
/// rank-3 `[1, H, W]` leaf. Returns `[32, H/8, W/8]` (ceil division per
/// stage). Train mode updates the store's running statistics.
pub fn tiny_cnn_forward(
    tape: &mut Tape,
    store: &mut ParamStore,
    prefix: &str,
    image: TensorId,
    phase: Phase,
) -> Result<TensorId> {
    let in_shape = tape.value(image).shape().to_vec();
    let flat = tiny_cnn_forward_batch(tape, store, prefix, &[image], phase)?[0];
    let stride2 = |d: usize| (d - 1) / 2 + 1;
    let h = stride2(stride2(stride2(in_shape[1])));
    let w = stride2(stride2(stride2(in_shape[2])));
    let c = tape.value(flat).shape()[0];
    tape.reshape(flat, vec![c, h, w])
}

/// Batched CNN forward: all images share batch-norm statistics per stage
/// (per channel over batch x positions), so eval-mode running averages see
/// the same distribution training did. Images must share dimensions.
/// Returns one flattened `[C, H'*W']` tensor per input image.
pub fn tiny_cnn_forward_batch(
    tape: &mut Tape,
    store: &mut ParamStore,
    prefix: &str,
    images: &[TensorId],
    phase: Phase,
) -> Result<Vec<TensorId>> {
    if images.is_empty() {
        return Err(Error::invalid("tiny_cnn_forward_batch: no images"));
    }
    let shape = tape.value(images[0]).shape().to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::shape(format!(
            "tiny_cnn_forward_batch: expected [1, H, W], got {shape:?}"
        )));
    }
    if shape[1] < MIN_IMAGE_SIDE || shape[2] < MIN_IMAGE_SIDE {
        return Err(Error::invalid(format!(
            "tiny_cnn_forward_batch: image {}x{} below minimum side {MIN_IMAGE_SIDE}",
            shape[1], shape[2]
        )));
    }
    for &img in images {
        if tape.value(img).shape() != shape.as_slice() {
            return Err(Error::shape("tiny_cnn_forward_batch: mixed image sizes"));
        }
    }
    let mut xs: Vec<TensorId> = images.to_vec();
    for stage in 0..3 {
        let p = format!("{prefix}.stage{stage}");
        let w = tape.param(store, &format!("{p}.w"));
        let b = tape.param(store, &format!("{p}.b"));
        let mut convs = Vec::with_capacity(xs.len());
        let mut cs = Vec::new();
        for &x in &xs {
            let conv = tape.conv3x3_s2(x, w, b)?;
            cs = tape.value(conv).shape().to_vec();
            convs.push(tape.reshape(conv, vec![cs[0], cs[1] * cs[2]])?);
        }
        let joined = tape.concat(&convs, 1)?;
        let bn = batch_norm(tape, store, &p, joined, phase)?;
        let act = tape.relu(bn);
        let positions = cs[1] * cs[2];
        let mut next = Vec::with_capacity(xs.len());
        for (i, _) in convs.iter().enumerate() {
            let flat = tape.slice_cols(act, i * positions, positions)?;
            if stage == 2 {
                next.push(flat);
            } else {
                next.push(tape.reshape(flat, cs.clone())?);
            }
        }
        xs = next;
    }
    Ok(xs)
}

/// Batch norm over the position axis with running-stat bookkeeping in the
/// store: `{prefix}.gamma/.beta` parameters, `{prefix}.bn_mean/.bn_var`
/// buffers, momentum 0.1, epsilon 1e-5.
pub fn batch_norm(
    tape: &mut Tape,
    store: &mut ParamStore,
    prefix: &str,
    x: TensorId,
    phase: Phase,
) -> Result<TensorId> {
    const EPS: f64 = 1e-5;
    const MOMENTUM: f64 = 0.1;
    let gamma = tape.param(store, &format!("{prefix}.gamma"));
    let beta = tape.param(store, &format!("{prefix}.beta"));
    match phase {
        Phase::Train => {
            let (out, mean, var) = tape.batch_norm_train(x, gamma, beta, EPS)?;
            let rm = store
                .get_mut(&format!("{prefix}.bn_mean"))
                .ok_or_else(|| Error::invalid(format!("missing buffer {prefix}.bn_mean")))?;
            for (r, m) in rm.data_mut().iter_mut().zip(&mean) {
                *r = (1.0 - MOMENTUM) * *r + MOMENTUM * m;
            }
            let rv = store
                .get_mut(&format!("{prefix}.bn_var"))
                .ok_or_else(|| Error::invalid(format!("missing buffer {prefix}.bn_var")))?;
            for (r, v) in rv.data_mut().iter_mut().zip(&var) {
                *r = (1.0 - MOMENTUM) * *r + MOMENTUM * v;
            }
            Ok(out)
        }
        Phase::Eval => {
            let mean = store
                .get(&format!("{prefix}.bn_mean"))
                .ok_or_else(|| Error::invalid(format!("missing buffer {prefix}.bn_mean")))?
                .data()
                .to_vec();
            let var = store
                .get(&format!("{prefix}.bn_var"))
                .ok_or_else(|| Error::invalid(format!("missing buffer {prefix}.bn_var")))?
                .data()
                .to_vec();
            tape.batch_norm_eval(x, gamma, beta, &mean, &var, EPS)
        }
    }
}

/// Spatial mean of each view, then the elementwise mean of the two pooled
/// vectors. Inputs are flattened `[C, H*W]` tensors sharing C.
pub fn global_pool(tape: &mut Tape, f_f: TensorId, f_l: TensorId) -> Result<TensorId> {
    let cf = tape.value(f_f).shape()[0];
    let cl = tape.value(f_l).shape()[0];
    if cf != cl {
        return Err(Error::shape(format!(
            "global_pool: channel mismatch {cf} vs {cl}"
        )));
    }
    let pf = tape.mean_pool(f_f, 1)?;
    let pl = tape.mean_pool(f_l, 1)?;
    let sum = tape.add(pf, pl)?;
    Ok(tape.scale(sum, 0.5))
}

/// Kernel-size-1 convolution down to one channel per finding node, then a
/// softmax over the positions of each channel: every row is a
/// probability vector over the H*W positions.
pub fn spatial_attention(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    f: TensorId,
) -> Result<TensorId> {
    let w = tape.param(store, &format!("{prefix}.w"));
    let b = tape.param(store, &format!("{prefix}.b"));
    let scores = tape.conv_k1(f, w, b)?;
    tape.softmax(scores, 1)
}

/// Initialize graph node features from both views: column 0 is the Global
/// node `concat(g, p_f, p_l)`; finding column k is `concat(g, a_f^k, a_l^k)`
/// with `a_v^k` the attention-weighted sum of view v's positions. Output is
/// `[3C, n_findings + 1]`.
pub fn init_nodes(
    tape: &mut Tape,
    store: &ParamStore,
    attn_prefix: &str,
    f_f: TensorId,
    f_l: TensorId,
    n_findings: usize,
) -> Result<TensorId> {
    let c = tape.value(f_f).shape()[0];
    if tape.value(f_l).shape()[0] != c {
        return Err(Error::shape("init_nodes: views disagree on channels"));
    }
    let pf = tape.mean_pool(f_f, 1)?;
    let pl = tape.mean_pool(f_l, 1)?;
    let psum = tape.add(pf, pl)?;
    let g = tape.scale(psum, 0.5);

    let attended = |tape: &mut Tape, f: TensorId| -> Result<TensorId> {
        let weights = spatial_attention(tape, store, attn_prefix, f)?; // [K, HW]
        let wt = tape.transpose(weights)?; // [HW, K]
        tape.matmul(f, wt) // [C, K]
    };
    let af = attended(tape, f_f)?;
    let al = attended(tape, f_l)?;
    if tape.value(af).shape()[1] != n_findings {
        return Err(Error::shape(format!(
            "init_nodes: attention produced {} channels for {} finding nodes",
            tape.value(af).shape()[1],
            n_findings
        )));
    }

    // broadcast g across the K finding columns
    let zeros_k = tape.leaf(Tensor::zeros(vec![c, n_findings]));
    let g_block = tape.add_col(zeros_k, g)?;
    let findings = tape.concat(&[g_block, af, al], 0)?; // [3C, K]

    let gcol = tape.concat(&[g, pf, pl], 0)?; // [3C]
    let gcol = tape.reshape(gcol, vec![3 * c, 1])?;
    tape.concat(&[gcol, findings], 1) // [3C, K+1]
}
