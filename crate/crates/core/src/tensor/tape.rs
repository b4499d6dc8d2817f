//! The computation tape: forward op recording and reverse-mode backward.

use super::{require_same_shape, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Indices are tape-local.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Softmax {
        x: TensorId,
        axis: usize,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    MeanPool {
        x: TensorId,
        axis: usize,
    },
    BlockMean {
        x: TensorId,
        block: usize,
    },
    /// Right-multiply each `block`-wide slab of columns by a constant matrix.
    BlockRightMatmul {
        x: TensorId,
        m: Tensor,
    },
    Reshape(TensorId),
    SliceCols {
        x: TensorId,
        start: usize,
    },
    AddCol {
        x: TensorId,
        col: TensorId,
    },
    ConvK1 {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    Conv3x3s2 {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        // per-channel centered/scaled input and 1/sqrt(var+eps)
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    // Same fields as BatchNorm, but the statistics are constants, so the
    // backward drops the batch-stat coupling terms.
    BatchNormEval {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: TensorId,
        probs: Vec<f64>,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    WeightedBce {
        logits: TensorId,
        labels: Vec<f64>,
        w_pos: Vec<f64>,
        w_neg: Vec<f64>,
        batch: usize,
    },
    Sum(TensorId),
    EmbedLookup {
        table: TensorId,
        row: usize,
    },
}

/// Records a single forward pass. Parents always precede children, so the
/// reverse of creation order is a valid reverse-topological order.
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(TensorId, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of a node after [`Tape::backward`]; zeros when the loss
    /// never reached it.
    pub fn grad(&self, id: TensorId) -> Vec<f64> {
        let node = &self.nodes[id.0];
        if node.grad.is_empty() {
            vec![0.0; node.value.len()]
        } else {
            node.grad.clone()
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        // grad buffers allocate lazily on first backward contribution
        self.nodes.push(Node {
            value,
            grad: Vec::new(),
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Constant input; receives a gradient during backward but is not bound
    /// to any parameter.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf)
    }

    /// Bind a stored parameter onto the tape. Its gradient is harvested by
    /// [`Tape::scatter_grads`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> TensorId {
        let idx = store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        let id = self.push(store.tensor_at(idx).clone(), Op::Leaf);
        self.bindings.push((id, idx));
        id
    }

    /// Add this tape's leaf gradients into the bound parameters' grad buffers.
    pub fn scatter_grads(&self, store: &mut ParamStore) {
        for &(id, idx) in &self.bindings {
            if !self.nodes[id.0].grad.is_empty() {
                store.accumulate_grad(idx, &self.nodes[id.0].grad);
            }
        }
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        require_same_shape(self.shape(a), self.shape(b), "add")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        require_same_shape(self.shape(a), self.shape(b), "mul")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, c))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let da = self.data(a);
            let db = self.data(b);
            for i in 0..m {
                let arow = &da[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = arow[p];
                    let row = &db[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * row[j];
                    }
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose: rank-2 required, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let da = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = da[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|&x| x.tanh()).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Tanh(a))
    }

    /// Softmax along `axis` of a rank-1 or rank-2 tensor. Max-subtracted for
    /// stability; each lane sums to 1.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || s.len() > 2 || axis >= s.len() {
            return Err(Error::shape(format!("softmax: shape {s:?}, axis {axis}")));
        }
        let mut out = self.data(a).to_vec();
        for lane in lanes(&s, axis) {
            let mut mx = f64::NEG_INFINITY;
            for i in lane.clone() {
                mx = mx.max(out[i]);
            }
            let mut z = 0.0;
            for i in lane.clone() {
                out[i] = (out[i] - mx).exp();
                z += out[i];
            }
            for i in lane {
                out[i] /= z;
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(value, Op::Softmax { x: a, axis }))
    }

    /// Concatenate along `axis`. All parts must agree on the other axis.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat: no inputs"));
        }
        let rank = self.shape(parts[0]).len();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(Error::shape(format!(
                "concat: rank {rank} with axis {axis} unsupported"
            )));
        }
        for &p in parts {
            if self.shape(p).len() != rank {
                return Err(Error::shape("concat: mixed ranks"));
            }
            for d in 0..rank {
                if d != axis && self.shape(p)[d] != self.shape(parts[0])[d] {
                    return Err(Error::shape(format!(
                        "concat: {:?} vs {:?} along axis {axis}",
                        self.shape(p),
                        self.shape(parts[0])
                    )));
                }
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let mut shape = self.shape(parts[0]).to_vec();
        shape[axis] = total;

        let mut out = vec![0.0; shape.iter().product()];
        if rank == 1 || axis == 0 {
            // contiguous blocks
            let mut off = 0;
            for &p in parts {
                let d = self.data(p);
                out[off..off + d.len()].copy_from_slice(d);
                off += d.len();
            }
        } else {
            // rank 2, axis 1: interleave columns per row
            let rows = shape[0];
            let ncols = shape[1];
            let mut coff = 0;
            for &p in parts {
                let pc = self.shape(p)[1];
                let d = self.data(p);
                for r in 0..rows {
                    out[r * ncols + coff..r * ncols + coff + pc]
                        .copy_from_slice(&d[r * pc..(r + 1) * pc]);
                }
                coff += pc;
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Mean over one axis of a rank-2 tensor, yielding rank 1.
    pub fn mean_pool(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 2 || axis > 1 {
            return Err(Error::shape(format!("mean_pool: shape {s:?}, axis {axis}")));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(a);
        let value = if axis == 1 {
            let mut out = vec![0.0; r];
            for i in 0..r {
                out[i] = d[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
            }
            Tensor::new(vec![r], out)?
        } else {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += d[i * c + j];
                }
            }
            for v in &mut out {
                *v /= r as f64;
            }
            Tensor::new(vec![c], out)?
        };
        Ok(self.push(value, Op::MeanPool { x: a, axis }))
    }

    /// `[C, B*block] -> [C, B]`: mean over each consecutive block of columns.
    pub fn block_mean(&mut self, a: TensorId, block: usize) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 2 || block == 0 || s[1] % block != 0 {
            return Err(Error::shape(format!("block_mean: shape {s:?}, block {block}")));
        }
        let (c, l) = (s[0], s[1]);
        let nb = l / block;
        let d = self.data(a);
        let mut out = vec![0.0; c * nb];
        for ch in 0..c {
            for b in 0..nb {
                let base = ch * l + b * block;
                out[ch * nb + b] = d[base..base + block].iter().sum::<f64>() / block as f64;
            }
        }
        let value = Tensor::new(vec![c, nb], out)?;
        Ok(self.push(value, Op::BlockMean { x: a, block }))
    }

    /// Right-multiply each `n`-column block of `x` (`[C, B*n]`) by the
    /// constant `n x n` matrix `m`. No gradient flows to `m`.
    pub fn block_right_matmul(&mut self, a: TensorId, m: &Tensor) -> Result<TensorId> {
        let s = self.shape(a);
        let ms = m.shape();
        if s.len() != 2 || ms.len() != 2 || ms[0] != ms[1] || ms[0] == 0 || s[1] % ms[0] != 0 {
            return Err(Error::shape(format!(
                "block_right_matmul: x {s:?}, m {ms:?}"
            )));
        }
        let (c, l, n) = (s[0], s[1], ms[0]);
        let nb = l / n;
        let d = self.data(a);
        let md = m.data();
        let mut out = vec![0.0; c * l];
        for ch in 0..c {
            for b in 0..nb {
                let base = ch * l + b * n;
                for i in 0..n {
                    let xv = d[base + i];
                    if xv == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        out[base + j] += xv * md[i * n + j];
                    }
                }
            }
        }
        let value = Tensor::new(vec![c, l], out)?;
        Ok(self.push(value, Op::BlockRightMatmul { x: a, m: m.clone() }))
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != self.data(a).len() {
            return Err(Error::shape(format!(
                "reshape: {:?} -> {:?}",
                self.shape(a),
                shape
            )));
        }
        let value = Tensor::new(shape, self.data(a).to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::shape(format!(
                "slice_cols: {s:?} with range {start}..{}",
                start + len
            )));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    /// `x[c,l] + col[c]`, broadcasting the column over every position.
    pub fn add_col(&mut self, x: TensorId, col: TensorId) -> Result<TensorId> {
        let sx = self.shape(x);
        let sc = self.shape(col);
        if sx.len() != 2 || sc.len() != 1 || sc[0] != sx[0] {
            return Err(Error::shape(format!("add_col: x {sx:?}, col {sc:?}")));
        }
        let (c, l) = (sx[0], sx[1]);
        let dx = self.data(x);
        let dc = self.data(col);
        let mut out = vec![0.0; c * l];
        for ch in 0..c {
            for p in 0..l {
                out[ch * l + p] = dx[ch * l + p] + dc[ch];
            }
        }
        let value = Tensor::new(vec![c, l], out)?;
        Ok(self.push(value, Op::AddCol { x, col }))
    }

    /// Kernel-size-1 convolution over positions:
    /// `out[o,p] = b[o] + sum_i w[o,i] * x[i,p]`.
    pub fn conv_k1(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sw[1] != sx[0] || sb[0] != sw[0] {
            return Err(Error::shape(format!(
                "conv_k1: x {sx:?}, w {sw:?}, b {sb:?}"
            )));
        }
        let (cin, l, cout) = (sx[0], sx[1], sw[0]);
        let dx = self.data(x);
        let dw = self.data(w);
        let db = self.data(b);
        let mut out = vec![0.0; cout * l];
        for o in 0..cout {
            let orow = &mut out[o * l..(o + 1) * l];
            orow.iter_mut().for_each(|v| *v = db[o]);
            for i in 0..cin {
                let wv = dw[o * cin + i];
                let xrow = &dx[i * l..(i + 1) * l];
                for p in 0..l {
                    orow[p] += wv * xrow[p];
                }
            }
        }
        let value = Tensor::new(vec![cout, l], out)?;
        Ok(self.push(value, Op::ConvK1 { x, w, b }))
    }

    /// 3x3 convolution, stride 2, zero padding 1.
    /// `x: [C_in, H, W]`, `w: [C_out, C_in, 3, 3]`, `b: [C_out]`.
    pub fn conv3x3_s2(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3
            || sw.len() != 4
            || sb.len() != 1
            || sw[1] != sx[0]
            || sw[2] != 3
            || sw[3] != 3
            || sb[0] != sw[0]
        {
            return Err(Error::shape(format!(
                "conv3x3_s2: x {sx:?}, w {sw:?}, b {sb:?}"
            )));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let cout = sw[0];
        let ho = (h - 1) / 2 + 1;
        let wo = (wd - 1) / 2 + 1;
        let dx = self.data(x);
        let dw = self.data(w);
        let db = self.data(b);
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = db[o];
                    for c in 0..cin {
                        for di in 0..3usize {
                            let yi = (2 * i + di) as isize - 1;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            for dj in 0..3usize {
                                let xj = (2 * j + dj) as isize - 1;
                                if xj < 0 || xj >= wd as isize {
                                    continue;
                                }
                                acc += dw[((o * cin + c) * 3 + di) * 3 + dj]
                                    * dx[(c * h + yi as usize) * wd + xj as usize];
                            }
                        }
                    }
                    out[(o * ho + i) * wo + j] = acc;
                }
            }
        }
        let value = Tensor::new(vec![cout, ho, wo], out)?;
        Ok(self.push(value, Op::Conv3x3s2 { x, w, b }))
    }

    /// Batch normalization over the position axis of `x: [C, L]` using batch
    /// statistics (train mode). Returns the output id plus the per-channel
    /// batch mean and biased variance so the caller can update running stats.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, Vec<f64>, Vec<f64>)> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sx.len() != 2 || sg.len() != 1 || sb.len() != 1 || sg[0] != sx[0] || sb[0] != sx[0] {
            return Err(Error::shape(format!(
                "batch_norm: x {sx:?}, gamma {sg:?}, beta {sb:?}"
            )));
        }
        let (c, l) = (sx[0], sx[1]);
        let dx = self.data(x).to_vec();
        let dg = self.data(gamma).to_vec();
        let db = self.data(beta).to_vec();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let row = &dx[ch * l..(ch + 1) * l];
            let m = row.iter().sum::<f64>() / l as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / l as f64;
            mean[ch] = m;
            var[ch] = v;
        }
        let mut xhat = vec![0.0; c * l];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * l];
        for ch in 0..c {
            let is = 1.0 / (var[ch] + eps).sqrt();
            inv_std[ch] = is;
            for p in 0..l {
                let xh = (dx[ch * l + p] - mean[ch]) * is;
                xhat[ch * l + p] = xh;
                out[ch * l + p] = dg[ch] * xh + db[ch];
            }
        }
        let value = Tensor::new(vec![c, l], out)?;
        let id = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((id, mean, var))
    }

    /// Batch normalization with fixed statistics (eval mode). The running
    /// mean/var are constants; gradients flow to `x`, `gamma`, `beta` only.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || running_mean.len() != sx[0] || running_var.len() != sx[0] {
            return Err(Error::shape(format!(
                "batch_norm_eval: x {sx:?}, stats {}",
                running_mean.len()
            )));
        }
        let (c, l) = (sx[0], sx[1]);
        let dx = self.data(x).to_vec();
        let dg = self.data(gamma).to_vec();
        let db = self.data(beta).to_vec();
        let mut xhat = vec![0.0; c * l];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * l];
        for ch in 0..c {
            let is = 1.0 / (running_var[ch] + eps).sqrt();
            inv_std[ch] = is;
            for p in 0..l {
                let xh = (dx[ch * l + p] - running_mean[ch]) * is;
                xhat[ch * l + p] = xh;
                out[ch * l + p] = dg[ch] * xh + db[ch];
            }
        }
        let value = Tensor::new(vec![c, l], out)?;
        Ok(self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Token cross-entropy summed over unmasked rows:
    /// `-sum_t log softmax(logits[t])[targets[t]]`.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<TensorId> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {s:?}, {} targets",
                targets.len()
            )));
        }
        let (t, v) = (s[0], s[1]);
        if let Some(tgt) = targets.iter().find(|&&ix| ix >= v) {
            return Err(Error::invalid(format!(
                "cross_entropy: target {tgt} out of range (vocab {v})"
            )));
        }
        let mask: Vec<bool> = match mask {
            Some(m) => {
                if m.len() != t {
                    return Err(Error::shape("cross_entropy: mask length"));
                }
                m.to_vec()
            }
            None => vec![true; t],
        };
        let d = self.data(logits);
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for r in 0..t {
            let row = &d[r * v..(r + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[r * v + j] = e;
                z += e;
            }
            for j in 0..v {
                probs[r * v + j] /= z;
            }
            if mask[r] {
                loss -= row[targets[r]] - mx - z.ln();
            }
        }
        let value = Tensor::scalar(loss);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                mask,
            },
        ))
    }

    /// Weighted binary cross-entropy on logits `[K]` or `[K, B]` (mean over
    /// the batch axis when present):
    /// `-sum_k w_pos[k] y log σ(z) + w_neg[k] (1-y) log(1-σ(z))`.
    pub fn weighted_bce(
        &mut self,
        logits: TensorId,
        labels: &[f64],
        w_pos: &[f64],
        w_neg: &[f64],
    ) -> Result<TensorId> {
        let s = self.shape(logits).to_vec();
        let (k, batch) = match s.len() {
            1 => (s[0], 1),
            2 => (s[0], s[1]),
            _ => return Err(Error::shape(format!("weighted_bce: logits {s:?}"))),
        };
        if labels.len() != k * batch || w_pos.len() != k || w_neg.len() != k {
            return Err(Error::shape(format!(
                "weighted_bce: {} labels for logits {s:?}, {} / {} weights",
                labels.len(),
                w_pos.len(),
                w_neg.len()
            )));
        }
        let d = self.data(logits);
        let mut loss = 0.0;
        for ch in 0..k {
            for b in 0..batch {
                let z = d[ch * batch + b];
                let y = labels[ch * batch + b];
                loss += w_pos[ch] * y * softplus(-z) + w_neg[ch] * (1.0 - y) * softplus(z);
            }
        }
        loss /= batch as f64;
        let value = Tensor::scalar(loss);
        Ok(self.push(
            value,
            Op::WeightedBce {
                logits,
                labels: labels.to_vec(),
                w_pos: w_pos.to_vec(),
                w_neg: w_neg.to_vec(),
                batch,
            },
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Row `row` of an embedding table `[V, E]`, as a rank-1 `[E]` tensor.
    pub fn embed_lookup(&mut self, table: TensorId, row: usize) -> Result<TensorId> {
        let s = self.shape(table);
        if s.len() != 2 || row >= s[0] {
            return Err(Error::shape(format!("embed_lookup: table {s:?}, row {row}")));
        }
        let e = s[1];
        let data = self.data(table)[row * e..(row + 1) * e].to_vec();
        let value = Tensor::new(vec![e], data)?;
        Ok(self.push(value, Op::EmbedLookup { table, row }))
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// Reverse-mode accumulation from a scalar loss. Leaves not reachable
    /// from `loss` keep zero gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.nodes[loss.0].grad = vec![1.0];
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_empty() {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize) {
        let g = self.nodes[i].grad.clone();
        // Decisions about saved data are made per-op below; contributions are
        // computed into locals, then added into parent grads.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, &g);
                self.add_grad(b, &g);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = self.data(b).iter().zip(&g).map(|(y, gi)| y * gi).collect();
                let db: Vec<f64> = self.data(a).iter().zip(&g).map(|(x, gi)| x * gi).collect();
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                self.add_grad(a, &da);
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let da_src = self.data(b);
                // dA[i,p] = sum_j G[i,j] B[p,j]: both rows contiguous
                let mut da = vec![0.0; m * k];
                for i2 in 0..m {
                    let grow = &g[i2 * n..(i2 + 1) * n];
                    for p in 0..k {
                        let brow = &da_src[p * n..(p + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        da[i2 * k + p] = acc;
                    }
                }
                // dB = A^T * G
                let db_src = self.data(a);
                let mut db = vec![0.0; k * n];
                for i2 in 0..m {
                    for p in 0..k {
                        let aip = db_src[i2 * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += aip * g[i2 * n + j];
                        }
                    }
                }
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Transpose(a) => {
                let a = *a;
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                let mut da = vec![0.0; m * n];
                for i2 in 0..m {
                    for j in 0..n {
                        da[i2 * n + j] = g[j * m + i2];
                    }
                }
                self.add_grad(a, &da);
            }
            Op::Relu(a) => {
                let a = *a;
                let da: Vec<f64> = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&y, gi)| if y > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let da: Vec<f64> = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&y, gi)| gi * y * (1.0 - y))
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Tanh(a) => {
                let a = *a;
                let da: Vec<f64> = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&y, gi)| gi * (1.0 - y * y))
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let shape = self.shape(x).to_vec();
                let y = self.nodes[i].value.data().to_vec();
                let mut da = vec![0.0; y.len()];
                for lane in lanes(&shape, axis) {
                    let mut dot = 0.0;
                    for idx in lane.clone() {
                        dot += g[idx] * y[idx];
                    }
                    for idx in lane {
                        da[idx] = y[idx] * (g[idx] - dot);
                    }
                }
                self.add_grad(x, &da);
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let rank = self.shape(parts[0]).len();
                if rank == 1 || axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let n = self.data(p).len();
                        let da = g[off..off + n].to_vec();
                        self.add_grad(p, &da);
                        off += n;
                    }
                } else {
                    let rows = self.shape(parts[0])[0];
                    let ncols = self.nodes[i].value.shape()[1];
                    let mut coff = 0;
                    for p in parts {
                        let pc = self.shape(p)[1];
                        let mut da = vec![0.0; rows * pc];
                        for r in 0..rows {
                            da[r * pc..(r + 1) * pc]
                                .copy_from_slice(&g[r * ncols + coff..r * ncols + coff + pc]);
                        }
                        self.add_grad(p, &da);
                        coff += pc;
                    }
                }
            }
            Op::MeanPool { x, axis } => {
                let (x, axis) = (*x, *axis);
                let s = self.shape(x).to_vec();
                let (r, c) = (s[0], s[1]);
                let mut da = vec![0.0; r * c];
                if axis == 1 {
                    for i2 in 0..r {
                        let gv = g[i2] / c as f64;
                        for j in 0..c {
                            da[i2 * c + j] = gv;
                        }
                    }
                } else {
                    for i2 in 0..r {
                        for j in 0..c {
                            da[i2 * c + j] = g[j] / r as f64;
                        }
                    }
                }
                self.add_grad(x, &da);
            }
            Op::BlockMean { x, block } => {
                let (x, block) = (*x, *block);
                let s = self.shape(x).to_vec();
                let (c, l) = (s[0], s[1]);
                let nb = l / block;
                let mut da = vec![0.0; c * l];
                for ch in 0..c {
                    for b in 0..nb {
                        let gv = g[ch * nb + b] / block as f64;
                        for p in 0..block {
                            da[ch * l + b * block + p] = gv;
                        }
                    }
                }
                self.add_grad(x, &da);
            }
            Op::BlockRightMatmul { x, m } => {
                let x = *x;
                let md = m.data().to_vec();
                let n = m.shape()[0];
                let s = self.shape(x).to_vec();
                let (c, l) = (s[0], s[1]);
                let nb = l / n;
                // dX = G * M^T per block
                let mut da = vec![0.0; c * l];
                for ch in 0..c {
                    for b in 0..nb {
                        let base = ch * l + b * n;
                        for i2 in 0..n {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[base + j] * md[i2 * n + j];
                            }
                            da[base + i2] = acc;
                        }
                    }
                }
                self.add_grad(x, &da);
            }
            Op::Reshape(a) => {
                let a = *a;
                self.add_grad(a, &g);
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let s = self.shape(x).to_vec();
                let (r, c) = (s[0], s[1]);
                let len = self.nodes[i].value.shape()[1];
                let mut da = vec![0.0; r * c];
                for i2 in 0..r {
                    da[i2 * c + start..i2 * c + start + len]
                        .copy_from_slice(&g[i2 * len..(i2 + 1) * len]);
                }
                self.add_grad(x, &da);
            }
            Op::AddCol { x, col } => {
                let (x, col) = (*x, *col);
                let s = self.shape(x).to_vec();
                let (c, l) = (s[0], s[1]);
                self.add_grad(x, &g);
                let mut dc = vec![0.0; c];
                for ch in 0..c {
                    dc[ch] = g[ch * l..(ch + 1) * l].iter().sum();
                }
                self.add_grad(col, &dc);
            }
            Op::ConvK1 { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (cin, l) = (self.shape(x)[0], self.shape(x)[1]);
                let cout = self.shape(w)[0];
                let dw_src = self.data(w);
                let mut dx = vec![0.0; cin * l];
                for o in 0..cout {
                    let grow = &g[o * l..(o + 1) * l];
                    for i2 in 0..cin {
                        let wv = dw_src[o * cin + i2];
                        let xrow = &mut dx[i2 * l..(i2 + 1) * l];
                        for p in 0..l {
                            xrow[p] += wv * grow[p];
                        }
                    }
                }
                let dx_src = self.data(x);
                let mut dw = vec![0.0; cout * cin];
                for o in 0..cout {
                    for i2 in 0..cin {
                        let mut acc = 0.0;
                        for p in 0..l {
                            acc += g[o * l + p] * dx_src[i2 * l + p];
                        }
                        dw[o * cin + i2] = acc;
                    }
                }
                let mut db = vec![0.0; cout];
                for o in 0..cout {
                    db[o] = g[o * l..(o + 1) * l].iter().sum();
                }
                self.add_grad(x, &dx);
                self.add_grad(w, &dw);
                self.add_grad(b, &db);
            }
            Op::Conv3x3s2 { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let sx = self.shape(x).to_vec();
                let (cin, h, wd) = (sx[0], sx[1], sx[2]);
                let cout = self.shape(w)[0];
                let so = self.nodes[i].value.shape().to_vec();
                let (ho, wo) = (so[1], so[2]);
                let w_src = self.data(w).to_vec();
                let x_src = self.data(x).to_vec();
                let mut dx = vec![0.0; cin * h * wd];
                let mut dw = vec![0.0; cout * cin * 9];
                let mut db = vec![0.0; cout];
                for o in 0..cout {
                    for i2 in 0..ho {
                        for j in 0..wo {
                            let gv = g[(o * ho + i2) * wo + j];
                            if gv == 0.0 {
                                continue;
                            }
                            db[o] += gv;
                            for c in 0..cin {
                                for di in 0..3usize {
                                    let yi = (2 * i2 + di) as isize - 1;
                                    if yi < 0 || yi >= h as isize {
                                        continue;
                                    }
                                    for dj in 0..3usize {
                                        let xj = (2 * j + dj) as isize - 1;
                                        if xj < 0 || xj >= wd as isize {
                                            continue;
                                        }
                                        let xi = (c * h + yi as usize) * wd + xj as usize;
                                        let wi = ((o * cin + c) * 3 + di) * 3 + dj;
                                        dx[xi] += gv * w_src[wi];
                                        dw[wi] += gv * x_src[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(w, &dw);
                self.add_grad(b, &db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let s = self.shape(x).to_vec();
                let (c, l) = (s[0], s[1]);
                let dg_src = self.data(gamma).to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; c * l];
                for ch in 0..c {
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for p in 0..l {
                        let gi = g[ch * l + p];
                        sum_g += gi;
                        sum_gx += gi * xhat[ch * l + p];
                    }
                    dbeta[ch] = sum_g;
                    dgamma[ch] = sum_gx;
                    let coef = dg_src[ch] * inv_std[ch];
                    let mg = sum_g / l as f64;
                    let mgx = sum_gx / l as f64;
                    for p in 0..l {
                        let gi = g[ch * l + p];
                        dx[ch * l + p] = coef * (gi - mg - xhat[ch * l + p] * mgx);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gamma, &dgamma);
                self.add_grad(beta, &dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let s = self.shape(x).to_vec();
                let (c, l) = (s[0], s[1]);
                let dg_src = self.data(gamma).to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; c * l];
                for ch in 0..c {
                    for p in 0..l {
                        let gi = g[ch * l + p];
                        dbeta[ch] += gi;
                        dgamma[ch] += gi * xhat[ch * l + p];
                        dx[ch * l + p] = gi * dg_src[ch] * inv_std[ch];
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gamma, &dgamma);
                self.add_grad(beta, &dbeta);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                mask,
            } => {
                let logits = *logits;
                let probs = probs.clone();
                let targets = targets.clone();
                let mask = mask.clone();
                let v = self.shape(logits)[1];
                let gs = g[0];
                let mut dl = vec![0.0; probs.len()];
                for (r, (&tgt, &m)) in targets.iter().zip(&mask).enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        let ind = if j == tgt { 1.0 } else { 0.0 };
                        dl[r * v + j] = gs * (probs[r * v + j] - ind);
                    }
                }
                self.add_grad(logits, &dl);
            }
            Op::WeightedBce {
                logits,
                labels,
                w_pos,
                w_neg,
                batch,
            } => {
                let logits = *logits;
                let labels = labels.clone();
                let w_pos = w_pos.clone();
                let w_neg = w_neg.clone();
                let batch = *batch;
                let gs = g[0] / batch as f64;
                let d = self.data(logits).to_vec();
                let k = w_pos.len();
                let mut dl = vec![0.0; d.len()];
                for ch in 0..k {
                    for b in 0..batch {
                        let z = d[ch * batch + b];
                        let y = labels[ch * batch + b];
                        // d/dz [w_pos y sp(-z) + w_neg (1-y) sp(z)]
                        dl[ch * batch + b] = gs
                            * (-w_pos[ch] * y * sigmoid(-z)
                                + w_neg[ch] * (1.0 - y) * sigmoid(z));
                    }
                }
                self.add_grad(logits, &dl);
            }
            Op::Sum(a) => {
                let a = *a;
                let da = vec![g[0]; self.data(a).len()];
                self.add_grad(a, &da);
            }
            Op::EmbedLookup { table, row } => {
                let (table, row) = (*table, *row);
                let e = self.shape(table)[1];
                let node = &mut self.nodes[table.0];
                if node.grad.is_empty() {
                    node.grad = vec![0.0; node.value.len()];
                }
                for j in 0..e {
                    node.grad[row * e + j] += g[j];
                }
            }
        }
    }

    fn add_grad(&mut self, id: TensorId, contrib: &[f64]) {
        let node = &mut self.nodes[id.0];
        debug_assert_eq!(node.value.len(), contrib.len());
        if node.grad.is_empty() {
            node.grad = contrib.to_vec();
        } else {
            for (gi, ci) in node.grad.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Iterate index ranges covering each lane along `axis` for rank-1/2 shapes.
fn lanes(shape: &[usize], axis: usize) -> Vec<LaneIter> {
    match (shape.len(), axis) {
        (1, 0) => vec![LaneIter::contiguous(0, shape[0])],
        (2, 1) => (0..shape[0])
            .map(|r| LaneIter::contiguous(r * shape[1], shape[1]))
            .collect(),
        (2, 0) => (0..shape[1])
            .map(|c| LaneIter::strided(c, shape[0], shape[1]))
            .collect(),
        _ => unreachable!("lanes: unsupported shape/axis"),
    }
}

#[derive(Clone)]
struct LaneIter {
    next: usize,
    remaining: usize,
    stride: usize,
}

impl LaneIter {
    fn contiguous(start: usize, len: usize) -> Self {
        LaneIter {
            next: start,
            remaining: len,
            stride: 1,
        }
    }
    fn strided(start: usize, len: usize, stride: usize) -> Self {
        LaneIter {
            next: start,
            remaining: len,
            stride,
        }
    }
}

impl Iterator for LaneIter {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        let i = self.next;
        self.next += self.stride;
        self.remaining -= 1;
        Some(i)
    }
}
