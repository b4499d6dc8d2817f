//! Graph convolution: adjacency normalization and the layered node update.

use crate::encoder::batch_norm;
use crate::error::{Error, Result};
use crate::model::Phase;
use crate::tensor::{ParamStore, Tape, Tensor, TensorId};

/// Which layer update to run. `Full` is the three-equation update (transform
/// path, normalized message passing, concat projection); `MessageOnly` is
/// the plain `ReLU(S H W)` propagation used as an ablation baseline.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum GcnVariant {
    Full,
    MessageOnly,
}

/// `S = D^{-1/2} (A + I) D^{-1/2}` with degrees taken from the self-looped
/// adjacency, so isolated nodes keep degree 1 and S stays finite.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let shape = a.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(format!("normalize_adjacency: {shape:?}")));
    }
    let n = shape[0];
    for i in 0..n {
        if a.at2(i, i) != 0.0 {
            return Err(Error::invalid("normalize_adjacency: nonzero diagonal"));
        }
        for j in 0..n {
            if a.at2(i, j) != a.at2(j, i) {
                return Err(Error::invalid("normalize_adjacency: asymmetric input"));
            }
        }
    }
    let mut ahat = a.clone();
    for i in 0..n {
        ahat.data_mut()[i * n + i] = 1.0;
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = (0..n).map(|j| ahat.at2(i, j)).sum();
            1.0 / deg.sqrt()
        })
        .collect();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = inv_sqrt_deg[i] * ahat.at2(i, j) * inv_sqrt_deg[j];
        }
    }
    Tensor::new(vec![n, n], s)
}

/// One layer over `h: [d_in, B*N]` where `s` is `N x N`. Batch slabs share
/// batch-norm statistics (per channel over batch x nodes).
pub fn gcn_layer(
    tape: &mut Tape,
    store: &mut ParamStore,
    prefix: &str,
    h: TensorId,
    s: &Tensor,
    phase: Phase,
    variant: GcnVariant,
) -> Result<TensorId> {
    let w = tape.param(store, &format!("{prefix}.W"));
    let wh = tape.matmul(w, h)?;
    let msg_pre = tape.block_right_matmul(wh, s)?;
    let msg = tape.relu(msg_pre);
    if variant == GcnVariant::MessageOnly {
        return Ok(msg);
    }
    let ca_w = tape.param(store, &format!("{prefix}.conv_a.w"));
    let ca_b = tape.param(store, &format!("{prefix}.conv_a.b"));
    let conv_a = tape.conv_k1(h, ca_w, ca_b)?;
    let bn_a = batch_norm(tape, store, &format!("{prefix}.bn_a"), conv_a, phase)?;
    let h_hat = tape.relu(bn_a);

    let cat = tape.concat(&[h_hat, msg], 0)?;
    let cb_w = tape.param(store, &format!("{prefix}.conv_b.w"));
    let cb_b = tape.param(store, &format!("{prefix}.conv_b.b"));
    let conv_b = tape.conv_k1(cat, cb_w, cb_b)?;
    let bn_b = batch_norm(tape, store, &format!("{prefix}.bn_b"), conv_b, phase)?;
    Ok(tape.relu(bn_b))
}

/// Compose the stacked layers under the `gcn.layer{l}` naming scheme.
pub fn gcn_forward(
    tape: &mut Tape,
    store: &mut ParamStore,
    h0: TensorId,
    s: &Tensor,
    n_layers: usize,
    phase: Phase,
    variant: GcnVariant,
) -> Result<TensorId> {
    let mut h = h0;
    for l in 0..n_layers {
        h = gcn_layer(tape, store, &format!("gcn.layer{l}"), h, s, phase, variant)?;
    }
    Ok(h)
}
