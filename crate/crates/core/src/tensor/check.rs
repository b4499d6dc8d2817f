//! Central finite-difference gradient checking.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorId};
use crate::error::Result;

/// `|a - n| / max(|a|, |n|, floor)`: symmetric relative error with an
/// absolute floor so near-zero gradients compare sensibly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Central finite differences of a scalar function of flat inputs.
pub fn numeric_gradient<F>(inputs: &[Tensor], which: usize, mut f: F, step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut grads = vec![0.0; inputs[which].len()];
    let mut work: Vec<Tensor> = inputs.to_vec();
    for j in 0..grads.len() {
        let orig = work[which].data()[j];
        work[which].data_mut()[j] = orig + step;
        let hi = f(&work)?;
        work[which].data_mut()[j] = orig - step;
        let lo = f(&work)?;
        work[which].data_mut()[j] = orig;
        grads[j] = (hi - lo) / (2.0 * step);
    }
    Ok(grads)
}

/// Builder-style gradient check: the closure builds a graph from leaves and
/// returns any output tensor, which the harness contracts to a scalar with a
/// fixed random projection so every output element is exercised.
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

impl GradCheck {
    pub fn with_seed(seed: u64) -> Self {
        GradCheck {
            seed,
            ..Default::default()
        }
    }

    pub fn tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    /// Check analytic gradients of `build` against finite differences for
    /// every element of every input. Returns the worst relative error.
    pub fn run<F>(&self, inputs: &[Tensor], build: F) -> Result<f64>
    where
        F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
    {
        let project = |tape: &mut Tape, ids: &[TensorId], proj: &Tensor| -> Result<f64> {
            let out = build(tape, ids)?;
            let p = tape.leaf(proj.clone());
            let prod = tape.mul(out, p)?;
            let loss = tape.sum(prod);
            Ok(tape.value(loss).item())
        };

        // Fixed projection vector, sized from a dry run.
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids)?;
        let out_shape = tape.value(out).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xA5A5_5A5A);
        let proj = Tensor::new(
            out_shape.clone(),
            (0..out_shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )?;

        // Analytic pass.
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids)?;
        let p = tape.leaf(proj.clone());
        let prod = tape.mul(out, p)?;
        let loss = tape.sum(prod);
        tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();

        let mut worst = 0.0f64;
        for which in 0..inputs.len() {
            let numeric = numeric_gradient(
                inputs,
                which,
                |ts| {
                    let mut tape = Tape::new();
                    let ids: Vec<TensorId> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
                    project(&mut tape, &ids, &proj)
                },
                self.step,
            )?;
            for (j, (&a, &n)) in analytic[which].iter().zip(&numeric).enumerate() {
                let err = relative_error(a, n);
                if err > worst {
                    worst = err;
                }
                if err > self.tolerance {
                    return Err(crate::error::Error::Numeric(format!(
                        "gradient check failed: input {which} element {j}: analytic {a:.9e}, numeric {n:.9e}, rel err {err:.3e}"
                    )));
                }
            }
        }
        Ok(worst)
    }
}

/// Convenience wrapper for the common case.
pub fn check_gradients<F>(inputs: &[Tensor], seed: u64, tolerance: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    GradCheck {
        seed,
        tolerance,
        ..Default::default()
    }
    .run(inputs, build)
}

/// Finite-difference check of store-bound parameters against the scattered
/// analytic gradients of a scalar loss. `probes` selects (name, element)
/// pairs to difference. The builder may update batch-norm running buffers;
/// they do not feed back into a train-mode loss.
pub fn check_param_gradients<F>(
    store: &mut super::ParamStore,
    probes: &[(String, usize)],
    step: f64,
    tolerance: f64,
    mut build: F,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &mut super::ParamStore) -> Result<TensorId>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    if tape.value(loss).len() != 1 {
        return Err(crate::error::Error::invalid(
            "check_param_gradients: loss must be scalar",
        ));
    }
    tape.backward(loss)?;
    tape.scatter_grads(store);
    let analytic: Vec<f64> = probes
        .iter()
        .map(|(name, j)| {
            store
                .grad_of(name)
                .unwrap_or_else(|| panic!("unknown parameter {name:?}"))[*j]
        })
        .collect();

    let mut eval = |store: &mut super::ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store)?;
        Ok(tape.value(loss).item())
    };

    let mut worst = 0.0f64;
    for ((name, j), &a) in probes.iter().zip(&analytic) {
        let orig = store.get(name).expect("probed parameter").data()[*j];
        store.get_mut(name).unwrap().data_mut()[*j] = orig + step;
        let hi = eval(store)?;
        store.get_mut(name).unwrap().data_mut()[*j] = orig - step;
        let lo = eval(store)?;
        store.get_mut(name).unwrap().data_mut()[*j] = orig;
        let n = (hi - lo) / (2.0 * step);
        let err = relative_error(a, n);
        worst = worst.max(err);
        if err > tolerance {
            return Err(crate::error::Error::Numeric(format!(
                "param gradient check failed at {name}[{j}]: analytic {a:.9e}, numeric {n:.9e}, rel err {err:.3e}"
            )));
        }
    }
    Ok(worst)
}

/// Deterministic probe set: up to `per_param` evenly spaced elements from
/// every trainable parameter.
pub fn probe_all_params(store: &super::ParamStore, per_param: usize) -> Vec<(String, usize)> {
    let mut probes = Vec::new();
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        if !store.is_trainable(&name) {
            continue;
        }
        let len = store.get(&name).expect("named parameter").len();
        let take = per_param.min(len);
        for k in 0..take {
            probes.push((name.clone(), k * len / take));
        }
    }
    probes
}

/// Random tensor with entries uniform in `(lo, hi)`, avoiding the region
/// within `margin` of zero so kinked ops (ReLU) stay differentiable at the
/// probe points.
pub fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng, margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mut v: f64 = rng.gen_range(-1.0..1.0);
            if v.abs() < margin {
                v = if v >= 0.0 { v + margin } else { v - margin };
            }
            v
        })
        .collect();
    Tensor::new(shape, data).expect("consistent shape")
}
