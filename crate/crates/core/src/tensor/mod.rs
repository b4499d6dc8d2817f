//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain shape + row-major value buffer. [`Tape`] records
//! operations during a forward pass and replays them in reverse for
//! gradients; a tape is rebuilt per forward pass, never reused. Learned
//! parameters live in a [`ParamStore`] and are bound onto a tape at the start
//! of each pass.

mod check;
mod params;
mod rnn;
mod tape;

#[cfg(test)]
mod tests_ops;

pub use check::{
    check_gradients, check_param_gradients, numeric_gradient, probe_all_params, random_tensor,
    relative_error, GradCheck,
};
pub use params::{adam_step, AdamConfig, AdamState, ParamStore};
pub use rnn::{lstm_cell, LstmCellIds, LstmGateIds};
pub use tape::{Tape, TensorId};

use crate::error::{Error, Result};

/// Dense multi-dimensional value, 64-bit floats, row-major.
///
/// Rank 0 (`shape == []`) is a scalar holding exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Single stored value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn trailing_product(shape: &[usize], from_axis: usize) -> usize {
        shape[from_axis..].iter().product()
    }
}

/// Check that two shapes are identical, otherwise a descriptive error.
pub(crate) fn require_same_shape(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: {a:?} vs {b:?}")));
    }
    Ok(())
}
