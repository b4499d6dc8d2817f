//! LSTM cell assembled from tape primitives.

use super::{Tape, TensorId};
use crate::error::Result;

/// Tape handles for one cell's weights: per gate, an input map `w`, a
/// recurrent map `u`, and a bias `b` (rank-1).
#[derive(Clone, Copy)]
pub struct LstmGateIds {
    pub w: TensorId,
    pub u: TensorId,
    pub b: TensorId,
}

#[derive(Clone, Copy)]
pub struct LstmCellIds {
    pub input: LstmGateIds,
    pub forget: LstmGateIds,
    pub output: LstmGateIds,
    pub cell: LstmGateIds,
}

fn gate_preact(tape: &mut Tape, g: &LstmGateIds, x: TensorId, h: TensorId) -> Result<TensorId> {
    let wx = tape.matmul(g.w, x)?;
    let uh = tape.matmul(g.u, h)?;
    let s = tape.add(wx, uh)?;
    let hdim = tape.value(s).shape()[0];
    let sflat = tape.reshape(s, vec![hdim, 1])?;
    let biased = tape.add_col(sflat, g.b)?;
    Ok(biased)
}

/// One step: `x [I,1]`, `h [H,1]`, `c [H,1]` -> `(h', c')`.
///
/// Standard gates: i, f, o sigmoid; g tanh; `c' = f*c + i*g`,
/// `h' = o * tanh(c')`.
pub fn lstm_cell(
    tape: &mut Tape,
    x: TensorId,
    h: TensorId,
    c: TensorId,
    ids: &LstmCellIds,
) -> Result<(TensorId, TensorId)> {
    let i_pre = gate_preact(tape, &ids.input, x, h)?;
    let f_pre = gate_preact(tape, &ids.forget, x, h)?;
    let o_pre = gate_preact(tape, &ids.output, x, h)?;
    let g_pre = gate_preact(tape, &ids.cell, x, h)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let o = tape.sigmoid(o_pre);
    let g = tape.tanh(g_pre);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}
