//! LSTM cell on the tape.
//!
//! Gate layout: `i, f, o = sigmoid(W[x;h] + b)`, `g = tanh(W[x;h] + b)`,
//! `c' = f*c + i*g`, `h' = o * tanh(c')`, with a separate weight matrix and
//! bias per gate.

use crate::tape::{Activation, Tape, TensorError, TensorId};

/// Per-gate weights `(in+d) x d` and biases `1 x d`, already on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_i: TensorId,
    pub b_i: TensorId,
    pub w_f: TensorId,
    pub b_f: TensorId,
    pub w_g: TensorId,
    pub b_g: TensorId,
    pub w_o: TensorId,
    pub b_o: TensorId,
}

fn gate(
    tape: &mut Tape,
    z: TensorId,
    w: TensorId,
    b: TensorId,
    act: Activation,
) -> Result<TensorId, TensorError> {
    let lin = tape.matmul(z, w)?;
    let biased = tape.add(lin, b)?;
    tape.activation(biased, act)
}

/// One cell step. `x` is `1 x in`, `h` and `c` are `1 x d`.
pub fn lstm_step(
    tape: &mut Tape,
    x: TensorId,
    h: TensorId,
    c: TensorId,
    params: &LstmParams,
) -> Result<(TensorId, TensorId), TensorError> {
    let z = tape.concat_cols(&[x, h])?;
    let i = gate(tape, z, params.w_i, params.b_i, Activation::Sigmoid)?;
    let f = gate(tape, z, params.w_f, params.b_f, Activation::Sigmoid)?;
    let g = gate(tape, z, params.w_g, params.b_g, Activation::Tanh)?;
    let o = gate(tape, z, params.w_o, params.b_o, Activation::Sigmoid)?;

    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let c_act = tape.tanh(c_next)?;
    let h_next = tape.mul(o, c_act)?;
    Ok((h_next, c_next))
}
