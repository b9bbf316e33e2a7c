//! Layer-level compositions of tape primitives.

use super::{Tape, Var};
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;
pub const IN_EPS: f64 = 1e-5;

/// `x · w + b` for `x: [m × din]`, `w: [din × dout]`, `b: [dout]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row_bias(y, b)
}

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub w: Var,
    pub b: Var,
}

impl LinearParams {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        linear(tape, x, self.w, self.b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: Var,
    pub beta: Var,
}

impl NormParams {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta, LN_EPS)
    }
}

/// Query/key/value/output projections of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
}

/// Multi-head self-attention over the rows of `x: [m × d]`.
pub fn multi_head_self_attention(tape: &mut Tape, x: Var, p: &AttentionParams, heads: usize) -> Result<Var> {
    let q = p.q.apply(tape, x)?;
    let k = p.k.apply(tape, x)?;
    let v = p.v.apply(tape, x)?;
    let ctx = tape.attention(q, k, v, heads)?;
    p.o.apply(tape, ctx)
}

/// Two projections around a GELU.
#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub up: LinearParams,
    pub down: LinearParams,
}

pub fn feed_forward(tape: &mut Tape, x: Var, p: &FeedForwardParams) -> Result<Var> {
    let h = p.up.apply(tape, x)?;
    let h = tape.gelu(h);
    p.down.apply(tape, h)
}
