//! Composite operations assembled from tape primitives.

use super::{dim_err, Result, Tape, Var};

/// Projection weights of one self-attention layer; every matrix is `[D, D]`
/// and every bias `[D]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Result of [`attention_block`]: the residual output and the row-stochastic
/// attention matrix it was computed with.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Var,
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row_bias(xw, b)
}

/// Single-head self-attention with output projection and residual:
/// `x + (softmax(Q K^T / sqrt(D)) V) W_o + b_o`.
pub fn attention_block(tape: &mut Tape, x: Var, p: &AttentionParams) -> Result<AttentionOutput> {
    let (n, d) = match tape.shape(x) {
        &[n, d] => (n, d),
        s => return dim_err("attention_block", format!("expected [tokens, width], got {s:?}")),
    };
    if n == 0 || d == 0 {
        return dim_err("attention_block", "empty token set or zero width");
    }
    if tape.shape(p.wq) != [d, d] {
        return dim_err(
            "attention_block",
            format!("projection {:?} does not match width {d}", tape.shape(p.wq)),
        );
    }
    let q = affine(tape, x, p.wq, p.bq)?;
    let k = affine(tape, x, p.wk, p.bk)?;
    let v = affine(tape, x, p.wv, p.bv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax_rows(scores)?;
    let mixed = tape.matmul(weights, v)?;
    let projected = affine(tape, mixed, p.wo, p.bo)?;
    let out = tape.add(x, projected)?;
    Ok(AttentionOutput { out, weights })
}
