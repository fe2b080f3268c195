//! Layer-level building blocks composed from tape primitives.

use crate::error::{MceError, Result};
use crate::tensor::{Tape, Var};

/// `x W + b` for a batch `x` of shape `B×I`.
pub fn dense_forward(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

pub fn activation_relu(tape: &mut Tape, x: Var) -> Var {
    tape.relu(x)
}

/// Mean cross-entropy of `logits` (`B×C`) against class indices.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let n = labels.len().max(1) as f64;
    tape.cross_entropy(logits, labels, vec![1.0 / n; labels.len()])
}

pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    tape.mse(a, b)
}

/// Dense layer parameters bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

impl DenseVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        dense_forward(tape, x, self.w, self.b)
    }
}

/// Self-attention block parameters: query/key/value/output projections and
/// a two-layer feed-forward network.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: DenseVars,
    pub key: DenseVars,
    pub value: DenseVars,
    pub output: DenseVars,
    pub ffn_in: DenseVars,
    pub ffn_out: DenseVars,
}

/// Multi-head self-attention over consecutive blocks of `block` rows,
/// followed by a feed-forward network with a residual around it:
///
/// ```text
/// a = MHSA(x, x, x)
/// y = FFN(a) + a
/// ```
///
/// `x` has shape `(B·block)×D`; each block of rows attends only within
/// itself. The feature width must divide evenly into `heads`.
pub fn attention_block(
    tape: &mut Tape,
    x: Var,
    block: usize,
    heads: usize,
    params: &AttentionVars,
) -> Result<Var> {
    let width = tape.value(x).cols();
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(MceError::config(
            "model.heads",
            format!("feature width {width} is not divisible by {heads} heads"),
        ));
    }
    let head_dim = width / heads;
    let q = params.query.forward(tape, x)?;
    let k = params.key.forward(tape, x)?;
    let v = params.value.forward(tape, x)?;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let start = h * head_dim;
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, start, head_dim)?,
                tape.slice_cols(k, start, head_dim)?,
                tape.slice_cols(v, start, head_dim)?,
            )
        };
        let scores = tape.block_matmul_nt(qh, kh, block)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores)?;
        outputs.push(tape.block_matmul(weights, vh, block)?);
    }
    let merged = if heads == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)?
    };
    let attended = params.output.forward(tape, merged)?;

    let hidden = params.ffn_in.forward(tape, attended)?;
    let hidden = tape.relu(hidden);
    let ffn = params.ffn_out.forward(tape, hidden)?;
    tape.add(ffn, attended)
}
