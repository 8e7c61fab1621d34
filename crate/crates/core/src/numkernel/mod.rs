//! Dense `f64` tensors with a reverse-mode tape.
//!
//! Every differentiable operation is recorded on a [`Tape`] in execution
//! order; [`Tape::backward`] walks the records in exact reverse order and
//! accumulates gradients into the nodes that require them. Constants never
//! receive gradient, so inputs that are not on the graph (for instance
//! patches dropped by a retention plan) stay at zero.
//!
//! Matrix products report their multiply-accumulate work to a per-thread
//! counter (see [`flops`]) so analytic cost figures can be checked against
//! what actually executed.

pub mod flops;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Layer-norm epsilon added to the variance.
pub const LAYERNORM_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("masked softmax row {row} has no unmasked position")]
    FullyMasked { row: usize },
    #[error("index {index} out of range in {op} (extent {extent})")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward needs a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

impl KernelError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        KernelError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

/// Tanh approximation of GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over `logits` restricted to positions where `live` is true;
/// masked positions come out as exactly zero.
pub fn masked_softmax_row(logits: &[f64], live: &[bool], out: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (&z, &m) in logits.iter().zip(live) {
        if m && z > max {
            max = z;
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut total = 0.0;
    for ((o, &z), &m) in out.iter_mut().zip(logits).zip(live) {
        *o = if m { (z - max).exp() } else { 0.0 };
        total += *o;
    }
    let inv = 1.0 / total;
    out.iter_mut().for_each(|o| *o *= inv);
    true
}
