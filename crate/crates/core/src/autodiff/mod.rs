//! Reverse-mode automatic differentiation over dense row-major tensors, plus
//! the optimizer pieces shared by supervised training and RL.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_probes, FdProbe, FdReport};
pub use optim::{adam_step, clip_grad_norm, cosine_lr, AdamConfig, AdamState};
pub use params::{BoundParams, ParamGrads, ParamStore};
pub(crate) use params::{accumulate, scale_grads};
pub use tape::{Gradients, NodeId, Primitive, Tape, Var, COSINE_MIN_NORM, LAYER_NORM_EPS};
pub use tensor::Tensor;

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("backward root must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by backward")]
    TapeConsumed,
    #[error("every position is masked out")]
    EmptyMask,
    #[error("{which} row {row} has near-zero norm")]
    ZeroNorm { which: &'static str, row: usize },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("loss function is not deterministic: {0}")]
    NonDeterministic(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Mean next-token negative log-likelihood over masked-in rows of
/// `logits [T x V]`.
pub fn cross_entropy<'t, S: Scalar>(
    logits: Var<'t, S>,
    targets: &[usize],
    mask: &[bool],
) -> Result<Var<'t, S>, AutodiffError> {
    logits
        .tape()
        .apply(Primitive::CrossEntropy { targets: targets.to_vec(), mask: mask.to_vec() }, &[logits])
}

/// Mean over rows of `1 - cos(pred_j, target_j)`, in `[0, 2]`.
pub fn cosine_alignment_loss<'t, S: Scalar>(pred: Var<'t, S>, target: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
    pred.tape().apply(Primitive::CosineAlignment, &[pred, target])
}

#[cfg(test)]
mod tests;
