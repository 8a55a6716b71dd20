//! Dense tensor arithmetic with reverse-mode automatic differentiation.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{grad_check, relative_error, ElementCheck, GradCheckOptions, GradCheckReport};
pub use ops::{
    batch_norm_eval, batch_norm_train, broadcast_shapes, concat_channels, constant_like, conv2d,
    interpolate, layer_norm, matmul, pad_replicate, resize_tensor, sigmoid, softplus, BatchStats,
    Binary, ConvOpts, InterpMode, Unary,
};
pub(crate) use ops::matmul_raw;
pub use tape::{Gradients, Tape, Var};

/// Elementwise unary op by kind.
pub fn apply_unary(kind: Unary, x: Var<'_>) -> Var<'_> {
    x.unary(kind)
}

/// Elementwise binary op by kind, with broadcasting.
pub fn apply_binary<'t>(kind: Binary, a: Var<'t>, b: Var<'t>) -> crate::Result<Var<'t>> {
    a.binary(kind, b)
}

/// Populates gradients for every differentiable leaf reachable from `loss`.
pub fn backward<'t>(loss: Var<'t>) -> crate::Result<Gradients> {
    loss.tape().backward(loss)
}
