//! Tensors, forward primitives, and reverse-mode gradients over a fixed op
//! set.
//!
//! Everything is generic over [`Scalar`] so the same graph can run in `f32`
//! for training and `f64` for finite-difference checks.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod param;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, GRAD_CHECK_STEP};
pub use ops::{
    batch_norm, conv2d, global_avg_pool, l2_normalize_rows, linear, relu, softmax_cross_entropy, BnMode, BnState,
    BN_EPS, BN_MOMENTUM,
};
pub use param::{ParamId, ParamKind, ParamStore, ParamTensor};
pub use tape::{BatchStats, CustomOp, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
