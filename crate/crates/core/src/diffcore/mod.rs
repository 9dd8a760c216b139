//! Minimal reverse-mode differentiable arrays: tensors, a per-step tape,
//! gradient checking and AdamW.

mod adamw;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use gradcheck::{
    grad_check, grad_check_many, grad_check_params, max_relative_error, max_relative_error_floor, numeric_gradient,
    GradCheckReport, ParamCheck,
};
pub use params::{ParamId, ParamStore};
pub use tape::{ConvMode, CustomOp, Elementwise, Tape, Var, DEPTHWISE_KERNEL};
pub use tensor::{Element, Tensor};

pub(crate) use tensor::read_u32;
