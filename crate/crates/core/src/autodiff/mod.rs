//! Minimal dense-tensor automatic differentiation: reverse-mode gradients,
//! forward-mode directional derivatives, exact and stochastic Jacobian
//! traces, and the Adam optimizer with its learning-rate schedule.

pub mod adam;
pub mod check;
pub mod tape;
pub mod tensor;
pub mod trace;

pub use adam::{adam_step, lr_schedule, AdamHyper, AdamState};
pub use tape::{grad, jvp, tape_active, value_and_grad, with_tape, Mode};
pub use tensor::{Activation, Tensor};
pub use trace::{hutchinson_trace, hutchinson_trace_with, jacobian_trace_exact, ProbeDist};
