//! Minimal reverse-mode tensor engine: the ops the encoders need, AdamW,
//! gradient clipping, and a finite-difference gradient checker.

pub mod gemm;
pub mod gradcheck;
pub mod optim;
pub mod params;
mod real;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_split, GradCheck};
pub use optim::{clip_gradients, global_grad_norm, AdamW};
pub use params::{Bound, Init, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tape::{log_sigmoid, sigmoid, CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
