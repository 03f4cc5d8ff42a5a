//! Dense `f64` tensors, reverse-mode gradients, Adam and a finite-difference
//! gradient checker.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{grad_check, layer_family_checks, GradCheckReport};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
