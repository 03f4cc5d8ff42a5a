//! Character-level two-dimensional sentence tensors (Sent2Matrix) with zero,
//! cyclic and serpentine padding, and a small `f64` training engine for the
//! convolutional classifiers built on top of them.

pub mod embedding;
pub mod error;
pub mod harness;
pub mod models;
pub mod nn;
pub mod padding;
pub mod text;

pub use error::{Error, Result};
