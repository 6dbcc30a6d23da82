//! Minimal dense-tensor arithmetic with reverse-mode automatic
//! differentiation, an Adam optimizer, gradient checking and a named-array
//! checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{ArrayData, Checkpoint, NamedArray};
pub use error::{NumError, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Objective, Precision};
pub use rng::SeededRng;
pub use scalar::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
