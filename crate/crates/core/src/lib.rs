//! Desk-scale semi-supervised semantic segmentation.
//!
//! A mean-teacher trainer with Monte-Carlo-dropout uncertainty estimation,
//! multi-scale uncertainty-masked feature consistency, and cross
//! teacher-student channel attention, built on an in-crate reverse-mode
//! autodiff tensor library. Ships with a procedural synthetic benchmark and
//! a full segmentation metric suite so every component is testable on a CPU
//! in minutes.
//!
//! Math is generic over the scalar type ([`scalar::Scalar`]): training runs
//! in `f32`, gradient checks in `f64`.

pub mod array;
pub mod augment;
pub mod checkpoint;
pub mod ctsa;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod teacher;
pub mod trainer;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use array::Array;
pub use error::{Error, Result};
pub use rng::Rng64;
pub use tensor::{Tape, TensorRef};

/// Training-precision tape.
pub type Tape32 = Tape<f32>;
/// Gradient-check-precision tape.
pub type Tape64 = Tape<f64>;
