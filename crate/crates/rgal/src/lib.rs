//! Data-free knowledge transfer with relation-guided adversarial triplet
//! losses.
//!
//! A frozen teacher is the only source of supervision: a generator learns to
//! synthesize samples that are diverse within each class and confusable
//! across classes, and a student is trained purely on those samples. The
//! crate ships its own dense-f64 reverse-mode engine so that every loss and
//! model used in the loop is exactly differentiable and checkable.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod runner;
pub mod sampling;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
