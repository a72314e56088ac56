//! Task-balanced distillation for dense object detectors.
//!
//! The crate provides a small reverse-mode autodiff engine over dense grids
//! and, built on it, the harmony-score distillation loss, task-decoupled
//! feature distillation with a learned task-weight generator, a synthetic
//! dense detector to exercise them, and the measurement procedures used to
//! compare teacher and student predictions.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod feature_distill;
pub mod geometry;
pub mod harmony;
pub mod params;
pub mod task_signals;
pub mod tensor;
pub mod toy_detector;
pub mod verification;

pub use error::{Error, Result};
pub use tensor::Tensor;
