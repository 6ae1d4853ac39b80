//! Concurrent classifier error detection.
//!
//! A small random forest watches the softmax output of a larger classifier
//! and flags inferences that look like they were corrupted by a transient
//! parameter bit flip. Flagged inferences are re-run once.
//!
//! The pipeline, bottom-up:
//!
//! * [`numerics`], [`model`]: the main classifier and its flat parameter buffer.
//! * [`trainer`]: synthetic tasks and SGD training.
//! * [`fault`]: single-bit transient faults and fast fault replay.
//! * [`signals`]: balanced clean/error check-signal datasets.
//! * [`detector`]: the random forest, scoring and threshold calibration.
//! * [`runtime`]: detect, re-run once, accept.
//! * [`eval`]: detection-vs-budget tables, confusion counts, timing.

pub mod detector;
pub mod error;
pub mod eval;
pub mod fault;
pub mod model;
pub mod numerics;
pub mod runtime;
pub mod signals;
pub mod trainer;

pub use error::{CcedError, Result};
