//! Continual learning with selective dual-teacher feature distillation.
//!
//! A student encoder is fine-tuned over a sequence of domains while
//! distilling from two frozen teachers: the original pre-trained encoder
//! and the most recently fine-tuned one. A sigmoid of the teachers' feature
//! discrepancy decides, per unlabeled reference sample, which teacher to
//! align with. The crate also ships the rotated-sequence evaluation
//! protocol, its three metrics, and a CSV-emitting experiment CLI.

// Negated float comparisons such as `!(x > 0.0)` are load-bearing: they also
// reject NaN. Index loops mirror the analytic gradient formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod data;
pub mod distillation;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod protocol;
mod seeds;
pub mod selection;

pub use error::{Error, Result};
