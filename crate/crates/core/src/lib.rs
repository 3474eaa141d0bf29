//! Label-attention medical code prediction from clinical notes, with two
//! evidence extractors (attention peaks and distilled linear students) and
//! the tooling for a human-graded evaluation of those explanations.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode tape, Adam.
//! - [`corpus`]: notes, codes, tokenization, JSONL files, synthetic data.
//! - [`model`]: the network, its parameters and checkpoints.
//! - [`train`]: training loop, thresholding and multi-label metrics.
//! - [`explain`]: attention snippets, distillation and fidelity.
//! - [`harness`]: question sheets, ratings, agreement and baselines.
//! - [`gradcheck`]: finite-difference checks of every differentiable op.

pub mod corpus;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
