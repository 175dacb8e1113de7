//! Sparse local patch transformer for landmark regression.
//!
//! A self-contained f64 stack: a reverse-mode tensor engine, patch geometry,
//! a small convolutional backbone, the patch-token attention model, the
//! coarse-to-fine cascade trainer, evaluation metrics, and dataset/checkpoint
//! handling. Everything is deterministic under a fixed seed.

// `!(x > 0.0)` is used deliberately where NaN must be rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod cascade;
pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{backward, Tensor};
