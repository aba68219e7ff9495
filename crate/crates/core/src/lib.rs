//! CPU deep-learning micro-framework for multi-label histopathology tile
//! classification.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense N-D tensors, a reverse-mode autodiff tape, the
//!   finite-difference gradient checker and the SGD optimizer
//! - [`nn`] — differentiable layers (linear, convolutions, norms,
//!   activations, dropout, pooling)
//! - [`attention`] — window partitioning, cyclic shifts, relative position
//!   bias, masked windowed multi-head self-attention and its complexity
//!   estimator
//! - [`model`] — the assembled classifier: patch embedding, four
//!   hierarchical attention stages with optional local depthwise-conv
//!   feedforward (LDC) and channel recalibration (FR) per stage, patch
//!   merging, a residual classification head, the summed per-label loss,
//!   and the checkpoint format
//! - [`data`] — slide tiling, overlap multi-labeling, class balancing,
//!   split generation, augmentations and the JSONL tile manifest
//! - [`train`] — the training loop with logging, checkpointing and resume
//! - [`eval`] — per-label metrics, ROC/AUC with micro/macro averaging,
//!   tumor-stroma ratio, round aggregation and SVG plots

pub mod attention;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::CounterRng;
pub use tensor::{Element, Tape, Tensor, Var};
