//! Data-free knowledge distillation for dense classifiers.
//!
//! A teacher is trained on the original data; compact activation records
//! (per-class Gaussian statistics or graph-Fourier compressed activation
//! signals) are computed from it; a surrogate dataset is rebuilt by optimizing
//! input noise until the teacher's activations match the records; a smaller
//! student is then distilled from the teacher on the surrogate data.

// `!(x > 0.0)` is the intended NaN-rejecting form throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod nn;
pub mod reconstruct;
pub mod pipeline;
pub mod records;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};
