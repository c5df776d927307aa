//! Oracles shared by the integration tests and the acceptance harness. Each
//! check panics with a diagnostic on failure.
#![allow(dead_code)]

pub mod gradients;
pub mod records;
pub mod spectral;
