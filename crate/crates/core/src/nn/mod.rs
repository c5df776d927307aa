//! Dense-network engine: forward passes with temperature and dropout masks,
//! reverse-mode gradients with respect to parameters and inputs, and Adam.

mod adam;
pub mod checkpoint;
mod dropout;
mod grad;
mod network;

use ndarray::NdFloat;
use num_traits::FromPrimitive;

pub use adam::AdamState;
pub use dropout::{sample_dropout, DropoutMode, DropoutSpec};
pub use grad::{grad_input, grad_input_batch, grad_params, ActivationMatch, LossSpec, MatchTerm, ParamGrads, Slot};
pub use network::{argmax_rows, parse_widths, BatchTrace, DenseLayer, DenseNetwork, ForwardTrace, Nonlinearity};

pub(crate) use dropout::{sample_row_masks, LayerMasks};
pub(crate) use grad::{grad_input_masked, grad_params_masked};

/// Floating-point element type of a network. Training runs in `f32`,
/// gradient checks in `f64`.
pub trait Real: NdFloat + FromPrimitive {
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}
