use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DenseNetwork, Real};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Per-layer multiplicative masks, already scaled by `1 / (1 - rate)`.
/// A mask has one row (shared by the whole batch) or one row per sample.
pub(crate) type LayerMasks<F> = Vec<Option<Array2<F>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropoutMode {
    Off,
    Sampled,
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
    pub mode: DropoutMode,
    /// One entry per layer; `None` for layers that are never dropped.
    pub masks: Option<Vec<Option<Vec<bool>>>>,
}

impl DropoutSpec {
    pub fn off() -> Self {
        Self {
            rate: 0.0,
            mode: DropoutMode::Off,
            masks: None,
        }
    }

    pub fn sampled(rate: f64) -> Result<Self> {
        check_rate(rate)?;
        Ok(Self {
            rate,
            mode: DropoutMode::Sampled,
            masks: None,
        })
    }

    fn keep_scale(&self) -> f64 {
        1.0 / (1.0 - self.rate)
    }

    pub(crate) fn layer_masks<F: Real>(&self, net: &DenseNetwork<F>) -> Result<LayerMasks<F>> {
        match self.mode {
            DropoutMode::Off => Ok(Vec::new()),
            DropoutMode::Sampled => Err(Error::usage(
                "sampled dropout must be materialized with sample_dropout before a forward pass",
            )),
            DropoutMode::Frozen => {
                let masks = self
                    .masks
                    .as_ref()
                    .ok_or_else(|| Error::usage("frozen dropout without masks"))?;
                if masks.len() != net.layer_count() {
                    return Err(Error::shape(format!(
                        "{} dropout masks for {} layers",
                        masks.len(),
                        net.layer_count()
                    )));
                }
                let scale = F::of(self.keep_scale());
                masks
                    .iter()
                    .zip(net.layers())
                    .enumerate()
                    .map(|(k, (mask, layer))| {
                        mask.as_ref()
                            .map(|m| {
                                if m.len() != layer.out_dim() {
                                    return Err(Error::shape(format!(
                                        "layer {k}: mask length {} != width {}",
                                        m.len(),
                                        layer.out_dim()
                                    )));
                                }
                                Ok(Array2::from_shape_fn((1, m.len()), |(_, j)| {
                                    if m[j] {
                                        scale
                                    } else {
                                        F::zero()
                                    }
                                }))
                            })
                            .transpose()
                    })
                    .collect()
            }
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::usage(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Draws one Bernoulli(1 - rate) keep-mask per unit for every layer except the
/// output layer and returns the spec in frozen mode.
///
/// `layer_widths` are the output widths of the network's layers, in order.
pub fn sample_dropout(spec: &DropoutSpec, layer_widths: &[usize], seed: u64) -> Result<DropoutSpec> {
    check_rate(spec.rate)?;
    let mut rng = rng_for(seed, &[0xD0]);
    let n = layer_widths.len();
    let masks = layer_widths
        .iter()
        .enumerate()
        .map(|(k, &w)| (k + 1 < n).then(|| (0..w).map(|_| !rng.gen_bool(spec.rate)).collect()))
        .collect();
    Ok(DropoutSpec {
        rate: spec.rate,
        mode: DropoutMode::Frozen,
        masks: Some(masks),
    })
}

/// Independent masks for every sample of a training batch (hidden layers only).
pub(crate) fn sample_row_masks<F: Real, R: Rng + ?Sized>(
    rate: f64,
    net: &DenseNetwork<F>,
    batch: usize,
    rng: &mut R,
) -> LayerMasks<F> {
    if rate == 0.0 {
        return Vec::new();
    }
    let scale = F::of(1.0 / (1.0 - rate));
    let n = net.layer_count();
    net.layers()
        .iter()
        .enumerate()
        .map(|(k, layer)| {
            (k + 1 < n).then(|| {
                Array2::from_shape_simple_fn((batch, layer.out_dim()), || {
                    if rng.gen_bool(rate) {
                        F::zero()
                    } else {
                        scale
                    }
                })
            })
        })
        .collect()
}
