use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dropout::{DropoutSpec, LayerMasks};
use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Nonlinearity {
    Identity,
    Relu,
    Softmax,
}

impl Nonlinearity {
    pub fn tag(self) -> u8 {
        match self {
            Nonlinearity::Identity => 0,
            Nonlinearity::Relu => 1,
            Nonlinearity::Softmax => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Nonlinearity::Identity),
            1 => Some(Nonlinearity::Relu),
            2 => Some(Nonlinearity::Softmax),
            _ => None,
        }
    }
}

/// One fully-connected layer: `nonlinearity(weight · x + bias)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<F> {
    /// `[out × in]`
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub nonlinearity: Nonlinearity,
}

impl<F: Real> DenseLayer<F> {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// A chain of dense layers. Only the last layer may carry a softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNetwork<F = f32> {
    layers: Vec<DenseLayer<F>>,
}

/// Activations of a single input.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<F> {
    pub input: Array1<F>,
    pub pre_activations: Vec<Array1<F>>,
    pub post_activations: Vec<Array1<F>>,
}

/// Activations of a batch, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTrace<F> {
    pub input: Array2<F>,
    pub pre_activations: Vec<Array2<F>>,
    pub post_activations: Vec<Array2<F>>,
}

impl<F: Real> BatchTrace<F> {
    pub fn output(&self) -> &Array2<F> {
        self.post_activations.last().expect("network has layers")
    }

    pub fn row(&self, i: usize) -> ForwardTrace<F> {
        ForwardTrace {
            input: self.input.row(i).to_owned(),
            pre_activations: self.pre_activations.iter().map(|a| a.row(i).to_owned()).collect(),
            post_activations: self.post_activations.iter().map(|a| a.row(i).to_owned()).collect(),
        }
    }
}

impl<F: Real> ForwardTrace<F> {
    pub fn output(&self) -> &Array1<F> {
        self.post_activations.last().expect("network has layers")
    }
}

/// Parses an architecture string such as `784-1200-1200-10`.
pub fn parse_widths(spec: &str) -> Result<Vec<usize>> {
    let widths = spec
        .split('-')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .ok()
                .filter(|&w| w > 0)
                .ok_or_else(|| Error::Config(format!("bad layer width `{w}` in architecture `{spec}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if widths.len() < 2 {
        return Err(Error::Config(format!(
            "architecture `{spec}` needs an input width and at least one layer"
        )));
    }
    Ok(widths)
}

impl<F: Real> DenseNetwork<F> {
    pub fn new(layers: Vec<DenseLayer<F>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("network needs at least one layer"));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::shape(format!(
                    "layer {k}: bias length {} != out dim {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if k > 0 && layer.in_dim() != layers[k - 1].out_dim() {
                return Err(Error::shape(format!(
                    "layer {k}: in dim {} != previous out dim {}",
                    layer.in_dim(),
                    layers[k - 1].out_dim()
                )));
            }
            if layer.nonlinearity == Nonlinearity::Softmax && k + 1 != layers.len() {
                return Err(Error::shape(format!("layer {k}: only the final layer may be softmax")));
            }
            if !layer.weight.iter().chain(layer.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::numeric(format!("layer {k}: non-finite parameters")));
            }
        }
        Ok(Self { layers })
    }

    /// ReLU hidden layers and a softmax output, Glorot-uniform weights and zero biases.
    pub fn from_widths<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::shape(format!("invalid widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    F::of(rng.gen_range(-limit..limit))
                });
                DenseLayer {
                    weight,
                    bias: Array1::zeros(fan_out),
                    nonlinearity: if k + 1 == n {
                        Nonlinearity::Softmax
                    } else {
                        Nonlinearity::Relu
                    },
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer<F>] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    /// Input width followed by every layer's output width.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weight then bias of every layer, in layer order.
    pub fn parameters_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &mut self.layers {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn parameter_shapes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.len(), l.bias.len()])
            .collect()
    }

    pub fn cast<G: Real>(&self) -> DenseNetwork<G> {
        let conv = |v: &F| G::of(v.to_f64().expect("finite"));
        DenseNetwork {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: l.weight.map(conv),
                    bias: l.bias.map(conv),
                    nonlinearity: l.nonlinearity,
                })
                .collect(),
        }
    }

    /// Copy whose final layer computes `nonlinearity((W·x + b) / scale_divisor)`.
    /// Used to swap the softmax for ReLU or identity while keeping the `L/T` scaling.
    pub fn with_top_layer(&self, nonlinearity: Nonlinearity, scale_divisor: F) -> Self {
        let mut net = self.clone();
        let top = net.layers.last_mut().expect("non-empty");
        if scale_divisor != F::one() {
            top.weight.mapv_inplace(|w| w / scale_divisor);
            top.bias.mapv_inplace(|b| b / scale_divisor);
        }
        top.nonlinearity = nonlinearity;
        net
    }

    pub fn forward(
        &self,
        input: ArrayView1<F>,
        temperature: F,
        dropout: &DropoutSpec,
    ) -> Result<ForwardTrace<F>> {
        let batch = input.insert_axis(Axis(0));
        Ok(self.forward_batch(batch, temperature, dropout)?.row(0))
    }

    pub fn forward_batch(
        &self,
        inputs: ArrayView2<F>,
        temperature: F,
        dropout: &DropoutSpec,
    ) -> Result<BatchTrace<F>> {
        let masks = dropout.layer_masks::<F>(self)?;
        self.forward_masked(inputs, temperature, &masks)
    }

    pub(crate) fn forward_masked(
        &self,
        inputs: ArrayView2<F>,
        temperature: F,
        masks: &LayerMasks<F>,
    ) -> Result<BatchTrace<F>> {
        if !(temperature > F::zero()) || !temperature.is_finite() {
            return Err(Error::usage(format!("temperature must be positive, got {temperature}")));
        }
        if inputs.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input width {} != network input dim {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        if !inputs.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("non-finite input"));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Array2<F>> = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let prev = if k == 0 { inputs.view() } else { post[k - 1].view() };
            let mut z = prev.dot(&layer.weight.t());
            z += &layer.bias;
            let mut a = activate(&z, layer.nonlinearity, temperature);
            if let Some(Some(mask)) = masks.get(k) {
                a *= mask;
            }
            pre.push(z);
            post.push(a);
        }
        Ok(BatchTrace {
            input: inputs.to_owned(),
            pre_activations: pre,
            post_activations: post,
        })
    }

    /// Output of the final layer only, with dropout off.
    pub fn predict(&self, inputs: ArrayView2<F>, temperature: F) -> Result<Array2<F>> {
        let trace = self.forward_masked(inputs, temperature, &Vec::new())?;
        Ok(trace.post_activations.into_iter().last().expect("non-empty"))
    }

    /// Final-layer pre-activations (logits), with dropout off.
    pub fn logits(&self, inputs: ArrayView2<F>) -> Result<Array2<F>> {
        let trace = self.forward_masked(inputs, F::one(), &Vec::new())?;
        Ok(trace.pre_activations.into_iter().last().expect("non-empty"))
    }
}

pub(crate) fn activate<F: Real>(z: &Array2<F>, nl: Nonlinearity, temperature: F) -> Array2<F> {
    match nl {
        Nonlinearity::Identity => z.clone(),
        Nonlinearity::Relu => z.mapv(|v| if v > F::zero() { v } else { F::zero() }),
        Nonlinearity::Softmax => softmax_rows(z, temperature),
    }
}

/// Row-wise `softmax(z / temperature)`.
pub(crate) fn softmax_rows<F: Real>(z: &Array2<F>, temperature: F) -> Array2<F> {
    let mut out = z.mapv(|v| v / temperature);
    for mut row in out.rows_mut() {
        let max = row.fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise `log_softmax(z / temperature)`.
pub(crate) fn log_softmax_rows<F: Real>(z: &Array2<F>, temperature: F) -> Array2<F> {
    let mut out = z.mapv(|v| v / temperature);
    for mut row in out.rows_mut() {
        let max = row.fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
        let lse = row.fold(F::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Index of the largest entry of each row; ties go to the lower index.
pub fn argmax_rows<F: Real>(m: &Array2<F>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, F::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
