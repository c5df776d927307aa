//! Reverse-mode gradients through the fixed dense chain.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::dropout::{DropoutSpec, LayerMasks};
use super::network::{log_softmax_rows, softmax_rows};
use super::{BatchTrace, DenseNetwork, Nonlinearity, Real};
use crate::error::{Error, Result};

/// Training losses. Per-sample values are averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossSpec {
    /// `Σ_j (y_j − t_j)²` on the final post-activation.
    Mse,
    /// `−Σ_j t_j log softmax(z)_j`; the final layer must be softmax.
    CrossEntropy,
    /// `T² · (−Σ_j t_j log softmax(z / T)_j)`, the soft-target distillation loss.
    SoftCrossEntropy { temperature: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<F> {
    pub weights: Vec<Array2<F>>,
    pub biases: Vec<Array1<F>>,
}

impl<F: Real> ParamGrads<F> {
    /// Same order as [`DenseNetwork::parameters_mut`].
    pub fn slices(&self) -> Vec<&[F]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| {
                [
                    w.as_slice().expect("standard layout"),
                    b.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn max_abs(&self) -> F {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(F::zero(), |m, &v| m.max(v.abs()))
    }
}

/// Which activation vector a reconstruction term looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Input,
    /// Post-activation of layer `k` (dropout mask included).
    Layer(usize),
}

/// `weight · ‖a_slot − target‖²`. The target has one row per sample or a single
/// row shared by the whole batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchTerm<F> {
    pub slot: Slot,
    pub target: Array2<F>,
    pub weight: F,
}

/// Sum of weighted squared distances between activations and targets; the loss
/// minimized over the input during reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatch<F> {
    pub terms: Vec<MatchTerm<F>>,
}

impl<F: Real> ActivationMatch<F> {
    pub fn validate(&self, net: &DenseNetwork<F>, batch: usize) -> Result<()> {
        let widths = net.widths();
        for (i, term) in self.terms.iter().enumerate() {
            let width = match term.slot {
                Slot::Input => widths[0],
                Slot::Layer(k) => *widths.get(k + 1).ok_or_else(|| {
                    Error::usage(format!("term {i} references layer {k}, network has {}", net.layer_count()))
                })?,
            };
            if term.target.ncols() != width {
                return Err(Error::shape(format!(
                    "term {i}: target width {} != activation width {width}",
                    term.target.ncols()
                )));
            }
            if term.target.nrows() != 1 && term.target.nrows() != batch {
                return Err(Error::shape(format!(
                    "term {i}: {} target rows for a batch of {batch}",
                    term.target.nrows()
                )));
            }
            if !(term.weight > F::zero()) {
                return Err(Error::usage(format!("term {i}: weight must be positive")));
            }
        }
        Ok(())
    }

    fn activation(trace: &BatchTrace<F>, slot: Slot) -> &Array2<F> {
        match slot {
            Slot::Input => &trace.input,
            Slot::Layer(k) => &trace.post_activations[k],
        }
    }

    /// Per-sample loss.
    pub fn losses(&self, trace: &BatchTrace<F>) -> Array1<F> {
        let mut out = Array1::zeros(trace.input.nrows());
        for term in &self.terms {
            let diff = Self::activation(trace, term.slot) - &term.target;
            out += &(diff.mapv(|d| d * d).sum_axis(Axis(1)) * term.weight);
        }
        out
    }

    /// Gradients of the summed loss with respect to the input and to every
    /// layer's post-activation.
    fn seeds(&self, trace: &BatchTrace<F>, layers: usize) -> (Array2<F>, Vec<Option<Array2<F>>>) {
        let mut input = Array2::zeros(trace.input.raw_dim());
        let mut post: Vec<Option<Array2<F>>> = vec![None; layers];
        let two = F::of(2.0);
        for term in &self.terms {
            let g = (Self::activation(trace, term.slot) - &term.target) * (two * term.weight);
            match term.slot {
                Slot::Input => input += &g,
                Slot::Layer(k) => match &mut post[k] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                },
            }
        }
        (input, post)
    }
}

/// Backpropagates gradients that enter at post-activations (`post_seeds`) and,
/// optionally, directly at the final pre-activation (`top_pre_seed`).
/// Returns parameter gradients and the input gradient, each if requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<F: Real>(
    net: &DenseNetwork<F>,
    trace: &BatchTrace<F>,
    masks: &LayerMasks<F>,
    temperature: F,
    mut post_seeds: Vec<Option<Array2<F>>>,
    top_pre_seed: Option<Array2<F>>,
    want_params: bool,
    want_input: bool,
) -> (Option<ParamGrads<F>>, Option<Array2<F>>) {
    let n = net.layer_count();
    post_seeds.resize(n, None);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut carried: Option<Array2<F>> = None;
    let mut top_pre_seed = top_pre_seed;

    for k in (0..n).rev() {
        let layer = &net.layers()[k];
        let d_post = match (post_seeds[k].take(), carried.take()) {
            (Some(mut a), Some(b)) => {
                a += &b;
                Some(a)
            }
            (a, b) => a.or(b),
        };
        let mut d_pre = d_post.map(|mut g| {
            if let Some(Some(mask)) = masks.get(k) {
                g *= mask;
            }
            nonlinearity_vjp(layer.nonlinearity, &trace.pre_activations[k], &trace.post_activations[k], g, temperature)
        });
        if k + 1 == n {
            if let Some(seed) = top_pre_seed.take() {
                d_pre = Some(match d_pre {
                    Some(mut g) => {
                        g += &seed;
                        g
                    }
                    None => seed,
                });
            }
        }
        let d_pre = d_pre.unwrap_or_else(|| Array2::zeros(trace.pre_activations[k].raw_dim()));

        if want_params {
            let prev = if k == 0 { &trace.input } else { &trace.post_activations[k - 1] };
            weights.push(d_pre.t().dot(prev));
            biases.push(d_pre.sum_axis(Axis(0)));
        }
        if k > 0 || want_input {
            carried = Some(d_pre.dot(&layer.weight));
        }
    }

    let params = want_params.then(|| {
        weights.reverse();
        biases.reverse();
        ParamGrads { weights, biases }
    });
    (params, carried)
}

fn nonlinearity_vjp<F: Real>(
    nl: Nonlinearity,
    pre: &Array2<F>,
    post: &Array2<F>,
    mut g: Array2<F>,
    temperature: F,
) -> Array2<F> {
    match nl {
        Nonlinearity::Identity => g,
        Nonlinearity::Relu => {
            g.zip_mut_with(pre, |d, &z| {
                if z <= F::zero() {
                    *d = F::zero()
                }
            });
            g
        }
        Nonlinearity::Softmax => {
            // post == softmax(pre / T) since the output layer is never masked.
            let dot = (&g * post).sum_axis(Axis(1)).insert_axis(Axis(1));
            (&g - &dot) * post / temperature
        }
    }
}

/// Batch-averaged loss and parameter gradients. `targets` has one row per input.
pub fn grad_params<F: Real>(
    net: &DenseNetwork<F>,
    inputs: ArrayView2<F>,
    targets: ArrayView2<F>,
    loss: LossSpec,
    dropout: &DropoutSpec,
) -> Result<(ParamGrads<F>, F)> {
    let masks = dropout.layer_masks(net)?;
    grad_params_masked(net, inputs, targets, loss, &masks)
}

pub(crate) fn grad_params_masked<F: Real>(
    net: &DenseNetwork<F>,
    inputs: ArrayView2<F>,
    targets: ArrayView2<F>,
    loss: LossSpec,
    masks: &LayerMasks<F>,
) -> Result<(ParamGrads<F>, F)> {
    let batch = inputs.nrows();
    if batch == 0 {
        return Err(Error::usage("empty batch"));
    }
    if targets.nrows() != batch || targets.ncols() != net.output_dim() {
        return Err(Error::shape(format!(
            "targets {:?} for {batch} inputs and {} outputs",
            targets.dim(),
            net.output_dim()
        )));
    }
    let is_softmax = net.layers().last().expect("non-empty").nonlinearity == Nonlinearity::Softmax;
    let inv_batch = F::one() / F::of(batch as f64);
    let n = net.layer_count();

    match loss {
        LossSpec::Mse => {
            let trace = net.forward_masked(inputs, F::one(), masks)?;
            let diff = trace.output() - &targets;
            let value = diff.mapv(|d| d * d).sum() * inv_batch;
            let mut seeds = vec![None; n];
            seeds[n - 1] = Some(diff * (F::of(2.0) * inv_batch));
            let (grads, _) = backward(net, &trace, masks, F::one(), seeds, None, true, false);
            Ok((grads.expect("requested"), value))
        }
        LossSpec::CrossEntropy | LossSpec::SoftCrossEntropy { .. } => {
            if !is_softmax {
                return Err(Error::usage("cross-entropy needs a softmax output layer"));
            }
            let t = match loss {
                LossSpec::SoftCrossEntropy { temperature } => {
                    if !(temperature > 0.0) {
                        return Err(Error::usage("temperature must be positive"));
                    }
                    F::of(temperature)
                }
                _ => F::one(),
            };
            let trace = net.forward_masked(inputs, t, masks)?;
            let logits = trace.pre_activations.last().expect("non-empty");
            let logp = log_softmax_rows(logits, t);
            let value = -(&logp * &targets).sum() * t * t * inv_batch;
            let p = softmax_rows(logits, t);
            // d/dz of T²·CE(softmax(z/T)) = T·(p − t)
            let seed = (p - targets) * (t * inv_batch);
            let (grads, _) = backward(net, &trace, masks, t, Vec::new(), Some(seed), true, false);
            Ok((grads.expect("requested"), value))
        }
    }
}

/// Gradient of an activation-matching objective with respect to one input.
pub fn grad_input<F: Real>(
    net: &DenseNetwork<F>,
    input: ArrayView1<F>,
    objective: &ActivationMatch<F>,
    dropout: &DropoutSpec,
) -> Result<(Array1<F>, F)> {
    let (g, losses) = grad_input_batch(net, input.insert_axis(Axis(0)), objective, dropout)?;
    Ok((g.row(0).to_owned(), losses[0]))
}

/// Per-sample input gradients and losses for a batch; the objective is the sum
/// of per-sample losses, so samples do not interact.
pub fn grad_input_batch<F: Real>(
    net: &DenseNetwork<F>,
    inputs: ArrayView2<F>,
    objective: &ActivationMatch<F>,
    dropout: &DropoutSpec,
) -> Result<(Array2<F>, Array1<F>)> {
    let masks = dropout.layer_masks(net)?;
    grad_input_masked(net, inputs, objective, &masks)
}

pub(crate) fn grad_input_masked<F: Real>(
    net: &DenseNetwork<F>,
    inputs: ArrayView2<F>,
    objective: &ActivationMatch<F>,
    masks: &LayerMasks<F>,
) -> Result<(Array2<F>, Array1<F>)> {
    if inputs.nrows() == 0 {
        return Err(Error::usage("empty batch"));
    }
    objective.validate(net, inputs.nrows())?;
    let trace = net.forward_masked(inputs, F::one(), masks)?;
    let losses = objective.losses(&trace);
    let (input_seed, post_seeds) = objective.seeds(&trace, net.layer_count());
    let (_, d_input) = backward(net, &trace, masks, F::one(), post_seeds, None, false, true);
    let mut d_input = d_input.expect("requested");
    d_input += &input_seed;
    Ok((d_input, losses))
}
