//! Teacher and student training, soft-target distillation, and evaluation.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::nn::checkpoint::ModelHash;
use crate::nn::{argmax_rows, grad_params_masked, sample_row_masks, AdamState, DenseNetwork, LossSpec};
use crate::rng::rng_for;

/// Rows per forward pass when only predictions are needed.
const EVAL_CHUNK: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
    /// Dropout rate on hidden layers during training.
    pub dropout: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn teacher() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.001,
            batch_size: 128,
            temperature: 1.0,
            dropout: 0.5,
            seed: 0,
        }
    }

    pub fn student() -> Self {
        Self {
            dropout: 0.0,
            ..Self::teacher()
        }
    }

    pub fn distillation() -> Self {
        Self {
            epochs: 30,
            temperature: 8.0,
            ..Self::student()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::usage("batch size must be at least 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::usage(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::usage(format!("dropout rate must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

fn check_dims(net: &DenseNetwork<f32>, set: &LabeledImageSet) -> Result<()> {
    if set.dim() != net.input_dim() || set.num_classes != net.output_dim() {
        return Err(Error::usage(format!(
            "network {:?} does not fit {}-pixel images with {} classes",
            net.widths(),
            set.dim(),
            set.num_classes
        )));
    }
    Ok(())
}

/// Mini-batch Adam on `loss` against per-row `targets`. Returns the mean loss of every epoch.
fn fit(
    net: &mut DenseNetwork<f32>,
    inputs: ArrayView2<f32>,
    targets: ArrayView2<f32>,
    loss: LossSpec,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = inputs.nrows();
    let mut adam = AdamState::<f32>::new(cfg.learning_rate, &net.parameter_shapes());
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, &[epoch as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = inputs.select(Axis(0), chunk);
            let t = targets.select(Axis(0), chunk);
            let masks = sample_row_masks(cfg.dropout, net, chunk.len(), &mut rng);
            let (grads, value) = grad_params_masked(net, x.view(), t.view(), loss, &masks)?;
            if !value.is_finite() {
                return Err(Error::numeric(format!("non-finite training loss in epoch {epoch}")));
            }
            total += value as f64 * chunk.len() as f64;
            adam.step(&mut net.parameters_mut(), &grads.slices())?;
        }
        let mean = total / n.max(1) as f64;
        log::info!("epoch {}/{}: loss {mean:.5}", epoch + 1, cfg.epochs);
        curve.push(mean);
    }
    Ok(curve)
}

/// Hard-label cross-entropy training with dropout `cfg.dropout` on hidden layers.
pub fn train(net: &mut DenseNetwork<f32>, set: &LabeledImageSet, cfg: &TrainConfig) -> Result<Vec<f64>> {
    check_dims(net, set)?;
    fit(net, set.images.view(), set.one_hot().view(), LossSpec::CrossEntropy, cfg)
}

/// Teacher outputs at temperature `T`, dropout off.
pub fn soft_targets(teacher: &DenseNetwork<f32>, inputs: ArrayView2<f32>, temperature: f64) -> Result<Array2<f32>> {
    let mut out = Array2::zeros((inputs.nrows(), teacher.output_dim()));
    for start in (0..inputs.nrows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(inputs.nrows());
        let p = teacher.predict(inputs.slice(s![start..end, ..]), temperature as f32)?;
        out.slice_mut(s![start..end, ..]).assign(&p);
    }
    Ok(out)
}

/// Trains `student` on the teacher's temperature-softened outputs over the
/// images of `set` (labels unused). The loss carries the usual `T²` factor.
pub fn distill_kd(
    teacher: &DenseNetwork<f32>,
    student: &mut DenseNetwork<f32>,
    set: &LabeledImageSet,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if teacher.input_dim() != student.input_dim() || teacher.output_dim() != student.output_dim() {
        return Err(Error::usage(format!(
            "teacher {:?} and student {:?} disagree on input or output size",
            teacher.widths(),
            student.widths()
        )));
    }
    check_dims(student, set)?;
    cfg.validate()?;
    let targets = soft_targets(teacher, set.images.view(), cfg.temperature)?;
    fit(
        student,
        set.images.view(),
        targets.view(),
        LossSpec::SoftCrossEntropy {
            temperature: cfg.temperature,
        },
        cfg,
    )
}

/// Fails unless the record was produced from the model with hash `model`.
pub fn check_pairing(model: &ModelHash, record_model: &ModelHash) -> Result<()> {
    if model == record_model {
        Ok(())
    } else {
        Err(Error::Pairing {
            expected: hex::encode(model),
            actual: hex::encode(record_model),
        })
    }
}

/// Distills on a reconstructed set after checking that its record belongs to the teacher.
pub fn distill_datafree(
    teacher: &DenseNetwork<f32>,
    record_model: &ModelHash,
    student: &mut DenseNetwork<f32>,
    surrogate: &LabeledImageSet,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    check_pairing(&crate::nn::checkpoint::model_hash(teacher), record_model)?;
    distill_kd(teacher, student, surrogate, cfg)
}

/// Top-1 accuracy at `T = 1` with dropout off.
pub fn evaluate(net: &DenseNetwork<f32>, set: &LabeledImageSet) -> Result<f64> {
    check_dims(net, set)?;
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for start in (0..set.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(set.len());
        let logits = net.logits(set.images.slice(s![start..end, ..]))?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&set.labels[start..end])
            .filter(|(&p, &l)| p == l as usize)
            .count();
    }
    Ok(correct as f64 / set.len() as f64)
}
