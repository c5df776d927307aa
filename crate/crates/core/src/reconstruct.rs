//! Surrogate-dataset reconstruction: Gaussian input noise is optimized with
//! Adam until the teacher's activations match targets drawn from a record.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{per_class_means, write_contact_sheet, LabeledImageSet, PixelStats};
use crate::error::{Error, Result};
use crate::nn::{
    grad_input_masked, sample_dropout, ActivationMatch, AdamState, DenseNetwork, DropoutSpec, LayerMasks, MatchTerm,
    Nonlinearity, Slot,
};
use crate::records::{ActivationRecord, SpectralRecord, StatsRecord};
use crate::rng::rng_for;
use crate::spectral::{NetworkGraph, SpectralBasis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    TopLayerMse,
    AllLayersMse,
    SpectralMse,
}

/// A batch objective: the teacher as seen during reconstruction (final
/// softmax swapped out), per-image targets, and optional frozen dropout.
#[derive(Clone, Debug)]
pub struct ReconstructionObjective {
    pub kind: ObjectiveKind,
    pub net: DenseNetwork<f32>,
    pub matcher: ActivationMatch<f32>,
    pub dropout: DropoutSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub init: PixelStats,
    pub seed: u64,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch: 256,
            learning_rate: 0.01,
            init: PixelStats::MNIST_DEFAULT,
            seed: 0,
        }
    }
}

/// Decompressed signals of one class: exemplar → graph → signal.
type Exemplars = Vec<Vec<Array1<f64>>>;

/// Record-specific data prepared once and reused for every batch.
pub struct Reconstructor<'a> {
    teacher: &'a DenseNetwork<f32>,
    record: &'a ActivationRecord,
    /// Decompressed exemplar signals: class → exemplar → per-graph signal.
    exemplars: Vec<(u8, Exemplars)>,
    graphs: Vec<NetworkGraph>,
}

impl<'a> Reconstructor<'a> {
    /// `bases` must be the teacher's graphs for spectral records and may be empty otherwise.
    pub fn new(
        teacher: &'a DenseNetwork<f32>,
        record: &'a ActivationRecord,
        bases: &[(NetworkGraph, SpectralBasis)],
    ) -> Result<Self> {
        let mut exemplars = Vec::new();
        match record {
            ActivationRecord::Spectral(r) => exemplars = decompress(r, bases)?,
            ActivationRecord::Stats(r) => check_stats(r, teacher)?,
            ActivationRecord::PixelStats(_) => {
                return Err(Error::usage("a pixel-statistics record carries no activation targets"))
            }
        }
        Ok(Self {
            teacher,
            record,
            exemplars,
            graphs: bases.iter().map(|(g, _)| g.clone()).collect(),
        })
    }

    /// Objective for `count` images of `class` with freshly drawn targets.
    pub fn make_objective<R: Rng + ?Sized>(&self, class: u8, count: usize, rng: &mut R) -> Result<ReconstructionObjective> {
        match self.record {
            ActivationRecord::Stats(r) => self.stats_objective(r, class, count, rng),
            ActivationRecord::Spectral(_) => self.spectral_objective(class, count, rng),
            ActivationRecord::PixelStats(_) => unreachable!("rejected in new"),
        }
    }

    fn stats_objective<R: Rng + ?Sized>(
        &self,
        r: &StatsRecord,
        class: u8,
        count: usize,
        rng: &mut R,
    ) -> Result<ReconstructionObjective> {
        let layers = r
            .per_class
            .get(&class)
            .ok_or_else(|| Error::usage(format!("record has no statistics for class {class}")))?;
        let top = self.teacher.layer_count() - 1;
        let widths = self.teacher.widths();
        let mut terms: Vec<MatchTerm<f32>> = layers
            .iter()
            .map(|s| MatchTerm {
                slot: Slot::Layer(s.layer_index),
                target: s.sample_rows(count, rng).mapv(|v| v as f32),
                weight: 1.0 / widths[s.layer_index + 1] as f32,
            })
            .collect();
        let dropout = match r.dropout_rate {
            Some(rate) if rate > 0.0 => sample_dropout(&DropoutSpec::sampled(rate)?, &widths[1..], rng.gen())?,
            _ => DropoutSpec::off(),
        };
        // Targets pass through the same frozen filter as the activations they are
        // compared with: dropped units carry no target, kept ones are rescaled.
        if let Some(masks) = &dropout.masks {
            let scale = (1.0 / (1.0 - dropout.rate)) as f32;
            for term in &mut terms {
                let Slot::Layer(k) = term.slot else { continue };
                if let Some(mask) = &masks[k] {
                    for (mut col, &keep) in term.target.columns_mut().into_iter().zip(mask) {
                        col *= if keep { scale } else { 0.0 };
                    }
                }
            }
        }
        Ok(ReconstructionObjective {
            kind: if layers.len() == 1 && layers[0].layer_index == top {
                ObjectiveKind::TopLayerMse
            } else {
                ObjectiveKind::AllLayersMse
            },
            net: self.teacher.with_top_layer(Nonlinearity::Relu, r.temperature as f32),
            matcher: ActivationMatch { terms },
            dropout,
        })
    }

    fn spectral_objective<R: Rng + ?Sized>(&self, class: u8, count: usize, rng: &mut R) -> Result<ReconstructionObjective> {
        let exemplars = &self
            .exemplars
            .iter()
            .find(|(c, _)| *c == class)
            .ok_or_else(|| Error::usage(format!("record has no exemplars for class {class}")))?
            .1;
        let picks: Vec<usize> = (0..count).map(|_| rng.gen_range(0..exemplars.len())).collect();
        let mut terms = Vec::new();
        for (g, graph) in self.graphs.iter().enumerate() {
            let rows = Array2::from_shape_fn((count, graph.vertex_count()), |(i, v)| exemplars[picks[i]][g][v] as f32);
            for (pos, &slot) in graph.slots.iter().enumerate() {
                let end = graph.offsets.get(pos + 1).copied().unwrap_or(graph.vertex_count());
                terms.push(MatchTerm {
                    slot: if slot == 0 { Slot::Input } else { Slot::Layer(slot - 1) },
                    target: rows.slice(ndarray::s![.., graph.offsets[pos]..end]).to_owned(),
                    weight: 1.0,
                });
            }
        }
        Ok(ReconstructionObjective {
            kind: ObjectiveKind::SpectralMse,
            net: self.teacher.with_top_layer(Nonlinearity::Identity, 1.0),
            matcher: ActivationMatch { terms },
            dropout: DropoutSpec::off(),
        })
    }
}

fn check_stats(r: &StatsRecord, teacher: &DenseNetwork<f32>) -> Result<()> {
    let widths = teacher.widths();
    for (class, layers) in &r.per_class {
        for s in layers {
            if widths.get(s.layer_index + 1) != Some(&s.dim()) {
                return Err(Error::shape(format!(
                    "class {class}: statistics for layer {} have {} units, teacher does not match",
                    s.layer_index,
                    s.dim()
                )));
            }
        }
    }
    Ok(())
}

fn decompress(r: &SpectralRecord, bases: &[(NetworkGraph, SpectralBasis)]) -> Result<Vec<(u8, Exemplars)>> {
    r.per_class
        .iter()
        .map(|(&class, exemplars)| {
            if exemplars.is_empty() {
                return Err(Error::usage(format!("class {class} has no exemplars")));
            }
            let signals = exemplars
                .iter()
                .map(|signals| {
                    if signals.len() != bases.len() {
                        return Err(Error::usage("record graphs do not match the supplied bases"));
                    }
                    signals
                        .iter()
                        .zip(bases)
                        .map(|(s, (graph, basis))| {
                            if s.graph != graph.id || s.graph_size as usize != graph.vertex_count() {
                                return Err(Error::usage(format!(
                                    "record signal on {:?} ({} vertices) does not match graph {:?} ({} vertices)",
                                    s.graph,
                                    s.graph_size,
                                    graph.id,
                                    graph.vertex_count()
                                )));
                            }
                            basis.inverse(&s.coefficients)
                        })
                        .collect()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((class, signals))
        })
        .collect()
}

/// Result of optimizing one batch. Losses are per image.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    /// Optimized images, unclamped.
    pub images: Array2<f32>,
    pub initial_loss: Array1<f32>,
    pub final_loss: Array1<f32>,
    pub aborted: Vec<bool>,
}

impl BatchOutcome {
    fn mean_over_live(&self, losses: &Array1<f32>) -> f64 {
        let live: Vec<f64> = losses
            .iter()
            .zip(&self.aborted)
            .filter(|(_, &a)| !a)
            .map(|(&l, _)| l as f64)
            .collect();
        live.iter().sum::<f64>() / live.len().max(1) as f64
    }

    pub fn mean_initial(&self) -> f64 {
        self.mean_over_live(&self.initial_loss)
    }

    pub fn mean_final(&self) -> f64 {
        self.mean_over_live(&self.final_loss)
    }

    /// Images whose loss did not drop below the starting value.
    pub fn non_improving(&self) -> usize {
        (0..self.aborted.len())
            .filter(|&i| !self.aborted[i] && self.final_loss[i] >= self.initial_loss[i])
            .count()
    }
}

/// Draws `count` images from the pixel initializer.
pub fn initial_images<R: Rng + ?Sized>(init: PixelStats, count: usize, dim: usize, rng: &mut R) -> Result<Array2<f32>> {
    if !(init.mean.is_finite() && init.std.is_finite() && init.std >= 0.0) {
        return Err(Error::usage(format!("invalid initializer N({}, {})", init.mean, init.std)));
    }
    let normal = Normal::new(init.mean, init.std)
        .map_err(|e| Error::usage(format!("invalid initializer N({}, {}): {e}", init.mean, init.std)))?;
    Ok(Array2::from_shape_simple_fn((count, dim), || normal.sample(rng) as f32))
}

/// Runs `steps` Adam updates on `images` against `objective`. The dropout
/// masks of the objective are shared by every image and every step.
pub fn optimize_batch(
    objective: &ReconstructionObjective,
    images: Array2<f32>,
    steps: usize,
    learning_rate: f64,
) -> Result<BatchOutcome> {
    let net = &objective.net;
    let masks: LayerMasks<f32> = objective.dropout.layer_masks(net)?;
    let (count, dim) = images.dim();
    if count == 0 {
        return Err(Error::usage("empty reconstruction batch"));
    }
    let mut x = images;
    let mut adam = AdamState::<f32>::new(learning_rate, &[count * dim]);
    let mut aborted = vec![false; count];
    let mut initial_loss = None;
    let mut final_loss = Array1::zeros(count);
    for step in 0..=steps {
        let (mut grad, losses) = grad_input_masked(net, x.view(), &objective.matcher, &masks)?;
        for (i, (mut g, &l)) in grad.rows_mut().into_iter().zip(&losses).enumerate() {
            if !aborted[i] && !(l.is_finite() && g.iter().all(|v| v.is_finite())) {
                log::warn!("image {i}: non-finite loss or gradient at step {step}, aborting it");
                aborted[i] = true;
            }
            if aborted[i] {
                g.fill(0.0);
            }
        }
        if initial_loss.is_none() {
            initial_loss = Some(losses.clone());
        }
        final_loss = losses;
        if step == steps {
            break;
        }
        let before = x.clone();
        adam.step(&mut [x.as_slice_mut().expect("standard layout")], &[grad.as_slice().expect("standard layout")])?;
        for (i, (mut row, prev)) in x.rows_mut().into_iter().zip(before.rows()).enumerate() {
            if aborted[i] || !row.iter().all(|v| v.is_finite()) {
                if !aborted[i] {
                    log::warn!("image {i}: non-finite pixels at step {step}, aborting it");
                    aborted[i] = true;
                }
                row.assign(&prev);
            }
        }
    }
    if aborted.iter().all(|&a| a) {
        return Err(Error::numeric("every image in the batch was aborted"));
    }
    Ok(BatchOutcome {
        images: x,
        initial_loss: initial_loss.expect("at least one evaluation"),
        final_loss,
        aborted,
    })
}

/// One line per optimized batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub class: u8,
    pub batch: usize,
    pub images: usize,
    pub mean_initial_loss: f64,
    pub mean_final_loss: f64,
    pub aborted: usize,
    pub non_improving: usize,
}

/// Optimizes one batch of `count` images of `class`; batch `index` selects the seed stream.
pub fn reconstruct_batch(
    rec: &Reconstructor,
    cfg: &ReconstructConfig,
    class: u8,
    index: usize,
    count: usize,
) -> Result<(BatchOutcome, ReconstructionObjective)> {
    if count == 0 {
        return Err(Error::usage("batch size must be at least 1"));
    }
    let mut rng = rng_for(cfg.seed, &[class as u64, index as u64]);
    let images = initial_images(cfg.init, count, rec.teacher.input_dim(), &mut rng)?;
    let objective = rec.make_objective(class, count, &mut rng)?;
    Ok((optimize_batch(&objective, images, cfg.steps, cfg.learning_rate)?, objective))
}

/// Builds a balanced labeled set with exactly `per_class` images for each of
/// `classes`. Aborted images are replaced from extra batches.
pub fn reconstruct_dataset(
    rec: &Reconstructor,
    cfg: &ReconstructConfig,
    classes: &[u8],
    per_class: usize,
    width: usize,
    height: usize,
    num_classes: usize,
) -> Result<(LabeledImageSet, Vec<BatchReport>)> {
    if cfg.batch == 0 {
        return Err(Error::usage("batch size must be at least 1"));
    }
    let dim = rec.teacher.input_dim();
    if width * height != dim {
        return Err(Error::shape(format!("{width}×{height} images for a {dim}-input teacher")));
    }
    let mut images = Array2::<f32>::zeros((0, dim));
    let mut labels = Vec::new();
    let mut reports = Vec::new();
    for &class in classes {
        let mut have = 0;
        let mut index = 0;
        while have < per_class {
            if index > per_class.div_ceil(cfg.batch) + 3 {
                return Err(Error::numeric(format!("class {class}: too many aborted images")));
            }
            let count = cfg.batch.min(per_class - have);
            let (out, _) = reconstruct_batch(rec, cfg, class, index, count)?;
            let report = BatchReport {
                class,
                batch: index,
                images: count,
                mean_initial_loss: out.mean_initial(),
                mean_final_loss: out.mean_final(),
                aborted: out.aborted.iter().filter(|&&a| a).count(),
                non_improving: out.non_improving(),
            };
            log::info!(
                "class {class} batch {index}: loss {:.4} -> {:.4}",
                report.mean_initial_loss,
                report.mean_final_loss
            );
            if report.non_improving > 0 {
                log::warn!("class {class} batch {index}: {} image(s) did not improve", report.non_improving);
            }
            reports.push(report);
            for (row, _) in out.images.rows().into_iter().zip(&out.aborted).filter(|(_, &a)| !a) {
                images.push_row(row).expect("width matches");
                labels.push(class);
                have += 1;
            }
            index += 1;
        }
    }
    let set = LabeledImageSet::new(images, labels, width, height, num_classes)?;
    Ok((set, reports))
}

/// Mean image of every class, tiled into one PGM.
pub fn write_class_mean_sheet(set: &LabeledImageSet, path: &Path) -> Result<()> {
    let means = per_class_means(set);
    let views: Vec<_> = means.iter().map(|(_, m)| m.view()).collect();
    write_contact_sheet(&views, set.width, set.height, views.len(), path)
}
