//! Labeled image sets: IDX ingestion and persistence, pixel statistics, and
//! PGM export for visual inspection.

mod idx;
mod pgm;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use idx::{load_idx, load_set, save_set};
pub use pgm::{export_images, write_contact_sheet, write_pgm};

/// Flattened images with values in `[0, 1]`, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub images: Array2<f32>,
    pub labels: Vec<u8>,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
}

/// Mean and population standard deviation over every pixel of a set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelStats {
    pub mean: f64,
    pub std: f64,
}

impl PixelStats {
    /// The MNIST initializer, `N(0.15, 0.1)` with 0.1 read as the standard deviation.
    pub const MNIST_DEFAULT: PixelStats = PixelStats { mean: 0.15, std: 0.1 };
}

impl LabeledImageSet {
    pub fn new(images: Array2<f32>, labels: Vec<u8>, width: usize, height: usize, num_classes: usize) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        if images.ncols() != width * height {
            return Err(Error::shape(format!(
                "image width {} != {width}×{height}",
                images.ncols()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::shape(format!("label {bad} outside [0, {num_classes})")));
        }
        let mut images = images;
        images.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Ok(Self {
            images,
            labels,
            width,
            height,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.width * self.height
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            width: self.width,
            height: self.height,
            num_classes: self.num_classes,
        }
    }

    /// Row indices of each class, indexed by label.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    pub fn one_hot(&self) -> Array2<f32> {
        let mut out = Array2::zeros((self.len(), self.num_classes));
        for (i, &l) in self.labels.iter().enumerate() {
            out[[i, l as usize]] = 1.0;
        }
        out
    }
}

pub fn compute_pixel_stats(set: &LabeledImageSet) -> Result<PixelStats> {
    if set.is_empty() || set.dim() == 0 {
        return Err(Error::usage("pixel statistics of an empty set"));
    }
    let n = set.images.len() as f64;
    let mean = set.images.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = set.images.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(PixelStats { mean, std: var.sqrt() })
}

/// Mean image of every label present in the set, in ascending label order.
pub fn per_class_means(set: &LabeledImageSet) -> Vec<(u8, Array1<f32>)> {
    set.class_indices()
        .into_iter()
        .enumerate()
        .filter(|(_, idx)| !idx.is_empty())
        .map(|(label, idx)| {
            let mut acc = Array1::<f64>::zeros(set.dim());
            for &i in &idx {
                acc.zip_mut_with(&set.images.row(i), |a, &v| *a += v as f64);
            }
            let n = idx.len() as f64;
            (label as u8, acc.mapv(|v| (v / n) as f32))
        })
        .collect()
}
