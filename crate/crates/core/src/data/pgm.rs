use std::path::Path;

use ndarray::ArrayView1;

use super::idx::quantize;
use super::LabeledImageSet;
use crate::error::{Error, Result};

/// Binary (P5) 8-bit grayscale.
pub fn write_pgm(pixels: ArrayView1<f32>, width: usize, height: usize, path: &Path) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!("{} pixels for a {width}×{height} image", pixels.len())));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|&v| quantize(v)));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One PGM per image, named `{index:05}-{label}.pgm`.
pub fn export_images(set: &LabeledImageSet, directory: &Path) -> Result<()> {
    std::fs::create_dir_all(directory).map_err(|e| Error::io(directory, e))?;
    for (i, (row, label)) in set.images.rows().into_iter().zip(&set.labels).enumerate() {
        write_pgm(row, set.width, set.height, &directory.join(format!("{i:05}-{label}.pgm")))?;
    }
    Ok(())
}

/// Tiles images left to right in rows of `columns`, separated by a 1-pixel gap.
pub fn write_contact_sheet(
    images: &[ArrayView1<f32>],
    width: usize,
    height: usize,
    columns: usize,
    path: &Path,
) -> Result<()> {
    if images.is_empty() || columns == 0 {
        return Err(Error::usage("contact sheet needs at least one image and one column"));
    }
    let cols = columns.min(images.len());
    let rows = images.len().div_ceil(cols);
    let sheet_w = cols * (width + 1) - 1;
    let sheet_h = rows * (height + 1) - 1;
    let mut sheet = ndarray::Array1::<f32>::zeros(sheet_w * sheet_h);
    for (n, img) in images.iter().enumerate() {
        if img.len() != width * height {
            return Err(Error::shape(format!("image {n} has {} pixels", img.len())));
        }
        let (ox, oy) = ((n % cols) * (width + 1), (n / cols) * (height + 1));
        for y in 0..height {
            for x in 0..width {
                sheet[(oy + y) * sheet_w + ox + x] = img[y * width + x];
            }
        }
    }
    write_pgm(sheet.view(), sheet_w, sheet_h, path)
}
