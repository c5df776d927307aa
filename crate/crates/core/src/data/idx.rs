//! IDX container (big-endian header, raw u8 payload). Gzip-compressed files are
//! detected by their magic bytes and decompressed transparently.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::Array2;

use super::LabeledImageSet;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format("idx", format!("{}: gzip: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format("idx", format!("{}: truncated header", path.display())))
}

fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            "idx",
            format!("{}: image magic {magic:#010x} != {IMAGES_MAGIC:#010x}", path.display()),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let payload = &bytes[16..];
    let expected = n * rows * cols;
    if payload.len() != expected {
        return Err(Error::format(
            "idx",
            format!("{}: expected {expected} pixel bytes, found {}", path.display(), payload.len()),
        ));
    }
    Ok((n, rows, cols, payload.to_vec()))
}

fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            "idx",
            format!("{}: label magic {magic:#010x} != {LABELS_MAGIC:#010x}", path.display()),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(
            "idx",
            format!("{}: expected {n} labels, found {}", path.display(), payload.len()),
        ));
    }
    Ok(payload.to_vec())
}

/// Reads an image/label IDX pair; pixels are scaled by 1/255 and the class
/// count is one more than the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let (n, rows, cols, pixels) = parse_images(&read_maybe_gzip(images_path)?, images_path)?;
    let labels = parse_labels(&read_maybe_gzip(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(Error::format(
            "idx",
            format!(
                "count mismatch: {} has {n} images, {} has {} labels",
                images_path.display(),
                labels_path.display(),
                labels.len()
            ),
        ));
    }
    let images = Array2::from_shape_vec((n, rows * cols), pixels)
        .expect("sized")
        .mapv(|b| b as f32 / 255.0);
    let num_classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    LabeledImageSet::new(images, labels, cols, rows, num_classes)
}

/// `round(255·v)` with halves rounded up.
pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes the set as an uncompressed IDX pair, quantizing pixels to 8 bits.
pub fn save_set(set: &LabeledImageSet, images_path: &Path, labels_path: &Path) -> Result<()> {
    let mut img = Vec::with_capacity(16 + set.images.len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(set.len() as u32).to_be_bytes());
    img.extend_from_slice(&(set.height as u32).to_be_bytes());
    img.extend_from_slice(&(set.width as u32).to_be_bytes());
    img.extend(set.images.iter().map(|&v| quantize(v)));
    write_file(images_path, &img)?;

    let mut lab = Vec::with_capacity(8 + set.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(set.len() as u32).to_be_bytes());
    lab.extend_from_slice(&set.labels);
    write_file(labels_path, &lab)
}

/// [`load_idx`] that keeps a known class count (a reconstructed set may not
/// contain the highest label).
pub fn load_set(images_path: &Path, labels_path: &Path, num_classes: usize) -> Result<LabeledImageSet> {
    let set = load_idx(images_path, labels_path)?;
    if set.num_classes > num_classes {
        return Err(Error::format(
            "idx",
            format!("labels reach {} but {num_classes} classes were expected", set.num_classes - 1),
        ));
    }
    LabeledImageSet::new(set.images, set.labels, set.width, set.height, num_classes)
}
