//! IDX (MNIST-style) files: big-endian magic and `u32` dimensions, then an
//! unsigned byte payload.

use std::fs;
use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated header: missing {field} at byte {offset}")))
}

/// Parses an image file; returns `(count, rows, cols, pixels)`.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "magic: expected {IDX_IMAGES_MAGIC:#010x} for images, found {magic:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "rows")? as usize;
    let cols = be_u32(bytes, 12, "cols")? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Format(format!(
            "pixel payload truncated: {} bytes for {n}x{rows}x{cols}",
            payload.len()
        )));
    }
    Ok((n, rows, cols, &payload[..need]))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "magic: expected {IDX_LABELS_MAGIC:#010x} for labels, found {magic:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::Format(format!(
            "label payload truncated: {} bytes for {n} labels",
            payload.len()
        )));
    }
    Ok(&payload[..n])
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image/label file pair, scaling pixels to `[0, 1]`. The class
/// count is one more than the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img_bytes = read_file(images_path)?;
    let lbl_bytes = read_file(labels_path)?;
    let (n, rows, cols, pixels) = read_idx_images(&img_bytes)?;
    let labels = read_idx_labels(&lbl_bytes)?;
    if labels.len() != n {
        return Err(Error::Format(format!(
            "count mismatch: {n} images but {} labels",
            labels.len()
        )));
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let images = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let ds = LabeledDataset::new(images, labels, k, 1, rows, cols)?;
    ds.check_all_classes_present()
        .map_err(|e| Error::Format(format!("labels: {e}")))?;
    Ok(ds)
}

/// Writes a single-channel dataset as an IDX pair, quantizing to bytes.
pub fn write_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if ds.channels() != 1 {
        return Err(Error::Argument("IDX export supports one channel".into()));
    }
    if let Some(&bad) = ds.labels().iter().find(|&&y| y > 255) {
        return Err(Error::Argument(format!("label {bad} does not fit in a byte")));
    }
    let n = ds.len() as u32;
    let s = ds.size() as u32;
    let mut img = Vec::with_capacity(16 + ds.images().len());
    for v in [IDX_IMAGES_MAGIC, n, s, s] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lbl = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, n] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend(ds.labels().iter().map(|&y| y as u8));
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lbl).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}
