//! IDX image/label ingestion (the canonical MNIST container layout).
//!
//! All multi-byte header fields are big-endian. Pixels are unsigned bytes
//! scaled to `[0, 1]`.

use std::fs;
use std::path::Path;

use ndarray::Array4;

use super::{LabeledDataset, SplitTag};
use crate::error::{DampError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| DampError::Format(format!("truncated IDX file while reading {what}")))?;
    Ok(u32::from_be_bytes([slice[0], slice[1], slice[2], slice[3]]))
}

/// Decode an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32_be(bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DampError::Format(format!(
            "bad IDX image magic {magic:#010x} (expected {IDX_IMAGES_MAGIC:#010x})"
        )));
    }
    let count = read_u32_be(bytes, 4, "image count")? as usize;
    let rows = read_u32_be(bytes, 8, "row count")? as usize;
    let cols = read_u32_be(bytes, 12, "column count")? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(DampError::Format(format!(
            "truncated IDX image payload: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    Ok((count, rows, cols, bytes[16..expected].to_vec()))
}

/// Decode an IDX label file into raw labels.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DampError::Format(format!(
            "bad IDX label magic {magic:#010x} (expected {IDX_LABELS_MAGIC:#010x})"
        )));
    }
    let count = read_u32_be(bytes, 4, "label count")? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(DampError::Format(format!(
            "truncated IDX label payload: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    Ok(bytes[8..expected].to_vec())
}

/// Load an image/label IDX pair into a dataset with pixels scaled to `[0, 1]`.
pub fn load_idx<P: AsRef<Path>>(images_path: P, labels_path: P, split: SplitTag) -> Result<LabeledDataset> {
    let image_bytes = fs::read(&images_path)?;
    let label_bytes = fs::read(&labels_path)?;
    let (count, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let labels_raw = parse_idx_labels(&label_bytes)?;
    if labels_raw.len() != count {
        return Err(DampError::Consistency(format!(
            "{count} images but {} labels",
            labels_raw.len()
        )));
    }
    let labels: Vec<usize> = labels_raw.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut inputs = Array4::<f64>::zeros((count, 1, rows, cols));
    {
        let dst = inputs.as_slice_mut().expect("fresh array");
        for (d, &p) in dst.iter_mut().zip(pixels.iter()) {
            *d = p as f64 / 255.0;
        }
    }
    LabeledDataset::new(inputs, labels, class_count.max(1), split)
}

/// Encode images into IDX bytes (test fixtures and round-trip checks).
pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), count * rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
