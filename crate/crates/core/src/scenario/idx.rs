//! IDX (MNIST-style) unsigned-byte image and label files.
//!
//! Layout: a big-endian `u32` magic (`0x00000803` for 3-d image tensors,
//! `0x00000801` for label vectors), one big-endian `u32` per dimension, then
//! the raw bytes in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::scenario::{LabeledDataset, Sample};
use crate::tensor::Tensor1;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(offset, "truncated header"))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected {
        return Err(format_err(
            0,
            format!("bad magic number 0x{magic:08x}, expected 0x{expected:08x}"),
        ));
    }
    Ok(())
}

/// Parses an image file into `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let need = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| format_err(4, "image dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(format_err(
            16 + body.len(),
            format!("truncated image data: {need} bytes declared, {} present", body.len()),
        ));
    }
    Ok((count, rows, cols, &body[..need]))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(format_err(
            8 + body.len(),
            format!("truncated label data: {count} labels declared, {} present", body.len()),
        ));
    }
    Ok(&body[..count])
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image/label pair. Images are flattened row-major; with
/// `normalize` pixel values are scaled to `[0, 1]`. The label space is
/// `0..=max_label`.
pub fn load_idx(images_path: &Path, labels_path: &Path, normalize: bool) -> Result<LabeledDataset> {
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;
    let (count, rows, cols, pixels) = parse_images(&image_bytes)?;
    let labels = parse_labels(&label_bytes)?;
    if labels.len() != count {
        return Err(format_err(
            4,
            format!("{count} images but {} labels", labels.len()),
        ));
    }
    let dim = rows * cols;
    let scale = if normalize { 1.0 / 255.0 } else { 1.0 };
    let samples = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| Sample {
            features: Tensor1::new(pixels[i * dim..(i + 1) * dim].iter().map(|&p| p as f64 * scale).collect()),
            label: label as usize,
        })
        .collect();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    LabeledDataset::new(samples, num_classes, dim)
}

/// Writes `count` images of `rows × cols` bytes.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let dim = rows * cols;
    if dim == 0 || pixels.len() % dim != 0 {
        return Err(Error::invalid("pixel buffer is not a whole number of images"));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, (pixels.len() / dim) as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    write_atomic(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write_atomic(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_mnist_sized_images() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
        let pixels: Vec<u8> = (0..2 * 784).map(|i| (i % 256) as u8).collect();
        write_idx_images(&img, 28, 28, &pixels).unwrap();
        write_idx_labels(&lab, &[3, 7]).unwrap();
        let d = load_idx(&img, &lab, true).unwrap();
        assert_eq!((d.len(), d.feature_dim(), d.num_classes()), (2, 784, 8));
        assert_eq!(d.samples()[1].label, 7);
        assert_eq!(d.samples()[0].features.get(255), 1.0);
        let raw = load_idx(&img, &lab, false).unwrap();
        assert_eq!(raw.samples()[1].features.get(0), (784 % 256) as f64);
    }

    #[test]
    fn wrong_magic_is_named() {
        let mut bytes = vec![0, 0, 8, 2];
        bytes.extend_from_slice(&[0; 12]);
        let err = parse_images(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        assert!(err.to_string().contains("0x00000802"));
    }

    #[test]
    fn truncation_reports_offset() {
        let mut bytes = IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [2u32, 2, 2] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend_from_slice(&[1, 2, 3]);
        assert!(matches!(parse_images(&bytes), Err(Error::Format { offset: 19, .. })));
        assert!(matches!(parse_labels(&[0, 0, 8]), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx_images(&img, 1, 2, &[0, 1, 2, 3]).unwrap();
        write_idx_labels(&lab, &[1]).unwrap();
        assert!(matches!(load_idx(&img, &lab, false), Err(Error::Format { .. })));
    }
}
