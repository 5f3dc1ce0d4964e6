//! Big-endian IDX files: `u32` magic, `u32` dimensions, then `u8` payload.

use std::path::Path;

use super::Dataset;
use crate::error::{InfluenceError, Result};
use crate::nn::Example;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| InfluenceError::io(path, e))
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| InfluenceError::TruncatedIdx {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

struct IdxImages {
    count: usize,
    pixels_per_item: usize,
    payload_offset: usize,
}

fn parse_images_header(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(InfluenceError::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let pixels_per_item = rows * cols;
    let expected = 16 + count * pixels_per_item;
    if bytes.len() < expected {
        return Err(InfluenceError::TruncatedIdx {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(IdxImages {
        count,
        pixels_per_item,
        payload_offset: 16,
    })
}

fn parse_labels<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(InfluenceError::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4, path)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(InfluenceError::TruncatedIdx {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(&bytes[8..expected])
}

/// Reads an image/label IDX pair. Pixels are scaled to `[0, 1]` by `/255`
/// and flattened row-major; the first `max_items` items are kept in file
/// order. The class count is `max(label) + 1` (at least 2).
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    max_items: usize,
) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    if max_items == 0 {
        return Err(InfluenceError::InvalidInput(
            "max_items must be positive; empty datasets are not allowed".into(),
        ));
    }
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;
    let images = parse_images_header(&image_bytes, images_path)?;
    let labels = parse_labels(&label_bytes, labels_path)?;
    if images.count != labels.len() {
        return Err(InfluenceError::IdxCountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let keep = images.count.min(max_items);
    if keep == 0 {
        return Err(InfluenceError::InvalidInput(format!(
            "{} contains no items",
            images_path.display()
        )));
    }
    let examples: Vec<Example> = (0..keep)
        .map(|i| {
            let start = images.payload_offset + i * images.pixels_per_item;
            let features = image_bytes[start..start + images.pixels_per_item]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect();
            Example::new(features, labels[i] as usize)
        })
        .collect();
    let num_classes = (labels[..keep].iter().copied().max().unwrap_or(0) as usize + 1).max(2);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, num_classes, images.pixels_per_item, examples)
}
