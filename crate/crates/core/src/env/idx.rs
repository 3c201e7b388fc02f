//! IDX image/label files (the MNIST container format), average-pooled down
//! to a square feature grid.

use std::path::Path;

use super::dataset::Dataset;
use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::validation("truncated IDX header"))
}

/// Raw 8-bit images: `(count, rows, cols, pixels)`.
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::validation(format!(
            "IDX image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != count * rows * cols {
        return Err(Error::validation(format!(
            "IDX image body has {} bytes, header implies {}",
            body.len(),
            count * rows * cols
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::validation(format!(
            "IDX label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::validation(format!(
            "IDX label body has {} bytes, header says {count}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// Averages each image over a `side x side` grid of blocks, where
/// `side = sqrt(dim)`; pixel values are scaled to `[0, 1]`.
pub fn pool_images(images: &IdxImages, dim: usize) -> Result<Vec<Vec<f64>>> {
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim || side == 0 {
        return Err(Error::validation(format!(
            "feature dimension {dim} is not a perfect square"
        )));
    }
    if side > images.rows || side > images.cols {
        return Err(Error::validation(format!(
            "cannot pool {}x{} images up to {side}x{side}",
            images.rows, images.cols
        )));
    }
    let (rows, cols) = (images.rows, images.cols);
    let px = rows * cols;
    Ok((0..images.count)
        .map(|n| {
            let img = &images.pixels[n * px..(n + 1) * px];
            let mut out = Vec::with_capacity(dim);
            for bi in 0..side {
                let (r0, r1) = (bi * rows / side, (bi + 1) * rows / side);
                for bj in 0..side {
                    let (c0, c1) = (bj * cols / side, (bj + 1) * cols / side);
                    let mut s = 0.0;
                    for r in r0..r1 {
                        for c in c0..c1 {
                            s += img[r * cols + c] as f64;
                        }
                    }
                    out.push(s / ((r1 - r0) * (c1 - c0)) as f64 / 255.0);
                }
            }
            out
        })
        .collect())
}

/// Loads an image/label file pair as a pooled dataset.
pub fn load_idx_dataset(images: &Path, labels: &Path, dim: usize, classes: usize) -> Result<Dataset> {
    let imgs = parse_idx_images(&std::fs::read(images)?)?;
    let labs = parse_idx_labels(&std::fs::read(labels)?)?;
    if labs.len() != imgs.count {
        return Err(Error::Dimension {
            context: "IDX labels",
            expected: imgs.count,
            actual: labs.len(),
        });
    }
    let x = pool_images(&imgs, dim)?;
    Dataset::new(dim, classes, x, labs.into_iter().map(usize::from).collect())
}
