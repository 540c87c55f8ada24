//! A deterministic global image descriptor for reference ranking: a 4x4
//! spatial grid of 8-bin gradient-orientation histograms (128
//! dimensions), L2-normalized. It stands in for local-feature matching
//! when picking the most correlated gallery face.

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const DESCRIPTOR_DIM: usize = 128;
const GRID_CELLS: usize = 4;
const ORIENT_BINS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDescriptor {
    pub values: Vec<f64>,
    /// True when the image had no gradients (e.g. constant input).
    pub is_zero: bool,
}

impl ImageDescriptor {
    pub fn cosine(&self, other: &ImageDescriptor) -> f64 {
        if self.is_zero || other.is_zero {
            return 0.0;
        }
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// Histogram gradient orientations over a 4x4 cell grid; votes are
/// magnitude-weighted with hard bin assignment.
pub fn describe(image: &Grid) -> Result<ImageDescriptor> {
    let (h, w) = (image.h(), image.w());
    if h < 8 || w < 8 {
        return Err(Error::invalid(format!(
            "descriptor needs at least 8x8 pixels, got {h}x{w}"
        )));
    }
    let gray = |y: usize, x: usize| -> f64 {
        (0..image.c()).map(|ch| image.at(y, x, ch)).sum::<f64>() / image.c() as f64
    };
    let mut values = vec![0.0f64; DESCRIPTOR_DIM];
    for y in 1..h - 1 {
        let cy = (y * GRID_CELLS / h).min(GRID_CELLS - 1);
        for x in 1..w - 1 {
            let gx = (gray(y, x + 1) - gray(y, x - 1)) * 0.5;
            let gy = (gray(y + 1, x) - gray(y - 1, x)) * 0.5;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut angle = gy.atan2(gx);
            if angle < 0.0 {
                angle += 2.0 * std::f64::consts::PI;
            }
            let bin = ((angle / (2.0 * std::f64::consts::PI) * ORIENT_BINS as f64) as usize)
                .min(ORIENT_BINS - 1);
            let cx = (x * GRID_CELLS / w).min(GRID_CELLS - 1);
            values[(cy * GRID_CELLS + cx) * ORIENT_BINS + bin] += mag;
        }
    }
    let norm2: f64 = values.iter().map(|v| v * v).sum();
    if norm2 == 0.0 {
        return Ok(ImageDescriptor {
            values,
            is_zero: true,
        });
    }
    let inv = 1.0 / norm2.sqrt();
    for v in &mut values {
        *v *= inv;
    }
    Ok(ImageDescriptor {
        values,
        is_zero: false,
    })
}

/// Index of the gallery descriptor with maximum cosine similarity to the
/// target; ties resolve to the smallest index.
pub fn select_reference(target: &ImageDescriptor, gallery: &[ImageDescriptor]) -> Result<usize> {
    if gallery.is_empty() {
        return Err(Error::invalid("reference gallery is empty"));
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for (i, g) in gallery.iter().enumerate() {
        let sim = target.cosine(g);
        if sim > best {
            best = sim;
            best_idx = i;
        }
    }
    Ok(best_idx)
}
