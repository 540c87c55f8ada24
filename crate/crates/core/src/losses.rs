//! Objective terms: the visibility-masked heatmap loss, the hard/soft
//! transfer consistency loss, and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureVolume, Grid};
use crate::heatmaps::HeatmapStack;

pub const DEFAULT_LAMBDA: f64 = 0.1;

/// The assembled objective. `overall` is computed once as
/// `l1 + lambda * l2` and reproduced bit-for-bit by recomputation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub l2: f64,
    pub lambda: f64,
    pub overall: f64,
}

/// Mean squared heatmap error with per-landmark visibility masking:
/// per image, `(1/M) sum_m gamma_m |O_m - O*_m|^2 + (1/P) sum_p |B_p - B*_p|^2`,
/// averaged over images. Squared norms sum over all pixels of a channel;
/// `P = 0` drops the boundary term.
pub fn heatmap_loss(preds: &[&HeatmapStack], truths: &[&HeatmapStack], visibility: &[&[bool]]) -> Result<f64> {
    if preds.len() != truths.len() || preds.len() != visibility.len() || preds.is_empty() {
        return Err(Error::shape(
            "heatmap_loss",
            "equal nonzero counts of predictions, truths and masks",
            format!("{}/{}/{}", preds.len(), truths.len(), visibility.len()),
        ));
    }
    let n = preds.len() as f64;
    let mut total = 0.0;
    for ((pred, truth), vis) in preds.iter().zip(truths).zip(visibility) {
        total += per_image_loss(pred, truth, vis)?;
    }
    Ok(total / n)
}

fn per_image_loss(pred: &HeatmapStack, truth: &HeatmapStack, vis: &[bool]) -> Result<f64> {
    if pred.grid.shape() != truth.grid.shape()
        || pred.n_landmarks != truth.n_landmarks
        || pred.n_boundaries != truth.n_boundaries
    {
        return Err(Error::shape(
            "heatmap_loss",
            format!(
                "{} (M={}, P={})",
                truth.grid.shape_str(),
                truth.n_landmarks,
                truth.n_boundaries
            ),
            format!(
                "{} (M={}, P={})",
                pred.grid.shape_str(),
                pred.n_landmarks,
                pred.n_boundaries
            ),
        ));
    }
    let m = pred.n_landmarks;
    let p = pred.n_boundaries;
    if vis.len() != m {
        return Err(Error::shape("heatmap_loss", format!("{m} visibility flags"), format!("{}", vis.len())));
    }
    let (h, w) = (pred.grid.h(), pred.grid.w());
    let channels = pred.grid.c();
    let mut per_channel = vec![0.0f64; channels];
    for y in 0..h {
        for x in 0..w {
            let off = pred.grid.idx(y, x, 0);
            let ps = &pred.grid.data()[off..off + channels];
            let ts = &truth.grid.data()[off..off + channels];
            for ch in 0..channels {
                let d = ps[ch] - ts[ch];
                per_channel[ch] += d * d;
            }
        }
    }
    let mut landmark_term = 0.0;
    for ch in 0..m {
        if vis[ch] {
            landmark_term += per_channel[ch];
        }
    }
    let mut total = landmark_term / m as f64;
    if p > 0 {
        let boundary_term: f64 = per_channel[m..].iter().sum();
        total += boundary_term / p as f64;
    }
    Ok(total)
}

/// Analytic gradient of [`heatmap_loss`] with respect to each prediction:
/// `2 (pred - truth) * mask / (N * M)` on landmark channels and
/// `2 (pred - truth) / (N * P)` on boundary channels.
pub fn heatmap_loss_backward(
    preds: &[&HeatmapStack],
    truths: &[&HeatmapStack],
    visibility: &[&[bool]],
) -> Result<Vec<Grid>> {
    let n = preds.len() as f64;
    let mut grads = Vec::with_capacity(preds.len());
    for ((pred, truth), vis) in preds.iter().zip(truths).zip(visibility) {
        // Reuse the forward validation.
        per_image_loss(pred, truth, vis)?;
        let m = pred.n_landmarks;
        let p = pred.n_boundaries;
        let channels = pred.grid.c();
        let mut g = Grid::zeros(pred.grid.h(), pred.grid.w(), channels);
        for (i, gv) in g.data_mut().iter_mut().enumerate() {
            let ch = i % channels;
            let scale = if ch < m {
                if vis[ch] {
                    2.0 / (n * m as f64)
                } else {
                    0.0
                }
            } else {
                2.0 / (n * p as f64)
            };
            *gv = scale * (pred.grid.data()[i] - truth.grid.data()[i]);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Mean absolute difference between the attention-weighted hard transfer
/// and the soft transfer: `mean | F_E * A - F_S |` with the attention
/// broadcast over channels.
pub fn consistency_loss(fe: &FeatureVolume, fs: &FeatureVolume, attention: &[f64]) -> Result<f64> {
    check_consistency_shapes(fe, fs, attention)?;
    let c = fe.grid.c();
    let mut acc = 0.0;
    for (i, (&ev, &sv)) in fe.grid.data().iter().zip(fs.grid.data()).enumerate() {
        acc += (ev * attention[i / c] - sv).abs();
    }
    Ok(acc / fe.grid.len() as f64)
}

/// Gradients of [`consistency_loss`] with respect to `fe` and `fs`, with
/// the attention treated as a constant:
/// `sign(fe * A - fs) * A / count` and `-sign(fe * A - fs) / count`.
pub fn consistency_loss_backward(
    fe: &FeatureVolume,
    fs: &FeatureVolume,
    attention: &[f64],
) -> Result<(Grid, Grid)> {
    check_consistency_shapes(fe, fs, attention)?;
    let c = fe.grid.c();
    let count = fe.grid.len() as f64;
    let mut gfe = Grid::zeros(fe.grid.h(), fe.grid.w(), c);
    let mut gfs = Grid::zeros(fe.grid.h(), fe.grid.w(), c);
    for (i, (&ev, &sv)) in fe.grid.data().iter().zip(fs.grid.data()).enumerate() {
        let a = attention[i / c];
        let s = (ev * a - sv).signum();
        let s = if ev * a == sv { 0.0 } else { s };
        gfe.data_mut()[i] = s * a / count;
        gfs.data_mut()[i] = -s / count;
    }
    Ok((gfe, gfs))
}

fn check_consistency_shapes(fe: &FeatureVolume, fs: &FeatureVolume, attention: &[f64]) -> Result<()> {
    if fe.grid.shape() != fs.grid.shape() {
        return Err(Error::shape("consistency_loss", fe.grid.shape_str(), fs.grid.shape_str()));
    }
    let n = fe.grid.h() * fe.grid.w();
    if attention.len() != n {
        return Err(Error::shape(
            "consistency_loss",
            format!("attention of length {n}"),
            format!("{}", attention.len()),
        ));
    }
    Ok(())
}

/// Combine the two objective terms into `l1 + lambda * l2`.
pub fn overall_loss(l1: f64, l2: f64, lambda: f64) -> Result<LossReport> {
    if l1 < 0.0 || l2 < 0.0 || lambda < 0.0 {
        return Err(Error::invalid(format!(
            "loss terms must be non-negative, got l1={l1}, l2={l2}, lambda={lambda}"
        )));
    }
    Ok(LossReport {
        l1,
        l2,
        lambda,
        overall: l1 + lambda * l2,
    })
}
