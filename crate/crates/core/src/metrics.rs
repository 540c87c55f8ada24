//! Landmark detection metrics: normalized mean error under four
//! normalizations, the cumulative error curve with its AUC, and the
//! failure rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmaps::LandmarkSet;

pub const DEFAULT_AUC_CUTOFF: f64 = 0.07;
pub const DEFAULT_FR_THRESHOLD: f64 = 0.1;

/// How the landmark error is normalized. Index-based kinds measure the
/// distance on the ground-truth points; box kinds use the annotated
/// detection box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormalizationSpec {
    /// Distance between the two pupil centers, each the mean of the
    /// listed landmark indices.
    Interpupil { left: Vec<usize>, right: Vec<usize> },
    /// Distance between the outer eye corners.
    Interocular { left_outer: usize, right_outer: usize },
    /// Geometric mean of the ground-truth box width and height.
    BoxGeomean { width: f64, height: f64 },
    /// Diagonal of the tight bounding box of the ground-truth landmarks.
    Diag,
}

impl NormalizationSpec {
    /// The normalization term `d` for a ground-truth landmark set.
    pub fn distance(&self, truth: &LandmarkSet) -> Result<f64> {
        let d = match self {
            NormalizationSpec::Interpupil { left, right } => {
                let l = mean_point(truth, left)?;
                let r = mean_point(truth, right)?;
                dist(l, r)
            }
            NormalizationSpec::Interocular { left_outer, right_outer } => {
                let l = point_at(truth, *left_outer)?;
                let r = point_at(truth, *right_outer)?;
                dist(l, r)
            }
            NormalizationSpec::BoxGeomean { width, height } => (width * height).sqrt(),
            NormalizationSpec::Diag => {
                let xs: Vec<f64> = truth.points.iter().map(|p| p.0).collect();
                let ys: Vec<f64> = truth.points.iter().map(|p| p.1).collect();
                let w = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
                let h = ys.iter().cloned().fold(f64::MIN, f64::max) - ys.iter().cloned().fold(f64::MAX, f64::min);
                (w * w + h * h).sqrt()
            }
        };
        if !d.is_finite() || d <= 0.0 {
            return Err(Error::invalid(format!("normalization distance must be positive, got {d}")));
        }
        Ok(d)
    }
}

fn point_at(set: &LandmarkSet, i: usize) -> Result<(f64, f64)> {
    set.points
        .get(i)
        .copied()
        .ok_or_else(|| Error::invalid(format!("landmark index {i} out of range for {} points", set.len())))
}

fn mean_point(set: &LandmarkSet, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::invalid("pupil index list must not be empty"));
    }
    let mut acc = (0.0, 0.0);
    for &i in indices {
        let p = point_at(set, i)?;
        acc.0 += p.0;
        acc.1 += p.1;
    }
    let n = indices.len() as f64;
    Ok((acc.0 / n, acc.1 / n))
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Normalized mean error: the mean over landmarks of the Euclidean
/// prediction error divided by the normalization term. Invisible
/// landmarks are included; see [`nme_visible_only`] for the masked
/// variant.
pub fn nme(pred: &LandmarkSet, truth: &LandmarkSet, norm: &NormalizationSpec) -> Result<f64> {
    nme_with(pred, truth, norm, false)
}

/// NME averaged over ground-truth-visible landmarks only.
pub fn nme_visible_only(pred: &LandmarkSet, truth: &LandmarkSet, norm: &NormalizationSpec) -> Result<f64> {
    nme_with(pred, truth, norm, true)
}

fn nme_with(pred: &LandmarkSet, truth: &LandmarkSet, norm: &NormalizationSpec, visible_only: bool) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "nme",
            format!("{} landmarks", truth.len()),
            format!("{}", pred.len()),
        ));
    }
    let d = norm.distance(truth)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if visible_only && !truth.visibility[i] {
            continue;
        }
        total += dist(pred.points[i], truth.points[i]) / d;
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("no visible landmarks to evaluate"));
    }
    Ok(total / count as f64)
}

/// The cumulative error curve sampled at uniform abscissae.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeCurve {
    /// (nme value, fraction of images with NME <= value) pairs.
    pub points: Vec<(f64, f64)>,
    pub cutoff: f64,
}

/// Fraction of images with NME <= x, sampled at `steps` uniform x in
/// [0, cutoff].
pub fn cumulative_curve(nmes: &[f64], cutoff: f64, steps: usize) -> Result<CumulativeCurve> {
    if nmes.is_empty() {
        return Err(Error::invalid("cumulative curve needs at least one NME"));
    }
    if cutoff <= 0.0 {
        return Err(Error::invalid(format!("cutoff must be positive, got {cutoff}")));
    }
    if steps < 2 {
        return Err(Error::invalid(format!("curve needs at least 2 steps, got {steps}")));
    }
    let n = nmes.len() as f64;
    let points = (0..steps)
        .map(|i| {
            let x = cutoff * i as f64 / (steps - 1) as f64;
            let frac = nmes.iter().filter(|&&v| v <= x).count() as f64 / n;
            (x, frac)
        })
        .collect();
    Ok(CumulativeCurve { points, cutoff })
}

/// Trapezoidal area under the curve, normalized by the cutoff so a
/// constant-1 curve scores exactly 1.
pub fn auc(curve: &CumulativeCurve) -> f64 {
    let pts = &curve.points;
    let mut area = 0.0;
    for pair in pts.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        area += (x1 - x0) * (y0 + y1) * 0.5;
    }
    area / curve.cutoff
}

/// Fraction of images whose NME exceeds the threshold.
pub fn failure_rate(nmes: &[f64], threshold: f64) -> f64 {
    if nmes.is_empty() {
        return 0.0;
    }
    nmes.iter().filter(|&&v| v > threshold).count() as f64 / nmes.len() as f64
}

/// Aggregate evaluation over a set of images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_image: Vec<ImageNme>,
    pub mean_nme: f64,
    pub auc: f64,
    pub auc_cutoff: f64,
    pub failure_rate: f64,
    pub fr_threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageNme {
    pub stem: String,
    pub nme: f64,
}

pub fn evaluate(
    named_nmes: Vec<(String, f64)>,
    auc_cutoff: f64,
    fr_threshold: f64,
    curve_steps: usize,
) -> Result<(EvaluationReport, CumulativeCurve)> {
    let nmes: Vec<f64> = named_nmes.iter().map(|(_, v)| *v).collect();
    let curve = cumulative_curve(&nmes, auc_cutoff, curve_steps)?;
    let report = EvaluationReport {
        mean_nme: nmes.iter().sum::<f64>() / nmes.len() as f64,
        auc: auc(&curve),
        auc_cutoff,
        failure_rate: failure_rate(&nmes, fr_threshold),
        fr_threshold,
        per_image: named_nmes
            .into_iter()
            .map(|(stem, nme)| ImageNme { stem, nme })
            .collect(),
    };
    Ok((report, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: Vec<(f64, f64)>) -> LandmarkSet {
        LandmarkSet::all_visible(points, (100, 100)).unwrap()
    }

    #[test]
    fn exact_match_is_zero() {
        let t = set(vec![(10.0, 10.0), (50.0, 10.0)]);
        let norm = NormalizationSpec::Interocular { left_outer: 0, right_outer: 1 };
        assert_eq!(nme(&t, &t, &norm).unwrap(), 0.0);
    }

    #[test]
    fn three_four_five_example() {
        let truth = set(vec![(0.0, 0.0), (10.0, 0.0)]);
        let pred = set(vec![(3.0, 4.0), (10.0, 0.0)]);
        let norm = NormalizationSpec::BoxGeomean { width: 10.0, height: 10.0 };
        let v = nme(&pred, &truth, &norm).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn box_geomean_distance() {
        let truth = set(vec![(0.0, 0.0)]);
        let pred = set(vec![(8.0, 0.0)]);
        let norm = NormalizationSpec::BoxGeomean { width: 100.0, height: 64.0 };
        assert!((norm.distance(&truth).unwrap() - 80.0).abs() < 1e-12);
        assert!((nme(&pred, &truth, &norm).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn diag_uses_tight_box() {
        let truth = set(vec![(0.0, 0.0), (30.0, 40.0), (10.0, 5.0)]);
        let norm = NormalizationSpec::Diag;
        assert!((norm.distance(&truth).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn interpupil_uses_mean_of_indices() {
        let truth = set(vec![(0.0, 0.0), (2.0, 0.0), (10.0, 0.0), (12.0, 0.0)]);
        let norm = NormalizationSpec::Interpupil {
            left: vec![0, 1],
            right: vec![2, 3],
        };
        assert!((norm.distance(&truth).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_count_mismatch_and_degenerate_distance() {
        let a = set(vec![(0.0, 0.0)]);
        let b = set(vec![(0.0, 0.0), (1.0, 1.0)]);
        let norm = NormalizationSpec::Diag;
        assert!(nme(&a, &b, &norm).is_err());
        assert!(norm.distance(&a).is_err());
    }

    #[test]
    fn nme_scales_inversely_with_d_and_ignores_translation() {
        let truth = set(vec![(0.0, 0.0), (10.0, 0.0)]);
        let pred = set(vec![(0.0, 2.0), (10.0, 2.0)]);
        let d10 = NormalizationSpec::BoxGeomean { width: 10.0, height: 10.0 };
        let d20 = NormalizationSpec::BoxGeomean { width: 20.0, height: 20.0 };
        let v10 = nme(&pred, &truth, &d10).unwrap();
        let v20 = nme(&pred, &truth, &d20).unwrap();
        assert!((v10 - 2.0 * v20).abs() < 1e-15);

        let shift = |s: &LandmarkSet| set(s.points.iter().map(|&(x, y)| (x + 7.0, y - 3.0)).collect());
        let v_shifted = nme(&shift(&pred), &shift(&truth), &d10).unwrap();
        assert!((v10 - v_shifted).abs() < 1e-12);
    }

    #[test]
    fn visible_only_flag_masks_points() {
        let truth = LandmarkSet::new(
            vec![(0.0, 0.0), (10.0, 0.0)],
            vec![true, false],
            (100, 100),
        )
        .unwrap();
        let pred = set(vec![(0.0, 0.0), (10.0, 100.0)]);
        let norm = NormalizationSpec::BoxGeomean { width: 10.0, height: 10.0 };
        assert_eq!(nme_visible_only(&pred, &truth, &norm).unwrap(), 0.0);
        assert!(nme(&pred, &truth, &norm).unwrap() > 0.0);
    }

    #[test]
    fn degenerate_curve_is_constant_one() {
        let curve = cumulative_curve(&[0.0, 0.0, 0.0], 0.08, 5).unwrap();
        assert!(curve.points.iter().all(|&(_, f)| f == 1.0));
        assert_eq!(auc(&curve), 1.0);
    }

    #[test]
    fn two_point_ecdf_curve() {
        let curve = cumulative_curve(&[0.02, 0.06], 0.08, 9).unwrap();
        for &(x, f) in &curve.points {
            let expect = if x < 0.02 {
                0.0
            } else if x < 0.06 {
                0.5
            } else {
                1.0
            };
            assert_eq!(f, expect, "at x = {x}");
        }
    }

    #[test]
    fn two_point_ecdf_auc_at_007() {
        // Grid of 8 steps lands on 0.02 and 0.06 exactly: samples are
        // [0, 0, .5, .5, .5, .5, 1, 1] at spacing 0.01, so the trapezoid
        // sum is 0.01 * (0 + .25 + .5 + .5 + .5 + .75 + 1) = 0.035 and the
        // normalized area is 0.5.
        let curve = cumulative_curve(&[0.02, 0.06], 0.07, 8).unwrap();
        assert!((auc(&curve) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn failure_rate_half_fail() {
        assert_eq!(failure_rate(&[0.05, 0.15], 0.1), 0.5);
        assert_eq!(failure_rate(&[], 0.1), 0.0);
    }

    #[test]
    fn fr_complements_curve_at_threshold() {
        let nmes = [0.01, 0.05, 0.09, 0.11, 0.2];
        // Steps chosen so x = 0.1 is a grid point (21 steps over [0, 0.2]).
        let curve = cumulative_curve(&nmes, 0.2, 21).unwrap();
        let at_t = curve.points.iter().find(|&&(x, _)| (x - 0.1).abs() < 1e-12).unwrap().1;
        assert_eq!(failure_rate(&nmes, 0.1), 1.0 - at_t);
    }

    #[test]
    fn curve_rejects_bad_inputs() {
        assert!(cumulative_curve(&[], 0.1, 5).is_err());
        assert!(cumulative_curve(&[0.1], 0.0, 5).is_err());
        assert!(cumulative_curve(&[0.1], 0.1, 1).is_err());
    }
}
