//! Independent reference implementations used to cross-check the
//! production kernels.
//!
//! Everything in this module is written as the most literal loop possible
//! and shares no code with the implementations it checks. It backs both
//! the test suites and the runtime `selfcheck` battery.
#![allow(clippy::needless_range_loop)]

use crate::grid::Grid;
use crate::stm::PatchMatrix;

/// Plain dense 2-D convolution, weight layout `[ky][kx][cin][cout]`.
pub fn conv2d_naive(
    x: &Grid,
    weight: &[f64],
    bias: &[f64],
    k: usize,
    cout: usize,
    stride: usize,
    pad: usize,
) -> Grid {
    let cin = x.c();
    let oh = (x.h() + 2 * pad - k) / stride + 1;
    let ow = (x.w() + 2 * pad - k) / stride + 1;
    let mut out = Grid::zeros(oh, ow, cout);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = bias[co];
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        for ci in 0..cin {
                            let xv = x.at_or_zero(iy, ix, ci);
                            let wv = weight[((ky * k + kx) * cin + ci) * cout + co];
                            acc += xv * wv;
                        }
                    }
                }
                *out.at_mut(oy, ox, co) = acc;
            }
        }
    }
    out
}

/// The naive triple loop over (row, column, descriptor element) that the
/// optimized correlation kernel must reproduce: `C[i][j]` is the inner
/// product of query row `i` and key row `j`, `D[i]` the smallest `j`
/// attaining the row maximum, `A[i]` that maximum.
pub fn correlate_naive(q: &PatchMatrix, kref: &PatchMatrix) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
    let n = q.n_rows();
    let m = kref.n_rows();
    let dim = q.dim();
    assert_eq!(dim, kref.dim(), "descriptor length mismatch");
    let mut c = vec![vec![0.0; m]; n];
    let mut d = vec![0usize; n];
    let mut a = vec![f64::NEG_INFINITY; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..dim {
                acc += q.row(i)[t] * kref.row(j)[t];
            }
            c[i][j] = acc;
            if acc > a[i] {
                a[i] = acc;
                d[i] = j;
            }
        }
    }
    (c, d, a)
}

/// Scalar per-pixel bilinear interpolation evaluated directly from the
/// four-term formula; out-of-bounds neighbors contribute zero.
pub fn bilinear_at(values: &Grid, x: f64, y: f64, ch: usize) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let v00 = values.at_or_zero(y0, x0, ch);
    let v01 = values.at_or_zero(y0, x0 + 1, ch);
    let v10 = values.at_or_zero(y0 + 1, x0, ch);
    let v11 = values.at_or_zero(y0 + 1, x0 + 1, ch);
    v00 * (1.0 - fx) * (1.0 - fy) + v01 * fx * (1.0 - fy) + v10 * (1.0 - fx) * fy + v11 * fx * fy
}

/// Flat-loop mean absolute difference of `a * weight_per_position` and `b`,
/// the elementwise oracle for the transfer consistency loss.
pub fn weighted_l1_mean_naive(a: &Grid, weights: &[f64], b: &Grid) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let c = a.c();
    let mut acc = 0.0;
    for (i, (&av, &bv)) in a.data().iter().zip(b.data()).enumerate() {
        let pos = i / c;
        acc += (av * weights[pos] - bv).abs();
    }
    acc / a.len() as f64
}
