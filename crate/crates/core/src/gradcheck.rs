//! Central finite-difference gradient verification.
//!
//! Used by unit tests, the acceptance suite and the runtime selfcheck:
//! a scalar function of a parameter vector is perturbed by +/- eps per
//! coordinate and the secant slope compared against the analytic
//! gradient under a floored relative error.

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Relative error with an absolute floor so near-zero gradient pairs
/// compare on FD noise rather than blowing up.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Central-difference derivative of `f` at coordinate `i` of `params`.
pub fn central_difference(
    f: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    i: usize,
    eps: f64,
) -> f64 {
    let mut p = params.to_vec();
    let orig = p[i];
    p[i] = orig + eps;
    let fp = f(&p);
    p[i] = orig - eps;
    let fm = f(&p);
    (fp - fm) / (2.0 * eps)
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOutcome {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub n_checked: usize,
}

impl CheckOutcome {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Check the analytic gradient of `f` at `params` against central
/// differences on the given coordinates (all coordinates when `indices`
/// is empty).
pub fn check_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    indices: &[usize],
    eps: f64,
) -> CheckOutcome {
    assert_eq!(params.len(), analytic.len());
    let all: Vec<usize>;
    let idx: &[usize] = if indices.is_empty() {
        all = (0..params.len()).collect();
        &all
    } else {
        indices
    };
    let mut worst = CheckOutcome {
        max_rel_err: 0.0,
        worst_index: 0,
        n_checked: idx.len(),
    };
    for &i in idx {
        let numeric = central_difference(f, params, i, eps);
        let err = relative_error(analytic[i], numeric);
        if err > worst.max_rel_err {
            worst.max_rel_err = err;
            worst.worst_index = i;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_verifies() {
        // f(x) = sum x_i^2, grad = 2x.
        let params: Vec<f64> = vec![0.5, -1.25, 2.0];
        let analytic: Vec<f64> = params.iter().map(|x| 2.0 * x).collect();
        let mut f = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>();
        let out = check_gradient(&mut f, &params, &analytic, &[], DEFAULT_EPS);
        assert!(out.passes(DEFAULT_TOL), "max rel err {}", out.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let params: Vec<f64> = vec![0.5, -1.25, 2.0];
        let mut analytic: Vec<f64> = params.iter().map(|x| 2.0 * x).collect();
        analytic[1] *= 1.05;
        let mut f = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>();
        let out = check_gradient(&mut f, &params, &analytic, &[], DEFAULT_EPS);
        assert!(!out.passes(DEFAULT_TOL));
        assert_eq!(out.worst_index, 1);
    }
}
