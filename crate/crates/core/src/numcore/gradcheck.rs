//! Central-difference gradient checking.

use super::{Matrix, MlpParams};

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor for relative errors, so that coordinates with a
/// vanishing gradient are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst coordinate found by a check.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            coordinates: self.coordinates + other.coordinates,
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        // NaN must fail the check
        if !(e <= self.max_rel_error) {
            self.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
        }
        self.coordinates += 1;
    }
}

/// Compares `analytic` (ordered like `params.tensors()`) against central
/// differences of `loss` in every coordinate.
pub fn check_params(
    params: &MlpParams<f64>,
    analytic: &[Matrix<f64>],
    loss: impl Fn(&MlpParams<f64>) -> f64,
) -> GradCheck {
    let mut out = GradCheck::default();
    let n_tensors = params.tensors().count();
    assert_eq!(n_tensors, analytic.len(), "one gradient per parameter tensor");
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut().nth(k).expect("tensor index").as_mut_slice()[i] += delta;
                loss(&p)
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            out.record(grad.as_slice()[i], numeric);
        }
    }
    out
}

/// Same check for a plain input matrix.
pub fn check_matrix(x: &Matrix<f64>, analytic: &Matrix<f64>, loss: impl Fn(&Matrix<f64>) -> f64) -> GradCheck {
    let mut out = GradCheck::default();
    for i in 0..x.len() {
        let eval = |delta: f64| {
            let mut p = x.clone();
            p.as_mut_slice()[i] += delta;
            loss(&p)
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        out.record(analytic.as_slice()[i], numeric);
    }
    out
}
