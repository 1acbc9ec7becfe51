//! Central finite-difference verification of analytic gradients.

use alloc::vec::Vec;

use super::Tensor;

/// Outcome of a finite-difference sweep: the worst relative error and where
/// it occurred.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares `analytic` (the gradient of `eval` at `theta`) against central
/// differences with the given step, element by element. The relative error
/// denominator is max(|analytic|, |numeric|, 1e-8).
pub fn finite_diff_check(
    mut eval: impl FnMut(&[Tensor]) -> f64,
    analytic: &[Tensor],
    theta: &[Tensor],
    step: f64,
) -> FdReport {
    assert!(step > 0.0, "step must be positive");
    assert_eq!(analytic.len(), theta.len());
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = theta.to_vec();
    for (pi, t) in theta.iter().enumerate() {
        for ei in 0..t.len() {
            let orig = t.data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let f_plus = eval(&work);
            work[pi].data_mut()[ei] = orig - step;
            let f_minus = eval(&work);
            work[pi].data_mut()[ei] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let ana = analytic[pi].data()[ei];
            let denom = ana.abs().max(numeric.abs()).max(1e-8);
            let rel = (ana - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report = FdReport {
                    max_rel_err: rel,
                    worst_param: pi,
                    worst_index: ei,
                    analytic: ana,
                    numeric,
                };
            }
        }
    }
    report
}
