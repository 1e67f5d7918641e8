//! Central finite-difference verification of analytic gradients.

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so exact zeros compare sanely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates excluded because the step straddles a ReLU kink.
    pub kinks: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Checks every coordinate. `op` returns the scalar value and its analytic gradient.
pub fn grad_check<F>(op: F, input: &[f64], tol: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let all: Vec<usize> = (0..input.len()).collect();
    grad_check_at(op, input, &all, tol)
}

/// Checks only the listed coordinates (for large parameter vectors).
pub fn grad_check_at<F>(op: F, input: &[f64], indices: &[usize], tol: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    check(op, input, indices, tol, false)
}

/// Like [`grad_check_at`] for piecewise-linear networks. A coordinate whose
/// central difference at `FD_STEP` disagrees with the one at `FD_STEP / 10` by
/// more than `tol / 10` crosses a kink inside the stencil; it is skipped and
/// counted in `kinks`.
pub fn grad_check_piecewise<F>(op: F, input: &[f64], indices: &[usize], tol: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    check(op, input, indices, tol, true)
}

fn check<F>(mut op: F, input: &[f64], indices: &[usize], tol: f64, piecewise: bool) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = op(input);
    assert_eq!(analytic.len(), input.len(), "gradient length must match input");
    let mut x = input.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        kinks: 0,
        tol,
    };
    for &i in indices {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let (fp, _) = op(&x);
        x[i] = orig - FD_STEP;
        let (fm, _) = op(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        if piecewise {
            let small = FD_STEP / 10.0;
            x[i] = orig + small;
            let (sp, _) = op(&x);
            x[i] = orig - small;
            let (sm, _) = op(&x);
            x[i] = orig;
            if relative_error(numeric, (sp - sm) / (2.0 * small)) > 0.1 * tol {
                report.kinks += 1;
                continue;
            }
        }
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report
}
