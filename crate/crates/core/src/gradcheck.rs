//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used here, so the numeric gradient is
//! independent of the backward pass it is compared against.

/// One forward evaluation: the scalar loss and the sign pattern of every
/// ReLU input (empty when the function has no kinks).
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub kinks: Vec<bool>,
}

impl Probe {
    pub fn smooth(loss: f64) -> Self {
        Self { loss, kinks: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum relative error.
    pub relative: f64,
    /// Floor on the relative-error denominator. Below it the finite difference
    /// is dominated by rounding (about `eps * |loss| / step`), so the check
    /// degrades to an absolute bound of `relative * floor`.
    pub floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { step: 1e-5, relative: 1e-4, floor: 1e-6 }
    }
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because the `±step` probes straddled a ReLU kink.
    pub skipped_kinks: usize,
    pub max_relative_error: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.checked > 0
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        self.max_relative_error = self.max_relative_error.max(other.max_relative_error);
        self.mismatches.extend(other.mismatches);
    }
}

/// Compares `analytic[i]` to the central difference of `eval` at every `i` in
/// `indices`. `eval` receives a perturbed copy of `point`.
pub fn check_gradient<F>(
    mut eval: F,
    point: &[f64],
    analytic: &[f64],
    indices: &[usize],
    tol: Tolerance,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> Probe,
{
    let mut report = GradCheckReport::default();
    let mut x = point.to_vec();
    for &i in indices {
        let orig = x[i];
        x[i] = orig + tol.step;
        let plus = eval(&x);
        x[i] = orig - tol.step;
        let minus = eval(&x);
        x[i] = orig;
        if plus.kinks != minus.kinks {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * tol.step);
        let a = analytic[i];
        report.checked += 1;
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(tol.floor);
        report.max_relative_error = report.max_relative_error.max(err);
        if err.is_nan() || err > tol.relative {
            report.mismatches.push(Mismatch { index: i, analytic: a, numeric, relative_error: err });
        }
    }
    report
}
