/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the worst discrepancy.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Central difference `(f(θ+h) − f(θ−h)) / 2h` along one coordinate.
pub fn central_difference(
    f: &mut impl FnMut(&[f64]) -> f64,
    theta: &mut [f64],
    index: usize,
    h: f64,
) -> f64 {
    let orig = theta[index];
    theta[index] = orig + h;
    let up = f(theta);
    theta[index] = orig - h;
    let down = f(theta);
    theta[index] = orig;
    (up - down) / (2.0 * h)
}

/// How each numeric derivative is formed from central differences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// One central difference at step h.
    #[default]
    Central,
    /// Richardson extrapolation `(4·D(h/2) − D(h)) / 3` of two central
    /// differences, cancelling the h² truncation term.
    Extrapolated,
}

impl Stencil {
    pub fn derivative(
        self,
        f: &mut impl FnMut(&[f64]) -> f64,
        theta: &mut [f64],
        index: usize,
        h: f64,
    ) -> f64 {
        match self {
            Stencil::Central => central_difference(f, theta, index, h),
            Stencil::Extrapolated => {
                let coarse = central_difference(f, theta, index, h);
                let fine = central_difference(f, theta, index, h / 2.0);
                (4.0 * fine - coarse) / 3.0
            }
        }
    }
}

/// Worst relative discrepancy between `analytic` and central differences of
/// `f` at `theta`, with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// The step for coordinate `i` is `h · max(1, |θᵢ|)`.
pub fn finite_diff_check(
    f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    h: f64,
) -> GradCheckReport {
    finite_diff_check_with(f, theta, analytic, h, Stencil::Central)
}

/// [`finite_diff_check`] with a chosen stencil.
pub fn finite_diff_check_with(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    h: f64,
    stencil: Stencil,
) -> GradCheckReport {
    assert!(h > 0.0, "finite difference step must be positive");
    assert_eq!(theta.len(), analytic.len(), "gradient length mismatch");
    let mut theta = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
        coordinates: theta.len(),
    };
    for i in 0..theta.len() {
        let step = h * theta[i].abs().max(1.0);
        let numeric = stencil.derivative(&mut f, &mut theta, i, step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report
}
