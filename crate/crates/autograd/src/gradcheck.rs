//! Central finite-difference gradient checking.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Probes rejected by [`check_piecewise`] because the stencil straddled a
    /// kink.
    pub skipped: usize,
}

/// Compares `analytic` with central differences of `f` around `x`, probing at
/// most `max_probes` evenly spread coordinates.
pub fn check<T: Scalar>(
    x: &Tensor<T>,
    analytic: &Tensor<T>,
    mut f: impl FnMut(&Tensor<T>) -> f64,
    step: f64,
    floor: f64,
    max_probes: usize,
) -> GradCheckReport {
    compare(x, analytic, floor, max_probes, |probe, i| {
        let (plus, minus) = (shifted(probe, i, step, &mut f), shifted(probe, i, -step, &mut f));
        (plus - minus) / (2.0 * step)
    })
}

/// As [`check`] with the five-point stencil, whose truncation error is
/// O(step^4) instead of O(step^2). Suited to functions with strong curvature.
pub fn check_five_point<T: Scalar>(
    x: &Tensor<T>,
    analytic: &Tensor<T>,
    mut f: impl FnMut(&Tensor<T>) -> f64,
    step: f64,
    floor: f64,
    max_probes: usize,
) -> GradCheckReport {
    compare(x, analytic, floor, max_probes, |probe, i| {
        let mut at = |k: f64| shifted(probe, i, k * step, &mut f);
        (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * step)
    })
}

/// Central differences for piecewise-smooth `f` (ReLU kinks, max-pool
/// switches). One-sided slopes are taken at `step` and `2 * step`; on a smooth
/// stretch their gap grows linearly with the step and both central
/// differences agree. A probe violating either relation by more than
/// `kink_tol * max(|slope|, floor)` straddles a non-differentiable point; it
/// is counted in `skipped` and the next coordinate is tried instead, up to the
/// spacing of the probe grid.
pub fn check_piecewise<T: Scalar>(
    x: &Tensor<T>,
    analytic: &Tensor<T>,
    mut f: impl FnMut(&Tensor<T>) -> f64,
    step: f64,
    floor: f64,
    kink_tol: f64,
    max_probes: usize,
) -> GradCheckReport {
    let n = x.len();
    let stride = (n / max_probes.max(1)).max(1);
    let base = f(x);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, checked: 0, skipped: 0 };
    let mut probe = x.clone();
    for start in (0..n).step_by(stride) {
        for i in start..(start + stride).min(n) {
            let mut slopes = |h: f64| {
                let fwd = (shifted(&mut probe, i, h, &mut f) - base) / h;
                let bwd = (base - shifted(&mut probe, i, -h, &mut f)) / h;
                (fwd, bwd)
            };
            let (f1, b1) = slopes(step);
            let (f2, b2) = slopes(2.0 * step);
            let (near, far) = (0.5 * (f1 + b1), 0.5 * (f2 + b2));
            let scale = f1.abs().max(b1.abs()).max(floor);
            let gap_drift = ((f2 - b2) - 2.0 * (f1 - b1)).abs();
            if gap_drift > kink_tol * scale || (far - near).abs() > kink_tol * scale {
                report.skipped += 1;
                continue;
            }
            let a = analytic.data()[i].as_f64();
            let rel = (a - near).abs() / a.abs().max(near.abs()).max(floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_index = i;
            }
            report.checked += 1;
            break;
        }
    }
    report
}

fn shifted<T: Scalar>(probe: &mut Tensor<T>, i: usize, delta: f64, f: &mut impl FnMut(&Tensor<T>) -> f64) -> f64 {
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + T::of(delta);
    let v = f(probe);
    probe.data_mut()[i] = orig;
    v
}

fn compare<T: Scalar>(
    x: &Tensor<T>,
    analytic: &Tensor<T>,
    floor: f64,
    max_probes: usize,
    mut numeric_at: impl FnMut(&mut Tensor<T>, usize) -> f64,
) -> GradCheckReport {
    let n = x.len();
    let stride = (n / max_probes.max(1)).max(1);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, checked: 0, skipped: 0 };
    let mut probe = x.clone();
    for i in (0..n).step_by(stride) {
        let numeric = numeric_at(&mut probe, i);
        let a = analytic.data()[i].as_f64();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report
}
