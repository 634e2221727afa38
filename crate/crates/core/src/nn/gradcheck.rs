//! Central finite-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

/// Floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Largest step/2·step disagreement accepted by [`is_resolvable`].
pub const RESOLUTION_TOLERANCE: f64 = 1e-6;
/// Smallest derivative magnitude [`is_resolvable`] treats as measurable.
pub const MIN_RESOLVABLE: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst_coordinate: usize,
    pub coordinates: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum GradCheckError {
    #[error("objective not finite at coordinate {coordinate} ({side} step): {value}")]
    NonFinite {
        coordinate: usize,
        side: &'static str,
        value: f64,
    },
    #[error("analytic gradient not finite at coordinate {coordinate}: {value}")]
    NonFiniteAnalytic { coordinate: usize, value: f64 },
    #[error("gradient has {analytic} entries but point has {point}")]
    Length { analytic: usize, point: usize },
}

/// Compares `analytic` against central differences of `f` at `point`.
///
/// The per-coordinate error is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`; the maximum
/// over coordinates is reported.
pub fn grad_check<F>(mut f: F, point: &[f64], analytic: &[f64], step: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != point.len() {
        return Err(GradCheckError::Length {
            analytic: analytic.len(),
            point: point.len(),
        });
    }
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        coordinates: point.len(),
    };
    for i in 0..x.len() {
        let a = analytic[i];
        if !a.is_finite() {
            return Err(GradCheckError::NonFiniteAnalytic {
                coordinate: i,
                value: a,
            });
        }
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        for (side, value) in [("plus", plus), ("minus", minus)] {
            if !value.is_finite() {
                return Err(GradCheckError::NonFinite {
                    coordinate: i,
                    side,
                    value,
                });
            }
        }
        let numeric = (plus - minus) / (2.0 * step);
        let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        let err = (a - numeric).abs() / denom;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coordinate = i;
        }
    }
    Ok(report)
}

/// Self-consistency of central differences at `point`.
///
/// Returns the largest per-coordinate relative disagreement between central
/// differences taken at `step` and at `2 * step`, using the same denominator
/// floor as [`grad_check`]. A coordinate whose differences both stay below
/// `min_magnitude` counts as unresolved (infinite disagreement): round-off can
/// flatten such a derivative to exactly zero at both steps.
///
/// It never looks at an analytic gradient, so it can be used to reject points
/// where finite differences cannot resolve the gradient without biasing an
/// audit.
pub fn fd_resolution<F>(mut f: F, point: &[f64], step: f64, min_magnitude: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let mut central = |x: &mut Vec<f64>, i: usize, h: f64| {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(x);
        x[i] = orig - h;
        let minus = f(x);
        x[i] = orig;
        (plus - minus) / (2.0 * h)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let fine = central(&mut x, i, step);
        let coarse = central(&mut x, i, 2.0 * step);
        if fine.abs().max(coarse.abs()) < min_magnitude {
            return f64::INFINITY;
        }
        let denom = fine.abs().max(coarse.abs()).max(REL_ERROR_FLOOR);
        let err = (fine - coarse).abs() / denom;
        // NaN must count as unresolvable
        if !(err <= worst) {
            worst = if err.is_nan() { f64::INFINITY } else { err };
        }
    }
    worst
}

/// Whether central differences at `step` resolve every coordinate of the
/// gradient of `f` at `point`.
///
/// Deep attention stacks routinely have derivatives around 1e-10 that
/// round-off flattens to zero; such points say nothing about a backward pass.
pub fn is_resolvable<F>(f: F, point: &[f64], step: f64) -> bool
where
    F: FnMut(&[f64]) -> f64,
{
    fd_resolution(f, point, step, MIN_RESOLVABLE) <= RESOLUTION_TOLERANCE
}

/// Runs `body` on `count` independently seeded generators.
pub fn random_instances(count: u64, seed: u64, mut body: impl FnMut(&mut ChaCha8Rng)) {
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i));
        body(&mut rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let r = grad_check(|x| 3.0 * x[0], &[0.7], &[3.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn quadratic_is_exact_for_central_differences() {
        let r = grad_check(|x| x[0] * x[0], &[1.0], &[2.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_reported_at_its_coordinate() {
        let f = |x: &[f64]| x[0] * x[0] + 2.0 * x[1];
        let r = grad_check(f, &[1.0, 1.0], &[2.0, -2.0], 1e-5).unwrap();
        assert_eq!(r.worst_coordinate, 1);
        assert!((r.max_rel_error - 2.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_evaluation_names_coordinate() {
        let f = |x: &[f64]| if x[1] > 0.5 { f64::NAN } else { x[0] };
        let err = grad_check(f, &[0.0, 0.5], &[1.0, 0.0], 1e-5).unwrap_err();
        assert!(
            matches!(err, GradCheckError::NonFinite { coordinate: 1, side: "plus", value } if value.is_nan()),
            "{err}"
        );
    }

    #[test]
    fn resolution_of_smooth_function() {
        let f = |x: &[f64]| x[0].sin() + x[1] * x[1];
        assert!(fd_resolution(f, &[0.3, 0.7], 1e-5, 1e-7) < 1e-8);
        assert!(is_resolvable(f, &[0.3, 0.7], 1e-5));
    }

    #[test]
    fn flat_coordinate_is_unresolvable() {
        let f = |x: &[f64]| x[0] + 1e-12 * x[1];
        assert_eq!(fd_resolution(f, &[1.0, 1.0], 1e-5, 1e-7), f64::INFINITY);
        assert!(!is_resolvable(f, &[1.0, 1.0], 1e-5));
    }

    #[test]
    fn noisy_function_is_unresolvable() {
        // round-off sized wiggle dominates the finite difference
        let f = |x: &[f64]| 1e-6 * x[0] + 1e-10 * (x[0] * 1e7).sin();
        assert!(!is_resolvable(f, &[0.5], 1e-5));
    }

    #[test]
    fn zero_gradient_within_floor() {
        let r = grad_check(|_| 1.0, &[0.3, 0.4], &[0.0, 0.0], 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }
}
