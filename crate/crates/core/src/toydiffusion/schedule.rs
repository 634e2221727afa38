use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `α_t = cos(πt / 2T)`, `σ_t = sin(πt / 2T)`.
    Cosine,
    /// `α_t = 1 − t/T`, `σ_t = √(1 − α_t²)`.
    Linear,
}

/// Variance-preserving noise levels for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DiffusionSchedule {
    /// The step count `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }
}

pub fn make_schedule(t_max: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if t_max < 2 {
        return Err(Error::argument(format!("schedule needs at least 2 steps, got {t_max}")));
    }
    let (alpha, sigma) = (0..=t_max)
        .map(|t| {
            let s = t as f64 / t_max as f64;
            match kind {
                ScheduleKind::Cosine => ((FRAC_PI_2 * s).cos(), (FRAC_PI_2 * s).sin()),
                ScheduleKind::Linear => {
                    let a = 1.0 - s;
                    (a, (1.0 - a * a).sqrt())
                }
            }
        })
        .unzip();
    Ok(DiffusionSchedule { kind, alpha, sigma })
}

/// `x_t = α_t x0 + σ_t ε`.
pub fn noising(x0: &Matrix, t: usize, eps: &Matrix, sched: &DiffusionSchedule) -> Result<Matrix> {
    if t > sched.steps() {
        return Err(Error::argument(format!("t = {t} outside 0..={}", sched.steps())));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::Shape {
            op: "noising",
            left: x0.shape(),
            right: eps.shape(),
        });
    }
    let (a, s) = (sched.alpha[t], sched.sigma[t]);
    let values = x0
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(x, e)| a * x + s * e)
        .collect();
    Matrix::from_vec(x0.rows(), x0.cols(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::random_instances;
    use rand::Rng;

    #[test]
    fn variance_preserving_and_monotone() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            for t_max in [2, 7, 1000] {
                let s = make_schedule(t_max, kind).unwrap();
                assert_eq!((s.alpha[0], s.sigma[0]), (1.0, 0.0));
                assert!(s.alpha[t_max].abs() < 1e-12);
                for t in 0..=t_max {
                    assert!((s.alpha[t].powi(2) + s.sigma[t].powi(2) - 1.0).abs() <= 1e-12);
                    if t > 0 {
                        assert!(s.alpha[t] <= s.alpha[t - 1]);
                    }
                }
            }
        }
    }

    #[test]
    fn cosine_midpoint() {
        let s = make_schedule(1000, ScheduleKind::Cosine).unwrap();
        assert!((s.alpha[500].powi(2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn too_few_steps() {
        assert!(matches!(
            make_schedule(1, ScheduleKind::Cosine),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn noising_boundaries_and_formula() {
        let s = make_schedule(50, ScheduleKind::Cosine).unwrap();
        random_instances(200, 3, |rng| {
            let x0 = Matrix::random_normal(1, 6, 1.0, rng);
            let eps = Matrix::random_normal(1, 6, 1.0, rng);
            assert_eq!(noising(&x0, 0, &eps, &s).unwrap(), x0);
            let t = rng.gen_range(0..=50);
            let xt = noising(&x0, t, &eps, &s).unwrap();
            for i in 0..6 {
                let direct = s.alpha[t] * x0.get(0, i) + s.sigma[t] * eps.get(0, i);
                assert!((xt.get(0, i) - direct).abs() <= 1e-15);
            }
        });
        let lin = make_schedule(4, ScheduleKind::Linear).unwrap();
        let x0 = Matrix::row_vector(vec![3.0, -1.0]);
        let eps = Matrix::row_vector(vec![0.5, 2.0]);
        assert_eq!(noising(&x0, 4, &eps, &lin).unwrap(), eps);
        assert!(matches!(noising(&x0, 5, &eps, &lin), Err(Error::Argument(_))));
    }

    #[test]
    fn noising_is_linear() {
        let s = make_schedule(20, ScheduleKind::Linear).unwrap();
        random_instances(100, 4, |rng| {
            let t = rng.gen_range(0..=20);
            let (a, b) = (
                Matrix::random_normal(1, 5, 1.0, rng),
                Matrix::random_normal(1, 5, 1.0, rng),
            );
            let (e, f) = (
                Matrix::random_normal(1, 5, 1.0, rng),
                Matrix::random_normal(1, 5, 1.0, rng),
            );
            let whole = noising(&a.add(&b).unwrap(), t, &e.add(&f).unwrap(), &s).unwrap();
            let parts = noising(&a, t, &e, &s)
                .unwrap()
                .add(&noising(&b, t, &f, &s).unwrap())
                .unwrap();
            assert!(whole.squared_distance(&parts).unwrap() < 1e-24);
        });
    }
}
