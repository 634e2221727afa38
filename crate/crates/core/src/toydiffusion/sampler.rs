use serde::{Deserialize, Serialize};

use super::denoiser::{denoise, one_hot, time_features, DenoiserInput, DenoiserParams};
use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{stream_rng, Stream};

/// `α_t` below this is clamped before dividing by it.
pub const ALPHA_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `1 × width`.
    pub x: Matrix,
    pub concept_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Entries of the `x̂0` estimate are clipped to `±x0_clip`. Near `t = T`
    /// the estimate divides by a vanishing `α_t` and is otherwise unbounded.
    pub x0_clip: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            x0_clip: 5.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &DiffusionSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.steps() {
            return Err(Error::argument(format!(
                "sampler steps must lie in 1..={}, got {}",
                sched.steps(),
                self.steps
            )));
        }
        if !(self.x0_clip > 0.0) {
            return Err(Error::config("x0_clip must be positive"));
        }
        Ok(())
    }
}

/// Deterministic DDIM-style reverse process.
///
/// `x_T` is drawn from `seed`; on the grid `τ_i = round(iT/steps)` each step
/// sets `x̂0 = (x_t − σ_t ε̂)/α_t`, clips it, re-derives `ε̂` from the
/// clipped estimate and moves to `x_{τ_{i−1}} = α x̂0 + σ ε̂`. The `image`
/// condition is used as given; scale it beforehand to set its strength.
pub fn sample(
    params: &DenoiserParams,
    concept_id: usize,
    image: Option<&Matrix>,
    sched: &DiffusionSchedule,
    config: SamplerConfig,
    seed: u64,
) -> Result<Sample> {
    config.validate(sched)?;
    let width = params.config().width;
    let t_max = sched.steps();
    let text = one_hot(&[concept_id], params.config().n_concepts)?;
    let mut x = Matrix::random_normal(1, width, 1.0, &mut stream_rng(seed, Stream::Sampler));
    let grid: Vec<usize> = (0..=config.steps)
        .map(|i| ((i * t_max) as f64 / config.steps as f64).round() as usize)
        .collect();
    for i in (1..=config.steps).rev() {
        let (t, prev) = (grid[i], grid[i - 1]);
        let time = time_features(&[t], t_max);
        let input = DenoiserInput {
            x_t: &x,
            text: &text,
            image,
            time: &time,
        };
        let eps_hat = denoise(&input, params)?;
        let (a, s) = (sched.alpha[t], sched.sigma[t]);
        let x0_hat = x
            .sub(&eps_hat.scale(s))?
            .scale(1.0 / a.max(ALPHA_FLOOR))
            .map(|v| v.clamp(-config.x0_clip, config.x0_clip));
        let eps_hat = if s > 0.0 {
            x.sub(&x0_hat.scale(a))?.scale(1.0 / s)
        } else {
            eps_hat
        };
        x = x0_hat.scale(sched.alpha[prev]);
        x.add_scaled(&eps_hat, sched.sigma[prev])?;
    }
    if !x.is_finite() {
        return Err(Error::NonFinite {
            iteration: 0,
            term: "sample".into(),
            value: x
                .as_slice()
                .iter()
                .copied()
                .find(|v| !v.is_finite())
                .unwrap_or(f64::NAN),
        });
    }
    Ok(Sample { x, concept_id })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydiffusion::denoiser::DenoiserConfig;
    use crate::toydiffusion::schedule::{make_schedule, ScheduleKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> DenoiserParams {
        let cfg = DenoiserConfig {
            width: 4,
            n_concepts: 3,
            hidden: 8,
        };
        DenoiserParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    #[test]
    fn single_step_is_the_x0_estimate() {
        let p = params();
        let sched = make_schedule(10, ScheduleKind::Linear).unwrap();
        let cfg = SamplerConfig { steps: 1, x0_clip: 1e9 };
        let out = sample(&p, 1, None, &sched, cfg, 5).unwrap();
        // α_T = 0 exactly, so x̂0 = (x_T − ε̂) / ALPHA_FLOOR.
        let x_t = Matrix::random_normal(1, 4, 1.0, &mut stream_rng(5, Stream::Sampler));
        let input = DenoiserInput {
            x_t: &x_t,
            text: &one_hot(&[1], 3).unwrap(),
            image: None,
            time: &time_features(&[10], 10),
        };
        let eps = denoise(&input, &p).unwrap();
        let expected = x_t.sub(&eps).unwrap().scale(1.0 / ALPHA_FLOOR);
        assert!(out.x.squared_distance(&expected).unwrap().sqrt() <= 1e-6 * expected.sum_squares().sqrt());
    }

    #[test]
    fn deterministic_and_finite() {
        let p = params();
        let image = Matrix::row_vector(vec![0.1, -0.2, 0.3, 0.0]);
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let sched = make_schedule(40, kind).unwrap();
            for steps in [1, 3, 7, 40] {
                let cfg = SamplerConfig {
                    steps,
                    ..SamplerConfig::default()
                };
                let a = sample(&p, 2, Some(&image), &sched, cfg, 11).unwrap();
                let b = sample(&p, 2, Some(&image), &sched, cfg, 11).unwrap();
                assert_eq!(a, b);
                assert!(a.x.is_finite());
                assert!(a.x.as_slice().iter().all(|v| v.abs() <= cfg.x0_clip));
            }
        }
    }

    #[test]
    fn steps_out_of_range() {
        let sched = make_schedule(10, ScheduleKind::Cosine).unwrap();
        for steps in [0, 11] {
            let cfg = SamplerConfig {
                steps,
                ..SamplerConfig::default()
            };
            assert!(matches!(
                sample(&params(), 0, None, &sched, cfg, 0),
                Err(Error::Argument(_))
            ));
        }
    }
}
