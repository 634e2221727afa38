//! The iteratively updated preference objective.
//!
//! Distances below are squared Euclidean norms over every token×feature
//! entry. Writing `y = f_θ(c)`, `r = f_ref(c)`:
//!
//! ```text
//! L_base = mean ‖c_I^w − y‖²
//! L_pref = mean ℓ(dpo + spin)
//!   dpo  = −[(‖c_I^w−y‖² − ‖c_I^w−r‖²) − (‖c_I^l−y‖² − ‖c_I^l−r‖²)]
//!   spin = −[(‖c_I^w−y‖² − ‖c_I^w−r‖²) − ‖r−y‖²]
//! total = L_base + λ·L_pref
//! ```
//!
//! with `ℓ(a) = log(1 + e^{−a})`. This is the Gaussian log-likelihood-ratio
//! objective at `σ² = 1/2`, `η = μ = 1`; [`l_pref_logratio`] evaluates the
//! general form from log densities and serves as the cross-check.

use serde::{Deserialize, Serialize};

use crate::aligner::{align, align_backward, align_traced, AlignerInput, AlignerParams};
use crate::error::{Error, Result};
use crate::nn::{Matrix, Parameters};
use crate::synthworld::PreferenceTriplet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Weight of `L_pref` in the total.
    pub lambda: f64,
    /// Std of the Gaussian around each model's prediction.
    pub sigma: f64,
    /// KL weight of the DPO term.
    pub eta: f64,
    /// KL weight of the SPIN term.
    pub mu: f64,
    /// Consecutive wins before the reference is replaced.
    pub k: u64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: 1.0,
            sigma: 0.5f64.sqrt(),
            eta: 1.0,
            mu: 1.0,
            k: 10,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be finite and non-negative"));
        }
        for (name, v) in [("sigma", self.sigma), ("eta", self.eta), ("mu", self.mu)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_base: f64,
    pub l_pref: f64,
    pub total: f64,
    /// Batch mean of the DPO part of the `ℓ` argument.
    pub dpo_term: f64,
    /// Batch mean of the SPIN part of the `ℓ` argument.
    pub spin_term: f64,
}

/// `log(1 + e^{−a})`, stable for any finite `a`.
pub fn logistic_loss(a: f64) -> f64 {
    if a >= 0.0 {
        (-a).exp().ln_1p()
    } else {
        -a + a.exp().ln_1p()
    }
}

/// `dℓ/da = −1 / (1 + e^{a})`.
pub fn logistic_loss_derivative(a: f64) -> f64 {
    if a >= 0.0 {
        let e = (-a).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + a.exp())
    }
}

fn check_batch(batch: &[PreferenceTriplet]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::argument("empty batch"));
    }
    Ok(())
}

/// Squared distances and `ℓ`-argument parts for one sample.
#[derive(Clone, Copy, Debug)]
struct PrefParts {
    dpo: f64,
    spin: f64,
}

fn pref_parts(t: &PreferenceTriplet, y: &Matrix, r: &Matrix) -> Result<PrefParts> {
    let win_theta = t.winning.squared_distance(y)?;
    let win_ref = t.winning.squared_distance(r)?;
    let lose_theta = t.losing.squared_distance(y)?;
    let lose_ref = t.losing.squared_distance(r)?;
    let ref_theta = r.squared_distance(y)?;
    Ok(PrefParts {
        dpo: -((win_theta - win_ref) - (lose_theta - lose_ref)),
        spin: -((win_theta - win_ref) - ref_theta),
    })
}

pub fn l_base(batch: &[PreferenceTriplet], params: &AlignerParams) -> Result<f64> {
    check_batch(batch)?;
    let mut sum = 0.0;
    for t in batch {
        sum += t.winning.squared_distance(&align(&t.input(), params)?)?;
    }
    Ok(sum / batch.len() as f64)
}

/// The simplified preference loss with its DPO/SPIN parts:
/// `(l_pref, dpo_term, spin_term)`.
pub fn l_pref_simplified(
    batch: &[PreferenceTriplet],
    params: &AlignerParams,
    ref_params: &AlignerParams,
) -> Result<(f64, f64, f64)> {
    check_batch(batch)?;
    params.check_same_structure(ref_params)?;
    let (mut loss, mut dpo, mut spin) = (0.0, 0.0, 0.0);
    for t in batch {
        let input = t.input();
        let p = pref_parts(t, &align(&input, params)?, &align(&input, ref_params)?)?;
        loss += logistic_loss(p.dpo + p.spin);
        dpo += p.dpo;
        spin += p.spin;
    }
    let n = batch.len() as f64;
    Ok((loss / n, dpo / n, spin / n))
}

/// Log density of `x` under an isotropic Gaussian with mean `mean`.
fn gaussian_log_density(x: &Matrix, mean: &Matrix, sigma: f64) -> Result<f64> {
    let n = x.len() as f64;
    let var = sigma * sigma;
    Ok(-0.5 * n * (2.0 * std::f64::consts::PI * var).ln() - x.squared_distance(mean)? / (2.0 * var))
}

fn log_ratio(x: &Matrix, theta_mean: &Matrix, ref_mean: &Matrix, sigma: f64) -> Result<f64> {
    Ok(gaussian_log_density(x, theta_mean, sigma)? - gaussian_log_density(x, ref_mean, sigma)?)
}

/// The preference loss evaluated from Gaussian log-density ratios:
/// `mean ℓ(η[log-ratio(c_I^w) − log-ratio(c_I^l)] + μ[log-ratio(c_I^w) − log-ratio(f_ref(c))])`.
pub fn l_pref_logratio(
    batch: &[PreferenceTriplet],
    params: &AlignerParams,
    ref_params: &AlignerParams,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    check_batch(batch)?;
    cfg.validate()?;
    params.check_same_structure(ref_params)?;
    let mut loss = 0.0;
    for t in batch {
        let input = t.input();
        let y = align(&input, params)?;
        let r = align(&input, ref_params)?;
        let win = log_ratio(&t.winning, &y, &r, cfg.sigma)?;
        let lose = log_ratio(&t.losing, &y, &r, cfg.sigma)?;
        let reference = log_ratio(&r, &y, &r, cfg.sigma)?;
        loss += logistic_loss(cfg.eta * (win - lose) + cfg.mu * (win - reference));
    }
    Ok(loss / batch.len() as f64)
}

/// Difference of implied rewards `r(c, x_a) − r(c, x_b)`; the partition
/// function cancels.
pub fn implied_reward_gap(
    input: &AlignerInput,
    x_a: &Matrix,
    x_b: &Matrix,
    params: &AlignerParams,
    ref_params: &AlignerParams,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    cfg.validate()?;
    params.check_same_structure(ref_params)?;
    let y = align(input, params)?;
    let r = align(input, ref_params)?;
    for x in [x_a, x_b] {
        if x.shape() != y.shape() {
            return Err(Error::Shape {
                op: "implied_reward_gap",
                left: y.shape(),
                right: x.shape(),
            });
        }
    }
    Ok(cfg.eta * (log_ratio(x_a, &y, &r, cfg.sigma)? - log_ratio(x_b, &y, &r, cfg.sigma)?))
}

fn evaluate(
    batch: &[PreferenceTriplet],
    params: &AlignerParams,
    ref_params: &AlignerParams,
    cfg: &ObjectiveConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<AlignerParams>)> {
    check_batch(batch)?;
    cfg.validate()?;
    params.check_same_structure(ref_params)?;
    let n = batch.len() as f64;
    let mut out = LossBreakdown::default();
    let mut grads = want_grad.then(|| params.zeros_like());
    for t in batch {
        let input = t.input();
        let trace = align_traced(&input, params)?;
        let y = trace.output();
        let r = align(&input, ref_params)?;
        let p = pref_parts(t, y, &r)?;
        let arg = p.dpo + p.spin;
        out.l_base += t.winning.squared_distance(y)? / n;
        out.l_pref += logistic_loss(arg) / n;
        out.dpo_term += p.dpo / n;
        out.spin_term += p.spin / n;
        if let Some(g) = grads.as_mut() {
            // d(dpo + spin)/dy = 4c_I^w − 2c_I^l − 2r, independent of y.
            let darg = t.winning.scale(4.0).sub(&t.losing.scale(2.0))?.sub(&r.scale(2.0))?;
            let mut dy = y.sub(&t.winning)?.scale(2.0 / n);
            dy.add_scaled(&darg, cfg.lambda * logistic_loss_derivative(arg) / n)?;
            let sample = align_backward(&input, params, &trace, &dy)?;
            g.add_scaled(&sample.params, 1.0)?;
        }
    }
    out.total = out.l_base + cfg.lambda * out.l_pref;
    Ok((out, grads))
}

/// `L_base + λ·L_pref` with its parts.
pub fn total_loss(
    batch: &[PreferenceTriplet],
    params: &AlignerParams,
    ref_params: &AlignerParams,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    Ok(evaluate(batch, params, ref_params, cfg, false)?.0)
}

/// [`total_loss`] and its gradient with respect to `params`. The reference
/// network is a constant: no gradient type for it exists.
pub fn total_loss_backward(
    batch: &[PreferenceTriplet],
    params: &AlignerParams,
    ref_params: &AlignerParams,
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, AlignerParams)> {
    let (loss, grads) = evaluate(batch, params, ref_params, cfg, true)?;
    Ok((loss, grads.expect("gradient requested")))
}

/// Whether `f_θ` is closer to the winning features than `f_ref`, comparing
/// batch means.
pub fn theta_wins(batch: &[PreferenceTriplet], params: &AlignerParams, ref_params: &AlignerParams) -> Result<bool> {
    check_batch(batch)?;
    let (mut theta, mut reference) = (0.0, 0.0);
    for t in batch {
        let input = t.input();
        theta += t.winning.squared_distance(&align(&input, params)?)?;
        reference += t.winning.squared_distance(&align(&input, ref_params)?)?;
    }
    Ok(theta < reference)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefUpdateState {
    pub consecutive_wins: u64,
    pub total_swaps: u64,
}

/// Advances the swap controller by one iteration; returns the new state and
/// whether `f_ref` must now be replaced by `f_θ`.
pub fn ref_controller_step(state: RefUpdateState, win: bool, k: u64) -> (RefUpdateState, bool) {
    debug_assert!(k >= 1);
    if !win {
        return (
            RefUpdateState {
                consecutive_wins: 0,
                ..state
            },
            false,
        );
    }
    let wins = state.consecutive_wins + 1;
    if wins >= k {
        (
            RefUpdateState {
                consecutive_wins: 0,
                total_swaps: state.total_swaps + 1,
            },
            true,
        )
    } else {
        (
            RefUpdateState {
                consecutive_wins: wins,
                ..state
            },
            false,
        )
    }
}
