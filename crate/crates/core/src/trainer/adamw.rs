use crate::error::{Error, Result};
use crate::nn::Parameters;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        Ok(())
    }
}

/// Adam moment estimates, shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<P> {
    pub m: P,
    pub v: P,
    pub step: u64,
}

impl<P: Parameters> OptimizerState<P> {
    pub fn new(params: &P) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update: decoupled decay `p ← p − lr·wd·p`, then the
/// bias-corrected Adam step.
pub fn adamw_step<P: Parameters>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState<P>,
    cfg: &AdamWConfig,
) -> Result<()> {
    params.check_congruent(grads)?;
    params.check_congruent(&state.m)?;
    params.check_congruent(&state.v)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let grads = grads.named();
    let ms = state.m.matrices_mut();
    let vs = state.v.matrices_mut();
    for (((p, (_, g)), m), v) in params.matrices_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        let g = g.as_slice();
        let (p, m, v) = (p.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice());
        for i in 0..p.len() {
            p[i] -= cfg.learning_rate * cfg.weight_decay * p[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
