use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{noising, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::nn::layers::{tanh, tanh_backward};
use crate::nn::params::prefixed;
use crate::nn::{Linear, Matrix, Parameters};

/// Width of the fixed sinusoidal timestep embedding.
pub const TIME_FEATURES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Sample width; also the width of the image condition.
    pub width: usize,
    pub n_concepts: usize,
    pub hidden: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.n_concepts == 0 || self.hidden == 0 {
            return Err(Error::config("denoiser widths must be positive"));
        }
        Ok(())
    }
}

/// `ε̂ = out(tanh(hidden(tanh(x W_x + e_T W_T + c_I W_I + τ(t) W_t + b))))`.
///
/// The text condition `e_T` is a one-hot concept label and `τ(t)` a fixed
/// sinusoidal embedding; the image condition enters through its own weight
/// block so it can be dropped without touching the rest of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub w_x: Matrix,
    pub w_text: Matrix,
    pub w_image: Matrix,
    pub w_time: Matrix,
    pub bias: Matrix,
    pub hidden: Linear,
    pub out: Linear,
}

impl DenoiserParams {
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let fan_in = (2 * config.width + config.n_concepts + TIME_FEATURES) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let h = config.hidden;
        Ok(DenoiserParams {
            w_x: Matrix::random_uniform(config.width, h, bound, rng),
            w_text: Matrix::random_uniform(config.n_concepts, h, bound, rng),
            w_image: Matrix::random_uniform(config.width, h, bound, rng),
            w_time: Matrix::random_uniform(TIME_FEATURES, h, bound, rng),
            bias: Matrix::zeros(1, h),
            hidden: Linear::init(h, h, rng),
            out: Linear::init(h, config.width, rng),
        })
    }

    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        Ok(DenoiserParams {
            w_x: Matrix::zeros(config.width, h),
            w_text: Matrix::zeros(config.n_concepts, h),
            w_image: Matrix::zeros(config.width, h),
            w_time: Matrix::zeros(TIME_FEATURES, h),
            bias: Matrix::zeros(1, h),
            hidden: Linear::zeros(h, h),
            out: Linear::zeros(h, config.width),
        })
    }

    pub fn config(&self) -> DenoiserConfig {
        DenoiserConfig {
            width: self.w_x.rows(),
            n_concepts: self.w_text.rows(),
            hidden: self.bias.cols(),
        }
    }
}

impl Parameters for DenoiserParams {
    fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("w_x".to_string(), &self.w_x),
            ("w_text".to_string(), &self.w_text),
            ("w_image".to_string(), &self.w_image),
            ("w_time".to_string(), &self.w_time),
            ("bias".to_string(), &self.bias),
        ];
        out.extend(prefixed("hidden", self.hidden.named()));
        out.extend(prefixed("out", self.out.named()));
        out
    }

    fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![
            &mut self.w_x,
            &mut self.w_text,
            &mut self.w_image,
            &mut self.w_time,
            &mut self.bias,
        ];
        out.extend(self.hidden.matrices_mut());
        out.extend(self.out.matrices_mut());
        out
    }
}

/// `[sin(2^k π t/T), cos(2^k π t/T)]` for `k = 0..4`, one row per timestep.
pub fn time_features(ts: &[usize], t_max: usize) -> Matrix {
    let mut m = Matrix::zeros(ts.len(), TIME_FEATURES);
    for (r, &t) in ts.iter().enumerate() {
        let s = t as f64 / t_max as f64;
        for k in 0..TIME_FEATURES / 2 {
            let w = (1 << k) as f64 * PI * s;
            m.set(r, 2 * k, w.sin());
            m.set(r, 2 * k + 1, w.cos());
        }
    }
    m
}

/// One-hot rows for concept labels.
pub fn one_hot(ids: &[usize], n_concepts: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(ids.len(), n_concepts);
    for (r, &id) in ids.iter().enumerate() {
        if id >= n_concepts {
            return Err(Error::argument(format!("concept {id} out of range 0..{n_concepts}")));
        }
        m.set(r, id, 1.0);
    }
    Ok(m)
}

/// Network inputs for a batch; rows are samples.
#[derive(Clone, Debug)]
pub struct DenoiserInput<'a> {
    pub x_t: &'a Matrix,
    pub text: &'a Matrix,
    /// `None` is the text-only network.
    pub image: Option<&'a Matrix>,
    pub time: &'a Matrix,
}

pub struct DenoiserTrace {
    h1: Matrix,
    h2: Matrix,
    out: Matrix,
}

impl DenoiserTrace {
    pub fn output(&self) -> &Matrix {
        &self.out
    }
}

fn check_rows(input: &DenoiserInput, params: &DenoiserParams) -> Result<()> {
    let cfg = params.config();
    let b = input.x_t.rows();
    let mut expect = vec![
        ("x_t", input.x_t.shape(), (b, cfg.width)),
        ("text", input.text.shape(), (b, cfg.n_concepts)),
        ("time", input.time.shape(), (b, TIME_FEATURES)),
    ];
    if let Some(image) = input.image {
        expect.push(("image", image.shape(), (b, cfg.width)));
    }
    for (op, found, wanted) in expect {
        if found != wanted {
            return Err(Error::Shape {
                op,
                left: wanted,
                right: found,
            });
        }
    }
    Ok(())
}

pub fn denoise_traced(input: &DenoiserInput, params: &DenoiserParams) -> Result<DenoiserTrace> {
    check_rows(input, params)?;
    let mut pre = input.x_t.matmul(&params.w_x)?;
    pre.add_assign(&input.text.matmul(&params.w_text)?)?;
    if let Some(image) = input.image {
        pre.add_assign(&image.matmul(&params.w_image)?)?;
    }
    pre.add_assign(&input.time.matmul(&params.w_time)?)?;
    let h1 = tanh(&pre.add_row_broadcast(&params.bias)?);
    let h2 = tanh(&params.hidden.forward(&h1)?);
    let out = params.out.forward(&h2)?;
    Ok(DenoiserTrace { h1, h2, out })
}

pub fn denoise(input: &DenoiserInput, params: &DenoiserParams) -> Result<Matrix> {
    Ok(denoise_traced(input, params)?.out)
}

/// Parameter gradient given `∂/∂ε̂`.
pub fn denoise_backward(
    input: &DenoiserInput,
    params: &DenoiserParams,
    trace: &DenoiserTrace,
    grad_out: &Matrix,
) -> Result<DenoiserParams> {
    let (g_h2, out) = params.out.backward(&trace.h2, grad_out)?;
    let g_pre2 = tanh_backward(&trace.h2, &g_h2)?;
    let (g_h1, hidden) = params.hidden.backward(&trace.h1, &g_pre2)?;
    let g_pre1 = tanh_backward(&trace.h1, &g_h1)?;
    let w_image = match input.image {
        Some(image) => image.t_matmul(&g_pre1)?,
        None => Matrix::zeros(params.w_image.rows(), params.w_image.cols()),
    };
    Ok(DenoiserParams {
        w_x: input.x_t.t_matmul(&g_pre1)?,
        w_text: input.text.t_matmul(&g_pre1)?,
        w_image,
        w_time: input.time.t_matmul(&g_pre1)?,
        bias: g_pre1.column_sums(),
        hidden,
        out,
    })
}

/// A denoising training batch: clean samples with their conditions, drawn
/// timesteps and noise. Rows are samples.
#[derive(Clone, Debug)]
pub struct DiffusionBatch {
    pub x0: Matrix,
    pub concepts: Vec<usize>,
    /// Image condition `c_I`; an all-zero row means "no image prompt".
    pub image: Matrix,
    pub t: Vec<usize>,
    pub eps: Matrix,
}

impl DiffusionBatch {
    fn noised(&self, sched: &DiffusionSchedule) -> Result<Matrix> {
        if self.t.len() != self.x0.rows() || self.concepts.len() != self.x0.rows() {
            return Err(Error::Shape {
                op: "diffusion_batch",
                left: self.x0.shape(),
                right: (self.t.len(), self.concepts.len()),
            });
        }
        let mut x_t = Matrix::zeros(self.x0.rows(), self.x0.cols());
        for (r, &t) in self.t.iter().enumerate() {
            let x0 = Matrix::row_vector(self.x0.row(r).to_vec());
            let eps = Matrix::row_vector(self.eps.row(r).to_vec());
            x_t.row_mut(r).copy_from_slice(noising(&x0, t, &eps, sched)?.as_slice());
        }
        Ok(x_t)
    }
}

struct Prepared {
    x_t: Matrix,
    text: Matrix,
    time: Matrix,
}

fn prepare(batch: &DiffusionBatch, params: &DenoiserParams, sched: &DiffusionSchedule) -> Result<Prepared> {
    Ok(Prepared {
        x_t: batch.noised(sched)?,
        text: one_hot(&batch.concepts, params.config().n_concepts)?,
        time: time_features(&batch.t, sched.steps()),
    })
}

fn mean_squared_residual(eps: &Matrix, pred: &Matrix) -> Result<f64> {
    Ok(eps.squared_distance(pred)? / eps.rows().max(1) as f64)
}

/// Image-conditioned loss: batch mean of `‖ε − ε_θ(x_t, c_T, c_I, t)‖²`.
pub fn denoiser_loss(batch: &DiffusionBatch, params: &DenoiserParams, sched: &DiffusionSchedule) -> Result<f64> {
    let p = prepare(batch, params, sched)?;
    let input = DenoiserInput {
        x_t: &p.x_t,
        text: &p.text,
        image: Some(&batch.image),
        time: &p.time,
    };
    mean_squared_residual(&batch.eps, &denoise(&input, params)?)
}

/// Text-only loss: batch mean of `‖ε − ε_θ(x_t, c_T, t)‖²`; the image
/// condition in `batch` is ignored.
pub fn denoiser_loss_text_only(
    batch: &DiffusionBatch,
    params: &DenoiserParams,
    sched: &DiffusionSchedule,
) -> Result<f64> {
    let p = prepare(batch, params, sched)?;
    let input = DenoiserInput {
        x_t: &p.x_t,
        text: &p.text,
        image: None,
        time: &p.time,
    };
    mean_squared_residual(&batch.eps, &denoise(&input, params)?)
}

/// [`denoiser_loss`] and its parameter gradient.
pub fn denoiser_loss_backward(
    batch: &DiffusionBatch,
    params: &DenoiserParams,
    sched: &DiffusionSchedule,
) -> Result<(f64, DenoiserParams)> {
    let p = prepare(batch, params, sched)?;
    let input = DenoiserInput {
        x_t: &p.x_t,
        text: &p.text,
        image: Some(&batch.image),
        time: &p.time,
    };
    let trace = denoise_traced(&input, params)?;
    let n = batch.eps.rows().max(1) as f64;
    let loss = mean_squared_residual(&batch.eps, trace.output())?;
    let grad_out = trace.output().sub(&batch.eps)?.scale(2.0 / n);
    Ok((loss, denoise_backward(&input, params, &trace, &grad_out)?))
}
