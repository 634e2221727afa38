//! The gradient audit: every hand-written backward pass against central
//! finite differences.
//!
//! Each operation is scalarised against a random projection and checked at
//! several random points. Points where finite differences cannot resolve
//! the gradient (see [`is_resolvable`]) are skipped without consulting the
//! analytic gradient, so skipping never hides a wrong backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aligner::{align, align_backward, align_traced, AlignerConfig, AlignerInput, AlignerParams};
use crate::nn::gradcheck::{grad_check, is_resolvable};
use crate::nn::layers::{layer_norm_rows, layer_norm_rows_backward, softmax_rows_backward, tanh, tanh_backward};
use crate::nn::{CrossAttention, Linear, Matrix, Parameters};
use crate::objective::{total_loss, total_loss_backward, ObjectiveConfig};
use crate::synthworld::PreferenceTriplet;
use crate::toydiffusion::{
    denoiser_loss, denoiser_loss_backward, make_schedule, DenoiserConfig, DenoiserParams, DiffusionBatch, ScheduleKind,
};

pub const AUDIT_STEP: f64 = 1e-5;
pub const AUDIT_TOLERANCE: f64 = 1e-5;

/// Operations in audit order.
pub const AUDITED_OPS: [&str; 8] = [
    "linear",
    "cross_attention",
    "layer_norm",
    "tanh",
    "softmax",
    "aligner",
    "total_loss",
    "denoiser",
];

/// A scalar function of a flat point together with its claimed gradient.
pub struct Probe {
    pub label: &'static str,
    pub f: Box<dyn Fn(&[f64]) -> f64>,
    pub point: Vec<f64>,
    pub analytic: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditEntry {
    pub op: String,
    /// Points checked (each contributes one or more probes).
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<AuditEntry>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

fn project(out: &Matrix, r: &Matrix) -> f64 {
    out.hadamard(r).expect("projection shape").sum()
}

fn reshaped(rows: usize, cols: usize, flat: &[f64]) -> Matrix {
    Matrix::from_vec(rows, cols, flat.to_vec()).expect("probe shape")
}

/// Same weights, redrawn at a scale where attention is far from uniform.
fn spread<P: Parameters, R: Rng>(mut p: P, rng: &mut R) -> P {
    for m in p.matrices_mut() {
        *m = Matrix::random_normal(m.rows(), m.cols(), 0.5, rng);
    }
    p
}

fn linear_probes(rng: &mut ChaCha8Rng) -> Vec<Probe> {
    let (n, d_in, d_out) = (3, 4, 3);
    let layer = Linear {
        weight: Matrix::random_normal(d_in, d_out, 1.0, rng),
        bias: Matrix::random_normal(1, d_out, 1.0, rng),
    };
    let x = Matrix::random_normal(n, d_in, 1.0, rng);
    let r = Matrix::random_normal(n, d_out, 1.0, rng);
    let (gx, gp) = layer.backward(&x, &r).expect("shapes");
    let (l1, x1, r1) = (layer.clone(), x.clone(), r.clone());
    let (l2, r2) = (layer.clone(), r);
    vec![
        Probe {
            label: "params",
            f: Box::new(move |v| {
                let mut l = l1.clone();
                l.assign_flat(v).expect("length");
                project(&l.forward(&x1).expect("shapes"), &r1)
            }),
            point: layer.flatten(),
            analytic: gp.flatten(),
        },
        Probe {
            label: "input",
            f: Box::new(move |v| project(&l2.forward(&reshaped(n, d_in, v)).expect("shapes"), &r2)),
            point: x.as_slice().to_vec(),
            analytic: gx.into_vec(),
        },
    ]
}

fn attention_probes(rng: &mut ChaCha8Rng) -> Vec<Probe> {
    let (d, nq, nkv) = (4, 2, 3);
    let layer = spread(CrossAttention::init(d, rng), rng);
    let q = Matrix::random_normal(nq, d, 1.0, rng);
    let kv = Matrix::random_normal(nkv, d, 1.0, rng);
    let r = Matrix::random_normal(nq, d, 1.0, rng);
    let (_, cache) = layer.forward_cached(&q, &kv).expect("shapes");
    let (gin, gp) = layer.backward(&q, &kv, &cache, &r).expect("shapes");
    let by_params = {
        let (layer, q, kv, r) = (layer.clone(), q.clone(), kv.clone(), r.clone());
        move |v: &[f64]| {
            let mut l = layer.clone();
            l.assign_flat(v).expect("length");
            project(&l.forward(&q, &kv).expect("shapes"), &r)
        }
    };
    let by_query = {
        let (layer, kv, r) = (layer.clone(), kv.clone(), r.clone());
        move |v: &[f64]| project(&layer.forward(&reshaped(nq, d, v), &kv).expect("shapes"), &r)
    };
    let by_kv = {
        let (layer, q, r) = (layer.clone(), q.clone(), r);
        move |v: &[f64]| project(&layer.forward(&q, &reshaped(nkv, d, v)).expect("shapes"), &r)
    };
    vec![
        Probe {
            label: "params",
            f: Box::new(by_params),
            point: layer.flatten(),
            analytic: gp.flatten(),
        },
        Probe {
            label: "query",
            f: Box::new(by_query),
            point: q.as_slice().to_vec(),
            analytic: gin.query_source.into_vec(),
        },
        Probe {
            label: "key_value",
            f: Box::new(by_kv),
            point: kv.as_slice().to_vec(),
            analytic: gin.key_value_source.into_vec(),
        },
    ]
}

fn elementwise_probe(
    rng: &mut ChaCha8Rng,
    forward: fn(&Matrix) -> Matrix,
    backward: impl Fn(&Matrix, &Matrix) -> Matrix,
) -> Vec<Probe> {
    let (n, d) = (3, 5);
    let x = Matrix::random_normal(n, d, 1.0, rng);
    let r = Matrix::random_normal(n, d, 1.0, rng);
    let g = backward(&x, &r);
    vec![Probe {
        label: "input",
        f: Box::new(move |v| project(&forward(&reshaped(n, d, v)), &r)),
        point: x.as_slice().to_vec(),
        analytic: g.into_vec(),
    }]
}

fn audit_config() -> AlignerConfig {
    AlignerConfig {
        d_guidance: 4,
        d_image: 4,
        ..AlignerConfig::default()
    }
}

fn aligner_probes(rng: &mut ChaCha8Rng) -> Vec<Probe> {
    let config = audit_config();
    let params = spread(AlignerParams::init(config, rng).expect("valid config"), rng);
    let input = AlignerInput::new(
        Matrix::random_normal(2, config.d_guidance, 1.0, rng),
        Matrix::random_normal(2, config.d_image, 1.0, rng),
    );
    let r = Matrix::random_normal(2, config.d_image, 1.0, rng);
    let trace = align_traced(&input, &params).expect("shapes");
    let g = align_backward(&input, &params, &trace, &r).expect("shapes");
    let objective = move |p: &AlignerParams, x: &AlignerInput| project(&align(x, p).expect("shapes"), &r);
    let by_params = {
        let (params, input, objective) = (params.clone(), input.clone(), objective.clone());
        move |v: &[f64]| {
            let mut p = params.clone();
            p.assign_flat(v).expect("length");
            objective(&p, &input)
        }
    };
    let by_image = {
        let (params, input, objective) = (params.clone(), input.clone(), objective.clone());
        move |v: &[f64]| {
            let mut x = input.clone();
            x.image = reshaped(2, config.d_image, v);
            objective(&params, &x)
        }
    };
    let by_guidance = {
        let (params, input) = (params.clone(), input.clone());
        move |v: &[f64]| {
            let mut x = input.clone();
            x.guidance = reshaped(2, config.d_guidance, v);
            objective(&params, &x)
        }
    };
    vec![
        Probe {
            label: "params",
            f: Box::new(by_params),
            point: params.flatten(),
            analytic: g.params.flatten(),
        },
        Probe {
            label: "image",
            f: Box::new(by_image),
            point: input.image.as_slice().to_vec(),
            analytic: g.image.into_vec(),
        },
        Probe {
            label: "guidance",
            f: Box::new(by_guidance),
            point: input.guidance.as_slice().to_vec(),
            analytic: g.guidance.into_vec(),
        },
    ]
}

fn total_loss_probes(rng: &mut ChaCha8Rng) -> Vec<Probe> {
    let config = audit_config();
    let objective = ObjectiveConfig {
        lambda: 0.8,
        ..ObjectiveConfig::default()
    };
    let theta = spread(AlignerParams::init(config, rng).expect("valid config"), rng);
    let reference = AlignerParams::init(config, rng).expect("valid config");
    let batch: Vec<PreferenceTriplet> = (0..2)
        .map(|_| PreferenceTriplet {
            concept_id: 0,
            label_swapped: false,
            guidance: Matrix::random_normal(2, config.d_guidance, 1.0, rng),
            losing: Matrix::random_normal(2, config.d_image, 1.0, rng),
            winning: Matrix::random_normal(2, config.d_image, 1.0, rng),
        })
        .collect();
    let (_, g) = total_loss_backward(&batch, &theta, &reference, &objective).expect("shapes");
    let point = theta.flatten();
    vec![Probe {
        label: "params",
        f: Box::new(move |v| {
            let mut p = theta.clone();
            p.assign_flat(v).expect("length");
            total_loss(&batch, &p, &reference, &objective).expect("shapes").total
        }),
        point,
        analytic: g.flatten(),
    }]
}

fn denoiser_probes(rng: &mut ChaCha8Rng) -> Vec<Probe> {
    let config = DenoiserConfig {
        width: 3,
        n_concepts: 2,
        hidden: 5,
    };
    let sched = make_schedule(20, ScheduleKind::Cosine).expect("valid schedule");
    let params = DenoiserParams::init(config, rng).expect("valid config");
    let n = 4;
    let batch = DiffusionBatch {
        x0: Matrix::random_normal(n, config.width, 1.0, rng),
        concepts: (0..n).map(|_| rng.gen_range(0..config.n_concepts)).collect(),
        image: Matrix::random_normal(n, config.width, 1.0, rng),
        t: (0..n).map(|_| rng.gen_range(0..=20)).collect(),
        eps: Matrix::random_normal(n, config.width, 1.0, rng),
    };
    let (_, g) = denoiser_loss_backward(&batch, &params, &sched).expect("shapes");
    let point = params.flatten();
    vec![Probe {
        label: "params",
        f: Box::new(move |v| {
            let mut p = params.clone();
            p.assign_flat(v).expect("length");
            denoiser_loss(&batch, &p, &sched).expect("shapes")
        }),
        point,
        analytic: g.flatten(),
    }]
}

/// Draws the probes for one random point of `op`.
pub fn probes_for(op: &str, rng: &mut ChaCha8Rng) -> Option<Vec<Probe>> {
    Some(match op {
        "linear" => linear_probes(rng),
        "cross_attention" => attention_probes(rng),
        "layer_norm" => elementwise_probe(rng, layer_norm_rows, |x, r| {
            layer_norm_rows_backward(x, r).expect("shapes")
        }),
        "tanh" => elementwise_probe(rng, tanh, |x, r| tanh_backward(&tanh(x), r).expect("shapes")),
        "softmax" => elementwise_probe(rng, Matrix::softmax_rows, |x, r| {
            softmax_rows_backward(&x.softmax_rows(), r).expect("shapes")
        }),
        "aligner" => aligner_probes(rng),
        "total_loss" => total_loss_probes(rng),
        "denoiser" => denoiser_probes(rng),
        _ => return None,
    })
}

/// Checks `points` resolvable random points of `op`. `tamper` may alter each
/// analytic gradient before comparison; the audit itself passes a no-op.
pub fn audit_op(op: &str, points: usize, seed: u64, tamper: &dyn Fn(&str, &mut Vec<f64>)) -> AuditEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entry = AuditEntry {
        op: op.to_string(),
        points: 0,
        max_rel_error: 0.0,
        passed: true,
        note: None,
    };
    let max_candidates = 60 * points.max(1);
    for _ in 0..max_candidates {
        if entry.points == points {
            break;
        }
        let Some(probes) = probes_for(op, &mut rng) else {
            entry.passed = false;
            entry.note = Some(format!("unknown operation {op}"));
            return entry;
        };
        if !probes.iter().all(|p| is_resolvable(&p.f, &p.point, AUDIT_STEP)) {
            continue;
        }
        entry.points += 1;
        for mut p in probes {
            tamper(op, &mut p.analytic);
            match grad_check(&p.f, &p.point, &p.analytic, AUDIT_STEP) {
                Ok(report) => entry.max_rel_error = entry.max_rel_error.max(report.max_rel_error),
                Err(e) => {
                    entry.max_rel_error = f64::INFINITY;
                    entry.note = Some(format!("{}: {e}", p.label));
                }
            }
        }
    }
    if entry.points < points {
        entry.passed = false;
        entry.note = Some(format!("only {} of {points} points were resolvable", entry.points));
    }
    entry.passed &= entry.max_rel_error < AUDIT_TOLERANCE;
    entry
}

/// Audits every operation in [`AUDITED_OPS`].
pub fn run_audit(points: usize, seed: u64) -> AuditReport {
    run_audit_with(points, seed, &|_, _| {})
}

pub fn run_audit_with(points: usize, seed: u64, tamper: &dyn Fn(&str, &mut Vec<f64>)) -> AuditReport {
    AuditReport {
        step: AUDIT_STEP,
        tolerance: AUDIT_TOLERANCE,
        entries: AUDITED_OPS
            .iter()
            .enumerate()
            .map(|(i, op)| audit_op(op, points, seed.wrapping_add(i as u64), tamper))
            .collect(),
    }
}
