//! Differentiable layers with hand-derived backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{prefixed, Parameters};
use crate::nn::Matrix;

/// `y = x W + b`, with `W: d_in × d_out` and `b: 1 × d_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    /// Weights `uniform(-1/√d_in, 1/√d_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: Matrix::random_uniform(d_in, d_out, bound, rng),
            bias: Matrix::zeros(1, d_out),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Matrix::zeros(d_in, d_out),
            bias: Matrix::zeros(1, d_out),
        }
    }

    pub fn identity(d: usize) -> Self {
        Linear {
            weight: Matrix::identity(d),
            bias: Matrix::zeros(1, d),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.weight)?.add_row_broadcast(&self.bias)
    }

    /// Returns `(∂/∂x, ∂/∂params)` given `∂/∂y`.
    pub fn backward(&self, x: &Matrix, grad_out: &Matrix) -> Result<(Matrix, Linear)> {
        if grad_out.shape() != (x.rows(), self.d_out()) {
            return Err(Error::Shape {
                op: "linear_backward",
                left: (x.rows(), self.d_out()),
                right: grad_out.shape(),
            });
        }
        let grad_x = grad_out.matmul_t(&self.weight)?;
        let grads = Linear {
            weight: x.t_matmul(grad_out)?,
            bias: grad_out.column_sums(),
        };
        Ok((grad_x, grads))
    }
}

impl Parameters for Linear {
    fn named(&self) -> Vec<(String, &Matrix)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Single-head scaled dot-product cross-attention without masking:
///
/// ```text
/// out = softmax((q_src W_q)(kv_src W_k)ᵀ / √d) (kv_src W_v) W_o
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAttention {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

/// Intermediates of a cross-attention forward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
    pub weights: Matrix,
    pub mixed: Matrix,
}

/// Input gradients of a cross-attention layer.
#[derive(Clone, Debug)]
pub struct AttentionInputGrads {
    pub query_source: Matrix,
    pub key_value_source: Matrix,
}

impl CrossAttention {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        CrossAttention {
            w_q: Matrix::random_uniform(d, d, bound, rng),
            w_k: Matrix::random_uniform(d, d, bound, rng),
            w_v: Matrix::random_uniform(d, d, bound, rng),
            w_o: Matrix::random_uniform(d, d, bound, rng),
        }
    }

    pub fn identity(d: usize) -> Self {
        CrossAttention {
            w_q: Matrix::identity(d),
            w_k: Matrix::identity(d),
            w_v: Matrix::identity(d),
            w_o: Matrix::identity(d),
        }
    }

    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    fn check(&self, q_src: &Matrix, kv_src: &Matrix) -> Result<()> {
        let d = self.width();
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            if w.shape() != (d, d) {
                return Err(Error::Shape {
                    op: "cross_attention_params",
                    left: (d, d),
                    right: w.shape(),
                });
            }
        }
        for src in [q_src, kv_src] {
            if src.cols() != d || src.rows() == 0 {
                return Err(Error::Shape {
                    op: "cross_attention",
                    left: (src.rows(), d),
                    right: src.shape(),
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, q_src: &Matrix, kv_src: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(q_src, kv_src)?.0)
    }

    pub fn forward_cached(&self, q_src: &Matrix, kv_src: &Matrix) -> Result<(Matrix, AttentionCache)> {
        self.check(q_src, kv_src)?;
        let scale = 1.0 / (self.width() as f64).sqrt();
        let queries = q_src.matmul(&self.w_q)?;
        let keys = kv_src.matmul(&self.w_k)?;
        let values = kv_src.matmul(&self.w_v)?;
        let weights = queries.matmul_t(&keys)?.scale(scale).softmax_rows();
        let mixed = weights.matmul(&values)?;
        let out = mixed.matmul(&self.w_o)?;
        Ok((
            out,
            AttentionCache {
                queries,
                keys,
                values,
                weights,
                mixed,
            },
        ))
    }

    pub fn backward(
        &self,
        q_src: &Matrix,
        kv_src: &Matrix,
        cache: &AttentionCache,
        grad_out: &Matrix,
    ) -> Result<(AttentionInputGrads, CrossAttention)> {
        self.check(q_src, kv_src)?;
        if grad_out.shape() != q_src.shape() {
            return Err(Error::Shape {
                op: "cross_attention_backward",
                left: q_src.shape(),
                right: grad_out.shape(),
            });
        }
        let scale = 1.0 / (self.width() as f64).sqrt();

        let grad_w_o = cache.mixed.t_matmul(grad_out)?;
        let grad_mixed = grad_out.matmul_t(&self.w_o)?;
        let grad_weights = grad_mixed.matmul_t(&cache.values)?;
        let grad_values = cache.weights.t_matmul(&grad_mixed)?;
        let grad_scores = softmax_rows_backward(&cache.weights, &grad_weights)?.scale(scale);
        let grad_queries = grad_scores.matmul(&cache.keys)?;
        let grad_keys = grad_scores.t_matmul(&cache.queries)?;

        let grads = CrossAttention {
            w_q: q_src.t_matmul(&grad_queries)?,
            w_k: kv_src.t_matmul(&grad_keys)?,
            w_v: kv_src.t_matmul(&grad_values)?,
            w_o: grad_w_o,
        };
        let mut grad_kv = grad_keys.matmul_t(&self.w_k)?;
        grad_kv.add_assign(&grad_values.matmul_t(&self.w_v)?)?;
        let inputs = AttentionInputGrads {
            query_source: grad_queries.matmul_t(&self.w_q)?,
            key_value_source: grad_kv,
        };
        Ok((inputs, grads))
    }
}

impl Parameters for CrossAttention {
    fn named(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("W_q".into(), &self.w_q),
            ("W_k".into(), &self.w_k),
            ("W_v".into(), &self.w_v),
            ("W_o".into(), &self.w_o),
        ]
    }

    fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }
}

/// Vector-Jacobian product of a row softmax given its output.
pub fn softmax_rows_backward(probs: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
    if probs.shape() != grad_out.shape() {
        return Err(Error::Shape {
            op: "softmax_backward",
            left: probs.shape(),
            right: grad_out.shape(),
        });
    }
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = grad_out.row(r);
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (pi, gi)) in out.row_mut(r).iter_mut().zip(p.iter().zip(g)) {
            *o = pi * (gi - inner);
        }
    }
    Ok(out)
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Parameter-free per-row normalization to zero mean and unit variance.
pub fn layer_norm_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

pub fn layer_norm_rows_backward(x: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
    if x.shape() != grad_out.shape() {
        return Err(Error::Shape {
            op: "layer_norm_backward",
            left: x.shape(),
            right: grad_out.shape(),
        });
    }
    let n = x.cols() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let g = grad_out.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let g_mean = g.iter().sum::<f64>() / n;
        let gy_mean = g.iter().zip(row).map(|(gi, xi)| gi * (xi - mean) * inv).sum::<f64>() / n;
        for (o, (gi, xi)) in out.row_mut(r).iter_mut().zip(g.iter().zip(row)) {
            let y = (xi - mean) * inv;
            *o = inv * (gi - g_mean - y * gy_mean);
        }
    }
    Ok(out)
}

pub fn tanh(x: &Matrix) -> Matrix {
    x.map(f64::tanh)
}

/// Backward of `tanh` given its output `y`.
pub fn tanh_backward(y: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
    if y.shape() != grad_out.shape() {
        return Err(Error::Shape {
            op: "tanh_backward",
            left: y.shape(),
            right: grad_out.shape(),
        });
    }
    let mut out = grad_out.clone();
    for (o, yi) in out.as_mut_slice().iter_mut().zip(y.as_slice()) {
        *o *= 1.0 - yi * yi;
    }
    Ok(out)
}

impl<P: Parameters> Parameters for Vec<P> {
    fn named(&self) -> Vec<(String, &Matrix)> {
        self.iter()
            .enumerate()
            .flat_map(|(i, p)| prefixed(&i.to_string(), p.named()))
            .collect()
    }

    fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        self.iter_mut().flat_map(|p| p.matrices_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, random_instances};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-5;
    const STEP: f64 = 1e-5;

    #[test]
    fn linear_identity_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Matrix::random_normal(3, 4, 1.0, &mut rng);
        assert_eq!(Linear::identity(4).forward(&x).unwrap(), x);

        let mut layer = Linear::init(4, 2, &mut rng);
        layer.bias = Matrix::row_vector(vec![0.5, -1.5]);
        let y = layer.forward(&Matrix::zeros(3, 4)).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), &[0.5, -1.5]);
        }
    }

    #[test]
    fn linear_init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = Linear::init(16, 8, &mut rng);
        assert!(layer.weight.as_slice().iter().all(|v| v.abs() <= 0.25));
        assert!(layer.bias.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_shape_errors() {
        let layer = Linear::zeros(3, 2);
        assert!(matches!(layer.forward(&Matrix::zeros(2, 4)), Err(Error::Shape { .. })));
        assert!(layer.backward(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).is_err());
    }

    /// Scalarizes a layer output against a fixed random projection.
    fn project(out: &Matrix, r: &Matrix) -> f64 {
        out.hadamard(r).unwrap().sum()
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        random_instances(100, 21, |rng| {
            let (n, d_in, d_out) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
            let layer = Linear {
                weight: Matrix::random_normal(d_in, d_out, 1.0, rng),
                bias: Matrix::random_normal(1, d_out, 1.0, rng),
            };
            let x = Matrix::random_normal(n, d_in, 1.0, rng);
            let r = Matrix::random_normal(n, d_out, 1.0, rng);
            let (gx, gp) = layer.backward(&x, &r).unwrap();

            let report = grad_check(
                |flat| {
                    let mut l = layer.clone();
                    l.assign_flat(flat).unwrap();
                    project(&l.forward(&x).unwrap(), &r)
                },
                &layer.flatten(),
                &gp.flatten(),
                STEP,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{report:?}");

            let report = grad_check(
                |flat| {
                    let xx = Matrix::from_vec(n, d_in, flat.to_vec()).unwrap();
                    project(&layer.forward(&xx).unwrap(), &r)
                },
                x.as_slice(),
                gx.as_slice(),
                STEP,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{report:?}");
        });
    }

    #[test]
    fn attention_single_key_returns_key_row() {
        let q = Matrix::from_rows(&[&[0.3, -1.0, 2.0], &[5.0, 0.0, 1.0]]);
        let kv = Matrix::from_rows(&[&[1.0, 2.0, 3.0]]);
        let out = CrossAttention::identity(3).forward(&q, &kv).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), kv.row(0));
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let kv = Matrix::from_rows(&[&[0.5, -2.0], &[0.5, -2.0], &[0.5, -2.0]]);
        let q = Matrix::from_rows(&[&[1.0, 4.0], &[-3.0, 0.2]]);
        let (out, cache) = CrossAttention::identity(2).forward_cached(&q, &kv).unwrap();
        for w in cache.weights.as_slice() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        for r in 0..2 {
            assert!((out.get(r, 0) - 0.5).abs() < 1e-15);
            assert!((out.get(r, 1) + 2.0).abs() < 1e-15);
        }

        // Zero key projection: every key identical, distinct values.
        let mut layer = CrossAttention::identity(2);
        layer.w_k = Matrix::zeros(2, 2);
        let q = Matrix::from_rows(&[&[1.0, 4.0]]);
        let kv = Matrix::from_rows(&[&[1.0, 0.0], &[3.0, 2.0], &[-1.0, 1.0]]);
        let (out, cache) = layer.forward_cached(&q, &kv).unwrap();
        for w in cache.weights.as_slice() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((out.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((out.get(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn attention_rejects_width_mismatch() {
        let layer = CrossAttention::identity(3);
        let err = layer.forward(&Matrix::zeros(2, 3), &Matrix::zeros(2, 4)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        random_instances(100, 33, |rng| {
            let d = rng.gen_range(1..6);
            let (nq, nkv) = (rng.gen_range(1..4), rng.gen_range(1..5));
            let layer = CrossAttention::init(d, rng);
            let q = Matrix::random_normal(nq, d, 1.0, rng);
            let kv = Matrix::random_normal(nkv, d, 1.0, rng);
            let r = Matrix::random_normal(nq, d, 1.0, rng);
            let (_, cache) = layer.forward_cached(&q, &kv).unwrap();
            let (gin, gp) = layer.backward(&q, &kv, &cache, &r).unwrap();

            let report = grad_check(
                |flat| {
                    let mut l = layer.clone();
                    l.assign_flat(flat).unwrap();
                    project(&l.forward(&q, &kv).unwrap(), &r)
                },
                &layer.flatten(),
                &gp.flatten(),
                STEP,
            )
            .unwrap();
            assert!(report.max_rel_error < TOL, "params {report:?}");

            let report = grad_check(
                |flat| {
                    let qq = Matrix::from_vec(nq, d, flat.to_vec()).unwrap();
                    project(&layer.forward(&qq, &kv).unwrap(), &r)
                },
                q.as_slice(),
                gin.query_source.as_slice(),
                STEP,
            )
            .unwrap();
            assert!(report.max_rel_error < TOL, "query {report:?}");

            let report = grad_check(
                |flat| {
                    let kk = Matrix::from_vec(nkv, d, flat.to_vec()).unwrap();
                    project(&layer.forward(&q, &kk).unwrap(), &r)
                },
                kv.as_slice(),
                gin.key_value_source.as_slice(),
                STEP,
            )
            .unwrap();
            assert!(report.max_rel_error < TOL, "kv {report:?}");
        });
    }

    #[test]
    fn layer_norm_and_tanh_backward_match_finite_differences() {
        random_instances(100, 44, |rng| {
            let (n, d) = (rng.gen_range(1..4), rng.gen_range(3..7));
            let x = Matrix::random_normal(n, d, 1.0, rng);
            let r = Matrix::random_normal(n, d, 1.0, rng);

            let g = layer_norm_rows_backward(&x, &r).unwrap();
            let report = grad_check(
                |flat| project(&layer_norm_rows(&Matrix::from_vec(n, d, flat.to_vec()).unwrap()), &r),
                x.as_slice(),
                g.as_slice(),
                STEP,
            )
            .unwrap();
            assert!(report.max_rel_error < TOL, "layer norm {report:?}");

            let g = tanh_backward(&tanh(&x), &r).unwrap();
            let report = grad_check(
                |flat| project(&tanh(&Matrix::from_vec(n, d, flat.to_vec()).unwrap()), &r),
                x.as_slice(),
                g.as_slice(),
                STEP,
            )
            .unwrap();
            assert!(report.max_rel_error < TOL, "tanh {report:?}");
        });
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = CrossAttention::init(4, &mut rng);
        let q = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let kv = Matrix::random_normal(5, 4, 1.0, &mut rng);
        let a = layer.forward(&q, &kv).unwrap();
        let b = layer.forward(&q, &kv).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
