//! The implicit aligner network.
//!
//! Given guidance tokens `h` (describing what is wrong with an image) and the
//! image-prompt tokens `c_I` of that image, the aligner produces replacement
//! image-prompt tokens of the same shape:
//!
//! 1. project the guidance tokens to the image width (once, shared by all layers);
//! 2. run the image tokens through a stack of cross-attention layers, image
//!    tokens as queries and projected guidance as keys/values, each layer's
//!    output replacing the token stream;
//! 3. apply the output linear layers in sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{layer_norm_rows, layer_norm_rows_backward, AttentionCache};
use crate::nn::params::prefixed;
use crate::nn::{CrossAttention, Linear, Matrix, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignerConfig {
    /// Width of a guidance token.
    pub d_guidance: usize,
    /// Width of an image-prompt token.
    pub d_image: usize,
    pub n_attn_layers: usize,
    pub n_out_linear: usize,
    /// Forward passes used by [`refine`] at inference.
    pub refinement_passes: usize,
    /// Adds the input image tokens to the output (ablation only).
    pub residual: bool,
    /// Normalizes each token after every attention layer (ablation only).
    pub layer_norm: bool,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        AlignerConfig {
            d_guidance: 16,
            d_image: 16,
            n_attn_layers: 4,
            n_out_linear: 2,
            refinement_passes: 3,
            residual: false,
            layer_norm: false,
        }
    }
}

impl AlignerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_guidance", self.d_guidance),
            ("d_image", self.d_image),
            ("n_attn_layers", self.n_attn_layers),
            ("n_out_linear", self.n_out_linear),
            ("refinement_passes", self.refinement_passes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("aligner {name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Learnable weights of one aligner instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignerParams {
    pub config: AlignerConfig,
    pub projection: Linear,
    pub attn: Vec<CrossAttention>,
    pub out: Vec<Linear>,
}

impl AlignerParams {
    pub fn init<R: Rng + ?Sized>(config: AlignerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_image;
        let projection = Linear::init(config.d_guidance, d, rng);
        let attn = (0..config.n_attn_layers)
            .map(|_| CrossAttention::init(d, rng))
            .collect();
        let out = (0..config.n_out_linear).map(|_| Linear::init(d, d, rng)).collect();
        Ok(AlignerParams {
            config,
            projection,
            attn,
            out,
        })
    }

    pub fn zeros(config: AlignerConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_image;
        Ok(AlignerParams {
            config,
            projection: Linear::zeros(config.d_guidance, d),
            attn: vec![
                CrossAttention {
                    w_q: Matrix::zeros(d, d),
                    w_k: Matrix::zeros(d, d),
                    w_v: Matrix::zeros(d, d),
                    w_o: Matrix::zeros(d, d),
                };
                config.n_attn_layers
            ],
            out: vec![Linear::zeros(d, d); config.n_out_linear],
        })
    }

    /// Checks layer counts and widths against the stored config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_image;
        if self.projection.weight.shape() != (c.d_guidance, d) || self.projection.bias.shape() != (1, d) {
            return Err(Error::config("projection shape does not match aligner config"));
        }
        if self.attn.len() != c.n_attn_layers || self.out.len() != c.n_out_linear {
            return Err(Error::config("layer count does not match aligner config"));
        }
        if self
            .attn
            .iter()
            .any(|a| a.named().iter().any(|(_, m)| m.shape() != (d, d)))
        {
            return Err(Error::config("attention width does not match aligner config"));
        }
        if self
            .out
            .iter()
            .any(|l| l.weight.shape() != (d, d) || l.bias.shape() != (1, d))
        {
            return Err(Error::config("output layer shape does not match aligner config"));
        }
        Ok(())
    }

    /// Errors unless `other` has the same config and parameter shapes.
    pub fn check_same_structure(&self, other: &AlignerParams) -> Result<()> {
        if self.config != other.config {
            return Err(Error::config("aligner configs differ between parameter sets"));
        }
        self.check_congruent(other)
    }
}

impl Parameters for AlignerParams {
    fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = prefixed("projection", self.projection.named());
        out.extend(prefixed("attn", self.attn.named()));
        out.extend(prefixed("out", self.out.named()));
        out
    }

    fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.projection.matrices_mut();
        out.extend(self.attn.matrices_mut());
        out.extend(self.out.matrices_mut());
        out
    }
}

/// The condition `c = (h, c_I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignerInput {
    /// `n_g × d_guidance`.
    pub guidance: Matrix,
    /// `n_i × d_image`.
    pub image: Matrix,
}

impl AlignerInput {
    pub fn new(guidance: Matrix, image: Matrix) -> Self {
        AlignerInput { guidance, image }
    }

    fn check(&self, config: &AlignerConfig) -> Result<()> {
        if self.guidance.cols() != config.d_guidance || self.guidance.rows() == 0 {
            return Err(Error::config(format!(
                "guidance has shape {:?}, expected n×{} with n ≥ 1",
                self.guidance.shape(),
                config.d_guidance
            )));
        }
        if self.image.cols() != config.d_image || self.image.rows() == 0 {
            return Err(Error::config(format!(
                "image features have shape {:?}, expected n×{} with n ≥ 1",
                self.image.shape(),
                config.d_image
            )));
        }
        Ok(())
    }
}

/// Gradients of [`align`] with respect to its parameters and both inputs.
#[derive(Clone, Debug)]
pub struct AlignerGrads {
    pub params: AlignerParams,
    pub image: Matrix,
    pub guidance: Matrix,
}

struct LayerTrace {
    input: Matrix,
    attn_out: Matrix,
    cache: AttentionCache,
}

/// Forward intermediates needed by [`align_backward`].
pub struct AlignerTrace {
    projected: Matrix,
    layers: Vec<LayerTrace>,
    linear_inputs: Vec<Matrix>,
    output: Matrix,
}

impl AlignerTrace {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn into_output(self) -> Matrix {
        self.output
    }
}

pub fn align(input: &AlignerInput, params: &AlignerParams) -> Result<Matrix> {
    Ok(align_traced(input, params)?.output)
}

pub fn align_traced(input: &AlignerInput, params: &AlignerParams) -> Result<AlignerTrace> {
    let config = &params.config;
    input.check(config)?;
    params.validate()?;

    let projected = params.projection.forward(&input.guidance)?;
    let mut stream = input.image.clone();
    let mut layers = Vec::with_capacity(params.attn.len());
    for attn in &params.attn {
        let (attn_out, cache) = attn.forward_cached(&stream, &projected)?;
        let next = if config.layer_norm {
            layer_norm_rows(&attn_out)
        } else {
            attn_out.clone()
        };
        layers.push(LayerTrace {
            input: std::mem::replace(&mut stream, next),
            attn_out,
            cache,
        });
    }
    let mut linear_inputs = Vec::with_capacity(params.out.len());
    for linear in &params.out {
        let next = linear.forward(&stream)?;
        linear_inputs.push(std::mem::replace(&mut stream, next));
    }
    if config.residual {
        stream.add_assign(&input.image)?;
    }
    Ok(AlignerTrace {
        projected,
        layers,
        linear_inputs,
        output: stream,
    })
}

/// Exact gradient of [`align`] given `∂L/∂output`.
pub fn align_backward(
    input: &AlignerInput,
    params: &AlignerParams,
    trace: &AlignerTrace,
    grad_out: &Matrix,
) -> Result<AlignerGrads> {
    let config = &params.config;
    if grad_out.shape() != input.image.shape() {
        return Err(Error::Shape {
            op: "align_backward",
            left: input.image.shape(),
            right: grad_out.shape(),
        });
    }
    let mut grads = params.zeros_like();
    let mut grad = grad_out.clone();

    for (i, linear) in params.out.iter().enumerate().rev() {
        let (gx, gp) = linear.backward(&trace.linear_inputs[i], &grad)?;
        grads.out[i] = gp;
        grad = gx;
    }

    let mut grad_projected = Matrix::zeros(trace.projected.rows(), trace.projected.cols());
    for (i, attn) in params.attn.iter().enumerate().rev() {
        let layer = &trace.layers[i];
        if config.layer_norm {
            grad = layer_norm_rows_backward(&layer.attn_out, &grad)?;
        }
        let (gin, gp) = attn.backward(&layer.input, &trace.projected, &layer.cache, &grad)?;
        grads.attn[i] = gp;
        grad_projected.add_assign(&gin.key_value_source)?;
        grad = gin.query_source;
    }

    let (grad_guidance, gp) = params.projection.backward(&input.guidance, &grad_projected)?;
    grads.projection = gp;
    if config.residual {
        grad.add_assign(grad_out)?;
    }
    Ok(AlignerGrads {
        params: grads,
        image: grad,
        guidance: grad_guidance,
    })
}

/// Applies [`align`] `passes` times, feeding each output back in as the
/// image tokens while the guidance stays fixed.
pub fn refine(input: &AlignerInput, params: &AlignerParams, passes: usize) -> Result<Matrix> {
    Ok(refine_trajectory(input, params, passes)?
        .pop()
        .expect("at least one pass"))
}

/// Outputs after each pass of [`refine`].
pub fn refine_trajectory(input: &AlignerInput, params: &AlignerParams, passes: usize) -> Result<Vec<Matrix>> {
    if passes == 0 {
        return Err(Error::argument("refine needs at least one pass"));
    }
    let mut current = AlignerInput::new(input.guidance.clone(), input.image.clone());
    let mut outputs = Vec::with_capacity(passes);
    for _ in 0..passes {
        let out = align(&current, params)?;
        current.image = out.clone();
        outputs.push(out);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, is_resolvable, random_instances};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(d_guidance: usize, d_image: usize) -> AlignerConfig {
        AlignerConfig {
            d_guidance,
            d_image,
            ..AlignerConfig::default()
        }
    }

    fn random_input<R: Rng>(config: &AlignerConfig, n_g: usize, n_i: usize, rng: &mut R) -> AlignerInput {
        AlignerInput::new(
            Matrix::random_normal(n_g, config.d_guidance, 1.0, rng),
            Matrix::random_normal(n_i, config.d_image, 1.0, rng),
        )
    }

    #[test]
    fn defaults_match_reference_architecture() {
        let c = AlignerConfig::default();
        assert_eq!((c.n_attn_layers, c.n_out_linear, c.refinement_passes), (4, 2, 3));
        assert!(!c.residual && !c.layer_norm);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let config = small_config(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = AlignerParams::init(config, &mut rng).unwrap();
        params.projection = Linear::zeros(5, 3);
        for a in &mut params.attn {
            a.w_v = Matrix::zeros(3, 3);
            a.w_o = Matrix::zeros(3, 3);
        }
        for l in &mut params.out {
            *l = Linear::zeros(3, 3);
        }
        let input = random_input(&config, 4, 2, &mut rng);
        assert_eq!(align(&input, &params).unwrap(), Matrix::zeros(2, 3));
    }

    /// Evaluates the three steps for a single image token with identity
    /// projections, one guidance token and one output layer of weight 2, bias 1.
    #[test]
    fn single_token_identity_instance_matches_hand_evaluation() {
        let config = AlignerConfig {
            d_guidance: 2,
            d_image: 2,
            n_attn_layers: 1,
            n_out_linear: 1,
            ..AlignerConfig::default()
        };
        let params = AlignerParams {
            config,
            projection: Linear {
                weight: Matrix::identity(2),
                bias: Matrix::row_vector(vec![0.5, -0.5]),
            },
            attn: vec![CrossAttention::identity(2)],
            out: vec![Linear {
                weight: Matrix::identity(2).scale(2.0),
                bias: Matrix::row_vector(vec![1.0, 1.0]),
            }],
        };
        let input = AlignerInput::new(Matrix::from_rows(&[&[3.0, 4.0]]), Matrix::from_rows(&[&[-7.0, 9.0]]));
        // (1) projected h = [3.5, 3.5]; (2) one key, so attention returns it;
        // (3) 2·[3.5, 3.5] + 1 = [8, 8].
        let out = align(&input, &params).unwrap();
        assert_eq!(out.as_slice(), &[8.0, 8.0]);
    }

    /// Two image tokens, two guidance tokens, identity weights, d = 1.
    #[test]
    fn two_token_identity_instance_matches_hand_evaluation() {
        let config = AlignerConfig {
            d_guidance: 1,
            d_image: 1,
            n_attn_layers: 1,
            n_out_linear: 1,
            ..AlignerConfig::default()
        };
        let params = AlignerParams {
            config,
            projection: Linear::identity(1),
            attn: vec![CrossAttention::identity(1)],
            out: vec![Linear::identity(1)],
        };
        let input = AlignerInput::new(
            Matrix::from_rows(&[&[0.0], &[2.0]]),
            Matrix::from_rows(&[&[1.0], &[-1.0]]),
        );
        let out = align(&input, &params).unwrap();
        // token 1: scores [0, 2] -> weights [1/(1+e²), e²/(1+e²)], output 2e²/(1+e²)
        // token 2: scores [0, -2] -> output 2/(1+e²)
        let e2 = 2f64.exp();
        assert!((out.get(0, 0) - 2.0 * e2 / (1.0 + e2)).abs() < 1e-15);
        assert!((out.get(1, 0) - 2.0 / (1.0 + e2)).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_are_configuration_errors() {
        let config = small_config(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = AlignerParams::init(config, &mut rng).unwrap();
        let bad = AlignerInput::new(Matrix::zeros(2, 5), Matrix::zeros(1, 3));
        assert!(matches!(align(&bad, &params), Err(Error::Config(_))));
        let bad = AlignerInput::new(Matrix::zeros(2, 4), Matrix::zeros(0, 3));
        assert!(matches!(align(&bad, &params), Err(Error::Config(_))));
        assert!(AlignerParams::init(
            AlignerConfig {
                n_attn_layers: 0,
                ..config
            },
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let config = small_config(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = AlignerParams::init(config, &mut rng).unwrap();
        let input = random_input(&config, 3, 2, &mut rng);
        let trace = align_traced(&input, &params).unwrap();
        let g = align_backward(&input, &params, &trace, &Matrix::zeros(2, 4)).unwrap();
        assert!(g.params.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_gradient_nonzero_at_random_point() {
        let config = small_config(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = AlignerParams::init(config, &mut rng).unwrap();
        let input = random_input(&config, 3, 2, &mut rng);
        let trace = align_traced(&input, &params).unwrap();
        let r = Matrix::random_normal(2, 4, 1.0, &mut rng);
        let g = align_backward(&input, &params, &trace, &r).unwrap();
        assert!(g.params.projection.weight.sum_squares() > 1e-6);
    }

    /// Audits the full backward at resolvable random points. Default
    /// initialisation leaves deep query/key derivatives below what central
    /// differences can measure, so weights are drawn wider and points whose
    /// finite differences are not self-consistent are skipped (the filter
    /// never sees the analytic gradient).
    fn check_full_aligner(config: AlignerConfig, seed: u64, wanted: usize) {
        let mut admitted = 0;
        let mut candidates = 0;
        random_instances(60 * wanted as u64, seed, |rng| {
            if admitted == wanted {
                return;
            }
            candidates += 1;
            let mut params = AlignerParams::init(config, rng).unwrap();
            for m in params.matrices_mut() {
                *m = Matrix::random_normal(m.rows(), m.cols(), 0.5, rng);
            }
            let input = random_input(&config, 2, 2, rng);
            let r = Matrix::random_normal(2, config.d_image, 1.0, rng);
            let objective = |p: &AlignerParams, x: &AlignerInput| align(x, p).unwrap().hadamard(&r).unwrap().sum();
            let by_params = |flat: &[f64]| {
                let mut p = params.clone();
                p.assign_flat(flat).unwrap();
                objective(&p, &input)
            };
            let by_image = |flat: &[f64]| {
                let mut x = input.clone();
                x.image = Matrix::from_vec(2, config.d_image, flat.to_vec()).unwrap();
                objective(&params, &x)
            };
            let by_guidance = |flat: &[f64]| {
                let mut x = input.clone();
                x.guidance = Matrix::from_vec(2, config.d_guidance, flat.to_vec()).unwrap();
                objective(&params, &x)
            };
            let flat = params.flatten();
            if !(is_resolvable(by_params, &flat, 1e-5)
                && is_resolvable(by_image, input.image.as_slice(), 1e-5)
                && is_resolvable(by_guidance, input.guidance.as_slice(), 1e-5))
            {
                return;
            }
            admitted += 1;

            let trace = align_traced(&input, &params).unwrap();
            let g = align_backward(&input, &params, &trace, &r).unwrap();
            let report = grad_check(by_params, &flat, &g.params.flatten(), 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-5, "params {config:?} {report:?}");
            let report = grad_check(by_image, input.image.as_slice(), g.image.as_slice(), 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-5, "image {config:?} {report:?}");
            let report = grad_check(by_guidance, input.guidance.as_slice(), g.guidance.as_slice(), 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-5, "guidance {config:?} {report:?}");
        });
        assert_eq!(
            admitted, wanted,
            "only {admitted} resolvable points in {candidates} candidates"
        );
    }

    #[test]
    fn full_aligner_gradient_check() {
        check_full_aligner(small_config(4, 4), 50, 20);
    }

    #[test]
    fn ablation_variants_gradient_check() {
        check_full_aligner(
            AlignerConfig {
                residual: true,
                ..small_config(3, 4)
            },
            51,
            10,
        );
        check_full_aligner(
            AlignerConfig {
                layer_norm: true,
                ..small_config(3, 4)
            },
            52,
            10,
        );
    }

    #[test]
    fn refine_single_pass_is_align() {
        let config = small_config(3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = AlignerParams::init(config, &mut rng).unwrap();
        let input = random_input(&config, 4, 3, &mut rng);
        assert_eq!(refine(&input, &params, 1).unwrap(), align(&input, &params).unwrap());
    }

    #[test]
    fn refine_three_passes_composes_align() {
        let config = small_config(3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = AlignerParams::init(config, &mut rng).unwrap();
        let input = random_input(&config, 4, 3, &mut rng);
        let mut manual = input.image.clone();
        for _ in 0..3 {
            manual = align(&AlignerInput::new(input.guidance.clone(), manual), &params).unwrap();
        }
        assert_eq!(refine(&input, &params, 3).unwrap(), manual);
        assert!(matches!(refine(&input, &params, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn structure_mismatch_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = AlignerParams::init(small_config(3, 4), &mut rng).unwrap();
        let b = AlignerParams::init(
            AlignerConfig {
                n_out_linear: 1,
                ..small_config(3, 4)
            },
            &mut rng,
        )
        .unwrap();
        assert!(a.check_same_structure(&b).is_err());
        let c = AlignerParams::init(small_config(3, 4), &mut rng).unwrap();
        assert!(a.check_same_structure(&c).is_ok());
    }

    #[test]
    fn parameter_names_are_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = AlignerParams::init(small_config(3, 4), &mut rng).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "projection.weight");
        assert_eq!(names[1], "projection.bias");
        assert_eq!(names[2], "attn.0.W_q");
        assert_eq!(names[5], "attn.0.W_o");
        assert_eq!(names.last().unwrap(), "out.1.bias");
        assert_eq!(names.len(), 2 + 4 * 4 + 2 * 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn output_shape_matches_image_shape(
            d_guidance in 1usize..6, d_image in 1usize..6,
            n_attn in 1usize..4, n_out in 1usize..3,
            n_g in 1usize..5, n_i in 1usize..5, seed in any::<u64>(),
            residual in any::<bool>(),
        ) {
            let config = AlignerConfig {
                d_guidance, d_image, n_attn_layers: n_attn, n_out_linear: n_out,
                residual, ..AlignerConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = AlignerParams::init(config, &mut rng).unwrap();
            let input = random_input(&config, n_g, n_i, &mut rng);
            let out = align(&input, &params).unwrap();
            prop_assert_eq!(out.shape(), input.image.shape());
            let again = align(&input, &params).unwrap();
            prop_assert!(out.as_slice().iter().zip(again.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
