//! A synthetic preference world with a known alignment target.
//!
//! Each concept has an ideal image-prompt feature matrix. A triplet takes a
//! concept, jitters it slightly to get the winning features `c_I^w`, and adds a
//! larger corruption `δ` to get the losing features `c_I^l`. The guidance `h`
//! (standing in for MLLM hidden states) is a fixed random linear encoding of
//! `δ`; every guidance token additionally carries the prompt's embedding in
//! its last `prompt_dim` columns. The MLLM sees the prompt as well as the
//! image, and without that component a non-residual aligner has no way to
//! tell concepts apart.

mod dataset;

pub use dataset::{read_dataset, write_dataset, Dataset, DATASET_VERSION};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::{AlignerConfig, AlignerInput};
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{stream_rng, Stream};

const SEPARATION_RETRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_concepts: usize,
    pub d_image: usize,
    pub d_guidance: usize,
    pub n_image_tokens: usize,
    pub n_guidance_tokens: usize,
    /// Trailing columns of each guidance token holding the prompt embedding;
    /// 0 leaves `h` a pure encoding of the corruption.
    pub prompt_dim: usize,
    /// Typical Euclidean norm of a corruption, and the minimum distance
    /// between concepts.
    pub corruption_scale: f64,
    /// Per-entry std of the jitter between a concept and its winning features.
    pub feature_noise: f64,
    /// Per-entry std of the noise added to guidance tokens.
    pub guidance_noise: f64,
    /// Probability that a triplet's labels are swapped.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_concepts: 8,
            d_image: 16,
            d_guidance: 32,
            n_image_tokens: 1,
            n_guidance_tokens: 2,
            prompt_dim: 8,
            corruption_scale: 2.0,
            feature_noise: 0.05,
            guidance_noise: 0.01,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_concepts == 0 {
            return Err(Error::config("world needs at least one concept"));
        }
        if self.d_image < 2 || self.d_guidance < 2 {
            return Err(Error::config("world feature widths must be at least 2"));
        }
        if self.n_image_tokens == 0 || self.n_guidance_tokens == 0 {
            return Err(Error::config("world token counts must be at least 1"));
        }
        if self.prompt_dim >= self.d_guidance {
            return Err(Error::config(
                "prompt_dim must leave guidance columns for the corruption",
            ));
        }
        if !(self.corruption_scale > 0.0 && self.corruption_scale.is_finite()) {
            return Err(Error::config("corruption_scale must be positive"));
        }
        for (name, v) in [
            ("feature_noise", self.feature_noise),
            ("guidance_noise", self.guidance_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::config("label_noise must lie in [0, 0.5)"));
        }
        Ok(())
    }

    /// Guidance columns encoding the corruption.
    pub fn corruption_dim(&self) -> usize {
        self.d_guidance - self.prompt_dim
    }

    fn image_len(&self) -> usize {
        self.n_image_tokens * self.d_image
    }

    /// Default aligner architecture sized for this world.
    pub fn aligner_config(&self) -> AlignerConfig {
        AlignerConfig {
            d_guidance: self.d_guidance,
            d_image: self.d_image,
            ..AlignerConfig::default()
        }
    }
}

/// One training atom: condition `(h, c_I^l)` and the preferred `c_I^w`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceTriplet {
    pub concept_id: usize,
    /// Whether label noise exchanged `winning` and `losing`.
    pub label_swapped: bool,
    /// `n_g × d_guidance`.
    pub guidance: Matrix,
    /// `n_i × d_image`.
    pub losing: Matrix,
    /// `n_i × d_image`.
    pub winning: Matrix,
}

impl PreferenceTriplet {
    /// The aligner condition `c = (h, c_I^l)`.
    pub fn input(&self) -> AlignerInput {
        AlignerInput::new(self.guidance.clone(), self.losing.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    /// Row `i` is concept `i` flattened (`n_i · d_image` wide).
    pub concepts: Matrix,
    /// Row `i` is the prompt embedding of concept `i` (`prompt_dim` wide).
    pub prompts: Matrix,
    /// Maps a flattened corruption to the flattened corruption columns of
    /// the guidance tokens (`n_g·corruption_dim × n_i·d_image`).
    pub encoder: Matrix,
}

pub fn make_world(config: WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, Stream::World);
    let len = config.image_len();
    let mut concepts = Matrix::zeros(config.n_concepts, len);
    for i in 0..config.n_concepts {
        let mut placed = false;
        for _ in 0..SEPARATION_RETRIES {
            let candidate = Matrix::random_normal(1, len, 1.0, &mut rng);
            let separated = (0..i).all(|j| {
                let d2: f64 = candidate
                    .as_slice()
                    .iter()
                    .zip(concepts.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2.sqrt() >= config.corruption_scale
            });
            if separated {
                concepts.row_mut(i).copy_from_slice(candidate.as_slice());
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::config(format!(
                "could not place {} concepts at separation {} after {SEPARATION_RETRIES} retries; \
                 increase d_image or n_image_tokens, or lower corruption_scale",
                config.n_concepts, config.corruption_scale
            )));
        }
    }
    let prompts = Matrix::random_normal(config.n_concepts, config.prompt_dim, 1.0, &mut rng);
    let encoder = Matrix::random_normal(
        config.n_guidance_tokens * config.corruption_dim(),
        len,
        1.0 / (len as f64).sqrt(),
        &mut rng,
    );
    Ok(World {
        config,
        concepts,
        prompts,
        encoder,
    })
}

impl World {
    /// Concept `id` as an `n_i × d_image` matrix.
    pub fn concept(&self, id: usize) -> Matrix {
        let c = &self.config;
        Matrix::from_vec(c.n_image_tokens, c.d_image, self.concepts.row(id).to_vec()).expect("concept row length")
    }

    /// Noise-free guidance for a corruption `delta` (`n_i × d_image`) under
    /// the prompt of concept `id`.
    pub fn encode_guidance(&self, delta: &Matrix, id: usize) -> Result<Matrix> {
        let c = &self.config;
        if delta.shape() != (c.n_image_tokens, c.d_image) {
            return Err(Error::Shape {
                op: "encode_guidance",
                left: (c.n_image_tokens, c.d_image),
                right: delta.shape(),
            });
        }
        if id >= c.n_concepts {
            return Err(Error::argument(format!(
                "concept {id} out of range 0..{}",
                c.n_concepts
            )));
        }
        let flat = Matrix::from_vec(delta.len(), 1, delta.as_slice().to_vec())?;
        let encoded = self
            .encoder
            .matmul(&flat)?
            .reshape(c.n_guidance_tokens, c.corruption_dim())?;
        let prompt = Matrix::from_vec(1, c.prompt_dim, self.prompts.row(id).to_vec())?;
        let prompt = Matrix::vstack(&vec![&prompt; c.n_guidance_tokens])?;
        Matrix::hstack(&[&encoded, &prompt])
    }

    /// Irreducible `L_base` of any predictor that knows only the concept:
    /// the expected squared norm of the winning-feature jitter.
    pub fn noise_floor(&self) -> f64 {
        self.config.image_len() as f64 * self.config.feature_noise.powi(2)
    }

    pub fn sample_triplet<R: Rng + ?Sized>(&self, rng: &mut R) -> PreferenceTriplet {
        let id = rng.gen_range(0..self.config.n_concepts);
        self.sample_triplet_for(id, rng)
    }

    /// Like [`World::sample_triplet`] with the concept fixed.
    pub fn sample_triplet_for<R: Rng + ?Sized>(&self, id: usize, rng: &mut R) -> PreferenceTriplet {
        let c = &self.config;
        let concept = self.concept(id);
        let jitter = Matrix::random_normal(c.n_image_tokens, c.d_image, c.feature_noise, rng);
        let winning = concept.add(&jitter).expect("same shape");
        let per_entry = c.corruption_scale / (c.image_len() as f64).sqrt();
        // Rejecting the rare corruption that lands closer to the concept keeps
        // un-noised preferences consistent by construction.
        let delta = loop {
            let delta = Matrix::random_normal(c.n_image_tokens, c.d_image, per_entry, rng);
            let moved = jitter.add(&delta).expect("same shape");
            if moved.sum_squares() > jitter.sum_squares() {
                break delta;
            }
        };
        let losing = winning.add(&delta).expect("same shape");
        let clean = self.encode_guidance(&delta, id).expect("world shapes");
        let noise = Matrix::random_normal(clean.rows(), clean.cols(), c.guidance_noise, rng);
        let guidance = clean.add(&noise).expect("same shape");
        let swap = c.label_noise > 0.0 && rng.gen::<f64>() < c.label_noise;
        let (winning, losing) = if swap { (losing, winning) } else { (winning, losing) };
        PreferenceTriplet {
            concept_id: id,
            label_swapped: swap,
            guidance,
            losing,
            winning,
        }
    }

    /// A seeded stream of triplets.
    pub fn sampler(&self, stream: Stream) -> TripletSampler<'_> {
        TripletSampler {
            world: self,
            rng: stream_rng(self.config.seed, stream),
        }
    }

    /// `count` triplets from the held-out stream, disjoint from training data.
    pub fn held_out(&self, count: usize) -> Vec<PreferenceTriplet> {
        let mut s = self.sampler(Stream::HeldOut);
        (0..count).map(|_| s.next_triplet()).collect()
    }
}

/// The true winning features the generator produced, before label noise.
pub fn oracle_align(triplet: &PreferenceTriplet) -> &Matrix {
    if triplet.label_swapped {
        &triplet.losing
    } else {
        &triplet.winning
    }
}

/// Sequential triplet generator over a [`World`].
#[derive(Clone, Debug)]
pub struct TripletSampler<'w> {
    world: &'w World,
    rng: ChaCha8Rng,
}

impl TripletSampler<'_> {
    pub fn next_triplet(&mut self) -> PreferenceTriplet {
        self.world.sample_triplet(&mut self.rng)
    }

    /// Position in the underlying stream.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn seek(&mut self, position: u128) {
        self.rng.set_word_pos(position);
    }
}
