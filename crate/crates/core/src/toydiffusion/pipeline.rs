use serde::{Deserialize, Serialize};

use super::sampler::sample;
use super::training::TrainedDenoiser;
use crate::aligner::{refine, AlignerInput, AlignerParams};
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{stream_rng, Stream};
use crate::synthworld::{oracle_align, World, WorldConfig};

/// How refined features enter the image condition at re-generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blend {
    /// `scale · ĉ` replaces the previous condition.
    Replace,
    /// `scale · (c_I^l + ĉ)`: the original features stay and the refined
    /// ones are added alongside them.
    Additive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub rounds: usize,
    /// Image-prompt strength applied to every image condition.
    pub image_scale: f64,
    pub blend: Blend,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            rounds: 1,
            image_scale: 0.2,
            blend: Blend::Replace,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if !(self.image_scale >= 0.0 && self.image_scale.is_finite()) {
            return Err(Error::config("image_scale must be finite and non-negative"));
        }
        Ok(())
    }
}

pub struct PipelineModels<'a> {
    pub aligner: &'a AlignerParams,
    /// Training iterations behind `aligner`; zero flags the report.
    pub aligner_iterations: u64,
    pub denoiser: &'a TrainedDenoiser,
}

/// One image to repair: its prompt concept, the features it should have and
/// the features it starts from.
#[derive(Clone, Debug)]
pub struct PipelineCase {
    pub concept_id: usize,
    pub clean: Matrix,
    pub start: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Distance from the generated sample to the prompt concept.
    pub metric: f64,
    /// Distance from the features used this round to the clean features.
    pub feature_error: f64,
    /// Squared distance between the aligner's output and its input; zero in
    /// round 0, which is not aligned.
    pub aligner_shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub concept_id: usize,
    pub seed: u64,
    /// Round 0 is the initial generation from the corrupted condition.
    pub rounds: Vec<RoundRecord>,
    /// Same seed, conditioned on the clean features: the best the denoiser
    /// can do for this case.
    pub floor_metric: f64,
    /// E.g. `aligner_untrained`, `denoiser_untrained`.
    pub flags: Vec<String>,
    pub config: PipelineConfig,
    pub world: WorldConfig,
}

impl PipelineReport {
    pub fn improved(&self) -> bool {
        self.rounds.len() > 1 && self.rounds[1].metric < self.rounds[0].metric
    }
}

/// A held-out case for `concept_id`, drawn from `seed`.
pub fn make_case(world: &World, concept_id: usize, seed: u64) -> Result<PipelineCase> {
    if concept_id >= world.config.n_concepts {
        return Err(Error::argument(format!(
            "concept {concept_id} out of range 0..{}",
            world.config.n_concepts
        )));
    }
    let triplet = world.sample_triplet_for(concept_id, &mut stream_rng(seed, Stream::Pipeline));
    let clean = oracle_align(&triplet).clone();
    let start = if triplet.label_swapped {
        triplet.winning
    } else {
        triplet.losing
    };
    Ok(PipelineCase {
        concept_id,
        clean,
        start,
    })
}

/// Generate → guidance → align → re-generate, repeated `config.rounds` times.
pub fn img_pipeline(
    world: &World,
    models: &PipelineModels,
    concept_id: usize,
    seed: u64,
    config: PipelineConfig,
) -> Result<PipelineReport> {
    let case = make_case(world, concept_id, seed)?;
    run_case(world, models, &case, seed, config)
}

pub fn run_case(
    world: &World,
    models: &PipelineModels,
    case: &PipelineCase,
    seed: u64,
    config: PipelineConfig,
) -> Result<PipelineReport> {
    config.validate()?;
    let denoiser = models.denoiser;
    let sched = denoiser.schedule()?;
    let width = denoiser.params.config().width;
    let concept = world.concept(case.concept_id).reshape(1, width)?;
    let generate = |features: &Matrix| -> Result<f64> {
        let image = features.reshape(1, width)?.scale(config.image_scale);
        let s = sample(
            &denoiser.params,
            case.concept_id,
            Some(&image),
            &sched,
            denoiser.config.sampler,
            seed,
        )?;
        Ok(s.x.squared_distance(&concept)?.sqrt())
    };
    let distance = |a: &Matrix, b: &Matrix| -> Result<f64> { Ok(a.squared_distance(b)?.sqrt()) };

    let mut rounds = vec![RoundRecord {
        round: 0,
        metric: generate(&case.start)?,
        feature_error: distance(&case.start, &case.clean)?,
        aligner_shift: 0.0,
    }];
    let mut current = case.start.clone();
    for round in 1..=config.rounds {
        // The corruption is known here; the encoder plays the detector.
        let delta = current.sub(&case.clean)?;
        let guidance = world.encode_guidance(&delta, case.concept_id)?;
        let refined = refine(
            &AlignerInput::new(guidance, current.clone()),
            models.aligner,
            models.aligner.config.refinement_passes,
        )?;
        let condition = match config.blend {
            Blend::Replace => refined.clone(),
            Blend::Additive => case.start.add(&refined)?,
        };
        rounds.push(RoundRecord {
            round,
            metric: generate(&condition)?,
            feature_error: distance(&refined, &case.clean)?,
            aligner_shift: refined.squared_distance(&current)?,
        });
        current = refined;
    }

    let mut flags = Vec::new();
    if models.aligner_iterations == 0 {
        flags.push("aligner_untrained".to_string());
    }
    if denoiser.iterations == 0 {
        flags.push("denoiser_untrained".to_string());
    }
    Ok(PipelineReport {
        concept_id: case.concept_id,
        seed,
        rounds,
        floor_metric: generate(&case.clean)?,
        flags,
        config,
        world: world.config,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub cases: usize,
    /// Fraction of cases whose round-1 metric beats the initial one.
    pub improvement_rate: f64,
    /// Mean metric per round, round 0 first.
    pub mean_metric: Vec<f64>,
    pub mean_floor: f64,
    /// Among cases whose round-1 metric is above their floor, the fraction
    /// where round 2 is no worse than round 1; `None` with fewer than two
    /// rounds or no such case.
    pub round2_no_worse_rate: Option<f64>,
}

pub fn summarize(reports: &[PipelineReport]) -> PipelineSummary {
    let n = reports.len();
    let rounds = reports.iter().map(|r| r.rounds.len()).min().unwrap_or(0);
    let mean = |f: &dyn Fn(&PipelineReport) -> f64| reports.iter().map(f).sum::<f64>() / n.max(1) as f64;
    let improved = reports.iter().filter(|r| r.improved()).count();
    let above: Vec<&PipelineReport> = if rounds > 2 {
        reports.iter().filter(|r| r.rounds[1].metric > r.floor_metric).collect()
    } else {
        Vec::new()
    };
    let round2_no_worse_rate = (!above.is_empty()).then(|| {
        above
            .iter()
            .filter(|r| r.rounds[2].metric <= r.rounds[1].metric)
            .count() as f64
            / above.len() as f64
    });
    PipelineSummary {
        cases: n,
        improvement_rate: improved as f64 / n.max(1) as f64,
        mean_metric: (0..rounds).map(|k| mean(&|r| r.rounds[k].metric)).collect(),
        mean_floor: mean(&|r| r.floor_metric),
        round2_no_worse_rate,
    }
}
