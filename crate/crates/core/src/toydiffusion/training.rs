use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{denoiser_loss_backward, DenoiserConfig, DenoiserParams, DiffusionBatch};
use super::sampler::SamplerConfig;
use super::schedule::{make_schedule, DiffusionSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::nn::{read_u32, read_u64, Matrix, Parameters};
use crate::rng::{stream_rng, Stream};
use crate::synthworld::World;
use crate::trainer::{adamw_step, AdamWConfig, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub schedule: ScheduleKind,
    pub t_max: usize,
    pub hidden: usize,
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Probability a clean training example loses its image condition.
    /// Corrupted examples always keep theirs, so the text-only model learns
    /// the clean concepts.
    pub image_dropout: f64,
    /// Strength the image features are multiplied by on entering the
    /// denoiser during training.
    pub image_scale: f64,
    /// Probability a training example is a corrupted (losing) sample.
    pub corrupted_fraction: f64,
    pub eval_every: u64,
    pub sampler: SamplerConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            schedule: ScheduleKind::Cosine,
            t_max: 1000,
            hidden: 128,
            iterations: 10_000,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            image_dropout: 0.3,
            image_scale: 0.2,
            corrupted_fraction: 0.5,
            eval_every: 100,
            sampler: SamplerConfig::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let sched = self.schedule()?;
        self.sampler.validate(&sched)?;
        self.adamw().validate()?;
        if !(self.image_scale > 0.0 && self.image_scale.is_finite()) {
            return Err(Error::config("image_scale must be positive"));
        }
        if self.hidden == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("hidden, batch_size and eval_every must be positive"));
        }
        for (name, p) in [
            ("image_dropout", self.image_dropout),
            ("corrupted_fraction", self.corrupted_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.t_max, self.schedule).map_err(|e| Error::config(e.to_string()))
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Denoiser parameters with the settings they were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedDenoiser {
    pub config: DiffusionConfig,
    pub params: DenoiserParams,
    pub iterations: u64,
    pub context: serde_json::Value,
}

impl TrainedDenoiser {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        self.config.schedule()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DiffusionMetricsRow {
    pub iteration: u64,
    pub loss: f64,
}

pub const DIFFUSION_METRICS_HEADER: &str = "iteration,loss";

pub fn denoiser_config(world: &World, config: &DiffusionConfig) -> DenoiserConfig {
    DenoiserConfig {
        width: world.config.n_image_tokens * world.config.d_image,
        n_concepts: world.config.n_concepts,
        hidden: config.hidden,
    }
}

/// Draws a training batch of clean and corrupted samples, each carrying its
/// own (scaled, lightly noised) features as the image condition.
pub fn diffusion_batch<R: Rng + ?Sized>(world: &World, config: &DiffusionConfig, rng: &mut R) -> DiffusionBatch {
    let width = world.config.n_image_tokens * world.config.d_image;
    let n = config.batch_size;
    let mut batch = DiffusionBatch {
        x0: Matrix::zeros(n, width),
        concepts: Vec::with_capacity(n),
        image: Matrix::zeros(n, width),
        t: Vec::with_capacity(n),
        eps: Matrix::zeros(n, width),
    };
    for r in 0..n {
        let triplet = world.sample_triplet(rng);
        let corrupted = rng.gen::<f64>() < config.corrupted_fraction;
        let x0 = if corrupted { &triplet.losing } else { &triplet.winning };
        batch.x0.row_mut(r).copy_from_slice(x0.as_slice());
        if corrupted || rng.gen::<f64>() >= config.image_dropout {
            let noise = Matrix::random_normal(1, width, world.config.feature_noise, rng);
            for ((o, x), e) in batch
                .image
                .row_mut(r)
                .iter_mut()
                .zip(x0.as_slice())
                .zip(noise.as_slice())
            {
                *o = config.image_scale * (x + e);
            }
        }
        batch.concepts.push(triplet.concept_id);
        batch.t.push(rng.gen_range(1..=config.t_max));
        let eps = Matrix::random_normal(1, width, 1.0, rng);
        batch.eps.row_mut(r).copy_from_slice(eps.as_slice());
    }
    batch
}

/// Trains a denoiser on samples from `world`; rows every `eval_every`
/// iterations carry the batch loss.
pub fn train_denoiser(
    world: &World,
    config: DiffusionConfig,
    context: serde_json::Value,
) -> Result<(TrainedDenoiser, Vec<DiffusionMetricsRow>)> {
    config.validate()?;
    let sched = config.schedule()?;
    let mut params = DenoiserParams::init(
        denoiser_config(world, &config),
        &mut stream_rng(config.seed, Stream::DiffusionInit),
    )?;
    let mut state = OptimizerState::new(&params);
    let adamw = config.adamw();
    let mut rng = stream_rng(config.seed, Stream::DiffusionData);
    let mut rows = Vec::new();
    for it in 0..config.iterations {
        let batch = diffusion_batch(world, &config, &mut rng);
        let (loss, grads) = denoiser_loss_backward(&batch, &params, &sched)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                term: "denoiser_loss".into(),
                value: loss,
            });
        }
        adamw_step(&mut params, &grads, &mut state, &adamw)?;
        if it % config.eval_every == 0 {
            rows.push(DiffusionMetricsRow { iteration: it, loss });
        }
    }
    Ok((
        TrainedDenoiser {
            config,
            params,
            iterations: config.iterations,
            context,
        },
        rows,
    ))
}

pub fn write_diffusion_metrics<W: std::io::Write>(rows: &[DiffusionMetricsRow], mut out: W) -> Result<()> {
    writeln!(out, "{DIFFUSION_METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{}", r.iteration, r.loss)?;
    }
    Ok(())
}

// Model file: magic, u32 version, u64-prefixed JSON metadata, then one
// named matrix per parameter in `Parameters::named` order.
pub const DENOISER_FILE_VERSION: u32 = 1;
const DENOISER_MAGIC: &[u8; 8] = b"IMGDIFF\0";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenoiserMeta {
    config: DiffusionConfig,
    denoiser: DenoiserConfig,
    iterations: u64,
    context: serde_json::Value,
}

pub fn write_denoiser(model: &TrainedDenoiser) -> Result<Vec<u8>> {
    let meta = DenoiserMeta {
        config: model.config,
        denoiser: model.params.config(),
        iterations: model.iterations,
        context: model.context.clone(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(DENOISER_MAGIC);
    out.extend_from_slice(&DENOISER_FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let named = model.params.named();
    out.extend_from_slice(&(named.len() as u64).to_le_bytes());
    for (name, m) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        m.write_binary(&mut out);
    }
    Ok(out)
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

pub fn read_denoiser(bytes: &[u8]) -> Result<TrainedDenoiser> {
    if bytes.len() < 8 || &bytes[..8] != DENOISER_MAGIC {
        return Err(parse_err(0, "not a denoiser file (bad magic)"));
    }
    let mut offset = 8;
    let version = read_u32(bytes, &mut offset)?;
    if version != DENOISER_FILE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DENOISER_FILE_VERSION,
        });
    }
    let meta_len = read_u64(bytes, &mut offset)? as usize;
    let meta_at = offset;
    let end = meta_at
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| parse_err(meta_at, "truncated metadata"))?;
    let meta: DenoiserMeta =
        serde_json::from_slice(&bytes[meta_at..end]).map_err(|e| parse_err(meta_at, format!("bad metadata: {e}")))?;
    meta.config.validate().map_err(|e| parse_err(meta_at, e.to_string()))?;
    offset = end;
    let mut params = DenoiserParams::zeros(meta.denoiser).map_err(|e| parse_err(meta_at, e.to_string()))?;
    let expected: Vec<(String, (usize, usize))> = params.named().into_iter().map(|(n, m)| (n, m.shape())).collect();
    let count_at = offset;
    let count = read_u64(bytes, &mut offset)?;
    if count != expected.len() as u64 {
        return Err(parse_err(
            count_at,
            format!("expected {} segments, found {count}", expected.len()),
        ));
    }
    let mut matrices = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let at = offset;
        let len = read_u32(bytes, &mut offset)? as usize;
        let found = bytes
            .get(offset..offset + len)
            .ok_or_else(|| parse_err(offset, "truncated segment name"))?;
        if found != name.as_bytes() {
            return Err(parse_err(at, format!("expected segment {name}")));
        }
        offset += len;
        let m_at = offset;
        let m = Matrix::read_binary(bytes, &mut offset)?;
        if m.shape() != *shape {
            return Err(parse_err(
                m_at,
                format!("segment {name} has shape {:?}, expected {shape:?}", m.shape()),
            ));
        }
        matrices.push(m);
    }
    if offset != bytes.len() {
        return Err(parse_err(offset, "trailing bytes after last segment"));
    }
    for (slot, m) in params.matrices_mut().into_iter().zip(matrices) {
        *slot = m;
    }
    Ok(TrainedDenoiser {
        config: meta.config,
        params,
        iterations: meta.iterations,
        context: meta.context,
    })
}

pub fn save_denoiser(model: &TrainedDenoiser, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, write_denoiser(model)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_denoiser(path: &Path) -> Result<TrainedDenoiser> {
    read_denoiser(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{make_world, WorldConfig};

    fn small() -> (World, DiffusionConfig) {
        let world = make_world(WorldConfig::default()).unwrap();
        let cfg = DiffusionConfig {
            t_max: 100,
            hidden: 16,
            iterations: 30,
            batch_size: 8,
            eval_every: 10,
            sampler: SamplerConfig {
                steps: 10,
                ..SamplerConfig::default()
            },
            ..DiffusionConfig::default()
        };
        (world, cfg)
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (world, cfg) = small();
        let (a, rows_a) = train_denoiser(&world, cfg, serde_json::Value::Null).unwrap();
        let (b, rows_b) = train_denoiser(&world, cfg, serde_json::Value::Null).unwrap();
        assert_eq!(a, b);
        assert_eq!(rows_a, rows_b);
        assert_eq!(rows_a.iter().map(|r| r.iteration).collect::<Vec<_>>(), [0, 10, 20]);

        let long = DiffusionConfig { iterations: 600, ..cfg };
        let (_, rows) = train_denoiser(&world, long, serde_json::Value::Null).unwrap();
        let early: f64 = rows[..3].iter().map(|r| r.loss).sum();
        let late: f64 = rows[rows.len() - 3..].iter().map(|r| r.loss).sum();
        assert!(late < early, "{early} -> {late}");
    }

    #[test]
    fn model_file_round_trip() {
        let (world, cfg) = small();
        let (model, _) = train_denoiser(&world, cfg, serde_json::json!({"note": 1})).unwrap();
        let bytes = write_denoiser(&model).unwrap();
        assert_eq!(read_denoiser(&bytes).unwrap(), model);
        for cut in [0, 7, 12, 30, bytes.len() - 1] {
            assert!(
                matches!(read_denoiser(&bytes[..cut]), Err(Error::Parse { .. })),
                "cut {cut}"
            );
        }
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        assert!(matches!(
            read_denoiser(&versioned),
            Err(Error::Version { found: 9, .. })
        ));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("denoiser.bin");
        save_denoiser(&model, &path).unwrap();
        assert_eq!(load_denoiser(&path).unwrap(), model);
    }

    #[test]
    fn invalid_configs() {
        let (world, cfg) = small();
        for bad in [
            DiffusionConfig { t_max: 1, ..cfg },
            DiffusionConfig {
                image_dropout: 1.5,
                ..cfg
            },
            DiffusionConfig {
                sampler: SamplerConfig {
                    steps: 101,
                    ..cfg.sampler
                },
                ..cfg
            },
            DiffusionConfig { batch_size: 0, ..cfg },
        ] {
            assert!(train_denoiser(&world, bad, serde_json::Value::Null).is_err(), "{bad:?}");
        }
    }
}
