//! The run configuration: one TOML file, every key optional, unknown keys
//! rejected. Command-line flags are applied on top, then the whole thing is
//! validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use imgalign::aligner::AlignerConfig;
use imgalign::synthworld::WorldConfig;
use imgalign::toydiffusion::{DiffusionConfig, PipelineConfig};
use imgalign::trainer::TrainerConfig;

use crate::error::CliError;

/// Aligner architecture; token widths come from the world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignerSection {
    pub n_attn_layers: usize,
    pub n_out_linear: usize,
    pub refinement_passes: usize,
    pub residual: bool,
    pub layer_norm: bool,
}

impl Default for AlignerSection {
    fn default() -> Self {
        let a = AlignerConfig::default();
        AlignerSection {
            n_attn_layers: a.n_attn_layers,
            n_out_linear: a.n_out_linear,
            refinement_passes: a.refinement_passes,
            residual: a.residual,
            layer_norm: a.layer_norm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Triplets written by `gen-data`.
    pub triplets: usize,
    /// Held-out triplets used for evaluation.
    pub held_out: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            triplets: 1000,
            held_out: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSection {
    pub cases: usize,
    /// Case `i` uses concept `i mod n_concepts` and seed `first_case_seed + i`.
    pub first_case_seed: u64,
}

impl Default for DemoSection {
    fn default() -> Self {
        DemoSection {
            cases: 200,
            first_case_seed: 1 << 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    /// Resolvable random points checked per operation.
    pub points: usize,
    pub seed: u64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection { points: 5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the world, trainer and diffusion seeds.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub aligner: AlignerSection,
    pub trainer: TrainerConfig,
    pub diffusion: DiffusionConfig,
    pub pipeline: PipelineConfig,
    pub data: DataSection,
    pub demo: DemoSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out_dir: PathBuf::from("runs/default"),
            world: WorldConfig::default(),
            aligner: AlignerSection::default(),
            trainer: TrainerConfig::default(),
            diffusion: DiffusionConfig::default(),
            pipeline: PipelineConfig::default(),
            data: DataSection::default(),
            demo: DemoSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `--seed` / `--out-dir`, propagates the run seed and validates.
    pub fn finish(mut self, seed: Option<u64>, out_dir: Option<PathBuf>) -> Result<Self, CliError> {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(dir) = out_dir {
            self.out_dir = dir;
        }
        if let Some(s) = self.seed {
            self.world.seed = s;
            self.trainer.seed = s;
            self.diffusion.seed = s;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.world.validate()?;
        self.aligner_config().validate()?;
        self.trainer.validate()?;
        self.diffusion.validate()?;
        self.pipeline.validate()?;
        if self.gradcheck.points == 0 {
            return Err(CliError::Validation("gradcheck.points must be at least 1".into()));
        }
        Ok(())
    }

    pub fn aligner_config(&self) -> AlignerConfig {
        AlignerConfig {
            d_guidance: self.world.d_guidance,
            d_image: self.world.d_image,
            n_attn_layers: self.aligner.n_attn_layers,
            n_out_linear: self.aligner.n_out_linear,
            refinement_passes: self.aligner.refinement_passes,
            residual: self.aligner.residual,
            layer_norm: self.aligner.layer_norm,
        }
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Single-line JSON form, used in file headers.
    pub fn snapshot_line(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_snapshot(value: &serde_json::Value) -> Result<Self, CliError> {
        serde_json::from_value(value.clone()).map_err(|e| CliError::Validation(format!("stored config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            "colour = 1",
            "[world]\nconcepts = 8",
            "[trainer.objective]\nlamda = 1.0",
            "[diffusion.sampler]\nstep = 3",
            "[pipeline]\nscale = 0.2",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Validation(_))), "{text}");
        }
    }

    #[test]
    fn seed_flag_overrides_and_propagates() {
        let cfg = RunConfig::parse("seed = 3\n[world]\nseed = 9").unwrap();
        let cfg = cfg.finish(Some(5), Some("x".into())).unwrap();
        assert_eq!((cfg.world.seed, cfg.trainer.seed, cfg.diffusion.seed), (5, 5, 5));
        assert_eq!(cfg.out_dir, PathBuf::from("x"));
    }

    #[test]
    fn invalid_values_fail_validation() {
        let cfg = RunConfig::parse("[trainer.objective]\nk = 0").unwrap();
        assert_eq!(
            cfg.finish(None, None).unwrap_err().exit_code(),
            crate::error::exit::VALIDATION
        );
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::parse("seed = 4\n[pipeline]\nblend = \"additive\"").unwrap();
        assert_eq!(RunConfig::from_snapshot(&cfg.snapshot()).unwrap(), cfg);
    }
}
