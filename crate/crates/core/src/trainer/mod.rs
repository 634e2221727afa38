//! Training loop for the aligner.
//!
//! Each iteration draws a batch, evaluates the total objective and its
//! gradient, applies AdamW, then asks whether `f_θ` now beats `f_ref` on
//! that batch; `k` consecutive wins replace `f_ref` with a copy of `f_θ`.

mod adamw;
mod checkpoint;
mod metrics;

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use metrics::{read_metrics, write_metrics, MetricsRow, METRICS_HEADER};

use serde::{Deserialize, Serialize};

use crate::aligner::{AlignerConfig, AlignerParams};
use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::objective::{
    implied_reward_gap, l_base, ref_controller_step, theta_wins, total_loss_backward, ObjectiveConfig, RefUpdateState,
};
use crate::rng::{stream_rng, Stream};
use crate::synthworld::{PreferenceTriplet, TripletSampler};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub iterations: u64,
    /// Seeds the parameter initialisation streams.
    pub seed: u64,
    /// A metrics row is emitted whenever the iteration is a multiple of this.
    pub eval_every: u64,
    pub objective: ObjectiveConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        TrainerConfig {
            learning_rate: adam.learning_rate,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 8,
            iterations: 2000,
            seed: 0,
            eval_every: 10,
            objective: ObjectiveConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.adamw().validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        self.objective.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// A resumable, ordered supply of training triplets.
pub trait TripletSource {
    fn next_batch(&mut self, size: usize) -> Result<Vec<PreferenceTriplet>>;
    /// Opaque cursor; [`TripletSource::seek`] to it replays the same batches.
    fn position(&self) -> u128;
    fn seek(&mut self, position: u128) -> Result<()>;
}

impl TripletSource for TripletSampler<'_> {
    fn next_batch(&mut self, size: usize) -> Result<Vec<PreferenceTriplet>> {
        Ok((0..size).map(|_| self.next_triplet()).collect())
    }

    fn position(&self) -> u128 {
        TripletSampler::position(self)
    }

    fn seek(&mut self, position: u128) -> Result<()> {
        TripletSampler::seek(self, position);
        Ok(())
    }
}

/// Cycles through a fixed list of triplets in order.
#[derive(Clone, Debug)]
pub struct DatasetSource {
    triplets: Vec<PreferenceTriplet>,
    consumed: u128,
}

impl DatasetSource {
    pub fn new(triplets: Vec<PreferenceTriplet>) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::argument("dataset has no triplets to train on"));
        }
        Ok(DatasetSource { triplets, consumed: 0 })
    }
}

impl TripletSource for DatasetSource {
    fn next_batch(&mut self, size: usize) -> Result<Vec<PreferenceTriplet>> {
        let n = self.triplets.len() as u128;
        let batch = (0..size as u128)
            .map(|i| self.triplets[((self.consumed + i) % n) as usize].clone())
            .collect();
        self.consumed += size as u128;
        Ok(batch)
    }

    fn position(&self) -> u128 {
        self.consumed
    }

    fn seek(&mut self, position: u128) -> Result<()> {
        self.consumed = position;
        Ok(())
    }
}

/// Complete training state; everything needed to continue bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub trainer: TrainerConfig,
    pub aligner: AlignerConfig,
    /// Completed iterations.
    pub iteration: u64,
    pub theta: AlignerParams,
    pub reference: AlignerParams,
    pub optimizer: OptimizerState<AlignerParams>,
    pub controller: RefUpdateState,
    pub data_position: u128,
    /// Caller-provided snapshot (e.g. the data-generating config), stored verbatim.
    pub context: serde_json::Value,
}

impl Checkpoint {
    /// Fresh state: `f_θ` and `f_ref` initialised from independent streams.
    pub fn initial(trainer: TrainerConfig, aligner: AlignerConfig, context: serde_json::Value) -> Result<Self> {
        trainer.validate()?;
        let theta = AlignerParams::init(aligner, &mut stream_rng(trainer.seed, Stream::InitTheta))?;
        let reference = AlignerParams::init(aligner, &mut stream_rng(trainer.seed, Stream::InitRef))?;
        let optimizer = OptimizerState::new(&theta);
        Ok(Checkpoint {
            trainer,
            aligner,
            iteration: 0,
            theta,
            reference,
            optimizer,
            controller: RefUpdateState::default(),
            data_position: 0,
            context,
        })
    }
}

fn finite(iteration: u64, term: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            iteration,
            term: term.to_string(),
            value,
        })
    }
}

/// Runs iterations `ckpt.iteration + 1 ..= until`, reporting metrics rows to
/// `on_row`. On a non-finite loss or gradient the checkpoint keeps the state
/// of the last completed iteration and the error names the failing term.
pub fn train_until<S: TripletSource>(
    ckpt: &mut Checkpoint,
    source: &mut S,
    until: u64,
    mut on_row: impl FnMut(MetricsRow),
) -> Result<()> {
    ckpt.trainer.validate()?;
    let cfg = ckpt.trainer;
    let adam = cfg.adamw();
    source.seek(ckpt.data_position)?;
    while ckpt.iteration < until {
        let it = ckpt.iteration + 1;
        let batch = source.next_batch(cfg.batch_size)?;
        let (loss, grads) = total_loss_backward(&batch, &ckpt.theta, &ckpt.reference, &cfg.objective)?;
        for (term, v) in [
            ("l_base", loss.l_base),
            ("l_pref", loss.l_pref),
            ("dpo_term", loss.dpo_term),
            ("spin_term", loss.spin_term),
            ("total", loss.total),
        ] {
            finite(it, term, v)?;
        }
        if let Some(v) = grads.flatten().into_iter().find(|v| !v.is_finite()) {
            finite(it, "gradient", v)?;
        }
        let mut theta = ckpt.theta.clone();
        let mut optimizer = ckpt.optimizer.clone();
        adamw_step(&mut theta, &grads, &mut optimizer, &adam)?;
        if let Some(v) = theta.flatten().into_iter().find(|v| !v.is_finite()) {
            finite(it, "parameters", v)?;
        }
        let win = theta_wins(&batch, &theta, &ckpt.reference)?;
        let (controller, swap) = ref_controller_step(ckpt.controller, win, cfg.objective.k);
        if swap {
            ckpt.reference = theta.clone();
        }
        ckpt.theta = theta;
        ckpt.optimizer = optimizer;
        ckpt.controller = controller;
        ckpt.iteration = it;
        ckpt.data_position = source.position();
        if it % cfg.eval_every == 0 {
            on_row(MetricsRow::new(it, &loss, controller.total_swaps));
        }
    }
    Ok(())
}

/// Trains from scratch for `trainer.iterations` iterations.
pub fn train<S: TripletSource>(
    source: &mut S,
    trainer: TrainerConfig,
    aligner: AlignerConfig,
    context: serde_json::Value,
) -> Result<(Checkpoint, Vec<MetricsRow>)> {
    let mut ckpt = Checkpoint::initial(trainer, aligner, context)?;
    let mut rows = Vec::new();
    train_until(&mut ckpt, source, trainer.iterations, |r| rows.push(r))?;
    Ok((ckpt, rows))
}

/// Held-out quality of a trained pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub l_base: f64,
    /// Fraction of triplets with a positive implied reward gap
    /// `r(c, c_I^w) − r(c, c_I^l)`.
    pub reward_win_rate: f64,
}

pub fn evaluate(
    triplets: &[PreferenceTriplet],
    theta: &AlignerParams,
    reference: &AlignerParams,
    objective: &ObjectiveConfig,
) -> Result<Evaluation> {
    let l = l_base(triplets, theta)?;
    let mut wins = 0usize;
    for t in triplets {
        if implied_reward_gap(&t.input(), &t.winning, &t.losing, theta, reference, objective)? > 0.0 {
            wins += 1;
        }
    }
    Ok(Evaluation {
        l_base: l,
        reward_win_rate: wins as f64 / triplets.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{make_world, WorldConfig};

    fn small_world() -> crate::synthworld::World {
        make_world(WorldConfig {
            n_concepts: 3,
            d_image: 4,
            d_guidance: 6,
            prompt_dim: 2,
            corruption_scale: 1.0,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn short_config() -> TrainerConfig {
        TrainerConfig {
            iterations: 30,
            eval_every: 1,
            batch_size: 4,
            objective: ObjectiveConfig {
                k: 2,
                ..ObjectiveConfig::default()
            },
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let w = small_world();
        let cfg = TrainerConfig {
            iterations: 0,
            ..short_config()
        };
        let (ckpt, rows) = train(
            &mut w.sampler(Stream::Data),
            cfg,
            w.config.aligner_config(),
            serde_json::Value::Null,
        )
        .unwrap();
        assert!(rows.is_empty());
        assert_eq!(
            ckpt,
            Checkpoint::initial(cfg, w.config.aligner_config(), serde_json::Value::Null).unwrap()
        );
    }

    #[test]
    fn theta_and_reference_start_independent() {
        let c = Checkpoint::initial(
            short_config(),
            small_world().config.aligner_config(),
            serde_json::Value::Null,
        )
        .unwrap();
        assert_ne!(c.theta, c.reference);
    }

    #[test]
    fn runs_are_deterministic() {
        let w = small_world();
        let run = || {
            train(
                &mut w.sampler(Stream::Data),
                short_config(),
                w.config.aligner_config(),
                serde_json::Value::Null,
            )
            .unwrap()
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(ra.len(), 30);
        assert_eq!(a, b);
        let bits = |rows: &[MetricsRow]| -> Vec<u64> {
            rows.iter()
                .flat_map(|r| [r.l_base.to_bits(), r.total.to_bits(), r.swaps])
                .collect()
        };
        assert_eq!(bits(&ra), bits(&rb));
    }

    #[test]
    fn swaps_monotone_and_reference_changes_only_on_swap() {
        let w = small_world();
        let mut ckpt = Checkpoint::initial(short_config(), w.config.aligner_config(), serde_json::Value::Null).unwrap();
        let mut source = w.sampler(Stream::Data);
        let mut last_swaps = 0;
        for it in 1..=60 {
            let before = ckpt.reference.clone();
            let mut row = None;
            train_until(&mut ckpt, &mut source, it, |r| row = Some(r)).unwrap();
            let row = row.unwrap();
            assert!(row.swaps >= last_swaps);
            assert!(ckpt.controller.consecutive_wins < ckpt.trainer.objective.k);
            if row.swaps > last_swaps {
                assert_eq!(ckpt.reference, ckpt.theta);
            } else {
                assert_eq!(ckpt.reference, before);
            }
            last_swaps = row.swaps;
        }
        assert!(last_swaps > 0, "expected at least one swap in 60 iterations");
    }

    #[test]
    fn eval_every_thins_rows() {
        let w = small_world();
        let cfg = TrainerConfig {
            eval_every: 7,
            ..short_config()
        };
        let (_, rows) = train(
            &mut w.sampler(Stream::Data),
            cfg,
            w.config.aligner_config(),
            serde_json::Value::Null,
        )
        .unwrap();
        let its: Vec<u64> = rows.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![7, 14, 21, 28]);
    }

    #[test]
    fn non_finite_loss_aborts_with_iteration() {
        let w = small_world();
        let cfg = short_config();
        let mut ckpt = Checkpoint::initial(cfg, w.config.aligner_config(), serde_json::Value::Null).unwrap();
        let mut source = w.sampler(Stream::Data);
        train_until(&mut ckpt, &mut source, 3, |_| {}).unwrap();
        let saved = ckpt.clone();
        ckpt.theta.out[1].bias.set(0, 0, f64::NAN);
        let frozen = ckpt.clone();
        let err = train_until(&mut ckpt, &mut source, 10, |_| {}).unwrap_err();
        match err {
            Error::NonFinite {
                iteration, ref term, ..
            } => {
                assert_eq!(iteration, 4);
                assert_eq!(term, "l_base");
            }
            other => panic!("{other}"),
        }
        assert_eq!(ckpt.iteration, saved.iteration);
        assert_eq!(ckpt.data_position, frozen.data_position);
        let bits = |p: &AlignerParams| -> Vec<u64> { p.flatten().iter().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&ckpt.theta), bits(&frozen.theta));
        assert_eq!(ckpt.optimizer, frozen.optimizer);
    }

    #[test]
    fn dataset_source_cycles_and_seeks() {
        let w = small_world();
        let triplets = w.held_out(5);
        let mut s = DatasetSource::new(triplets.clone()).unwrap();
        let a = s.next_batch(3).unwrap();
        let b = s.next_batch(3).unwrap();
        assert_eq!(a, triplets[..3].to_vec());
        assert_eq!(b, vec![triplets[3].clone(), triplets[4].clone(), triplets[0].clone()]);
        s.seek(3).unwrap();
        assert_eq!(s.next_batch(3).unwrap(), b);
        assert!(DatasetSource::new(vec![]).is_err());
    }

    #[test]
    fn invalid_trainer_config_rejected() {
        for cfg in [
            TrainerConfig {
                learning_rate: 0.0,
                ..TrainerConfig::default()
            },
            TrainerConfig {
                batch_size: 0,
                ..TrainerConfig::default()
            },
            TrainerConfig {
                beta2: 1.0,
                ..TrainerConfig::default()
            },
            TrainerConfig {
                objective: ObjectiveConfig {
                    k: 0,
                    ..ObjectiveConfig::default()
                },
                ..TrainerConfig::default()
            },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
