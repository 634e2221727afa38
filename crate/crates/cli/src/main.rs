//! `imgalign` command-line interface.
//!
//! Exit codes: 0 success, 2 invalid flags/config, 3 non-finite training
//! abort, 4 file errors, 5 gradient audit failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use imgalign::toydiffusion::Blend;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "imgalign",
    version,
    about = "Preference-trained image-feature aligner on a synthetic world"
)]
struct Cli {
    /// TOML run config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for world, trainer and diffusion streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BlendArg {
    Replace,
    Additive,
}

#[derive(Subcommand)]
enum Command {
    /// Sample preference triplets to a CSV file.
    GenData {
        #[arg(long)]
        triplets: Option<usize>,
        /// Defaults to `<out-dir>/triplets.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the aligner, or resume from a checkpoint.
    TrainAligner {
        /// Train until this iteration count.
        #[arg(long)]
        iterations: Option<u64>,
        /// Train on a triplet file instead of fresh samples.
        #[arg(long, conflicts_with = "resume")]
        data: Option<PathBuf>,
        /// Continue from a checkpoint, using the config stored in it.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the toy diffusion denoiser.
    TrainDiffusion {
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        points: Option<usize>,
        /// Negate the analytic gradient of one operation (testing aid).
        #[arg(long, hide = true)]
        inject_sign_flip: Option<String>,
    },
    /// Run the generate/align/re-generate pipeline over held-out cases.
    Demo {
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        cases: Option<usize>,
        /// Train the aligner and denoiser first.
        #[arg(long)]
        train_first: bool,
        #[arg(long)]
        image_scale: Option<f64>,
        #[arg(long, value_enum)]
        blend: Option<BlendArg>,
    },
    /// Summarise the models and demo reports in the output directory.
    Eval,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::GenData { triplets: Some(n), .. } => cfg.data.triplets = *n,
        Command::TrainDiffusion { iterations: Some(n) } => cfg.diffusion.iterations = *n,
        Command::Gradcheck { points: Some(n), .. } => cfg.gradcheck.points = *n,
        Command::Demo {
            rounds,
            cases,
            image_scale,
            blend,
            ..
        } => {
            if let Some(r) = rounds {
                cfg.pipeline.rounds = *r;
            }
            if let Some(c) = cases {
                cfg.demo.cases = *c;
            }
            if let Some(s) = image_scale {
                cfg.pipeline.image_scale = *s;
            }
            if let Some(b) = blend {
                cfg.pipeline.blend = match b {
                    BlendArg::Replace => Blend::Replace,
                    BlendArg::Additive => Blend::Additive,
                };
            }
        }
        _ => {}
    }
    let cfg = cfg.finish(cli.seed, cli.out_dir)?;

    match cli.command {
        Command::GenData { out, .. } => commands::gen_data(&cfg, out).map(drop),
        Command::TrainAligner {
            iterations,
            data,
            resume,
        } => commands::train_aligner(&cfg, iterations, data, resume).map(drop),
        Command::TrainDiffusion { .. } => commands::train_diffusion(&cfg).map(drop),
        Command::Gradcheck { inject_sign_flip, .. } => commands::gradcheck(&cfg, inject_sign_flip.as_deref()).map(drop),
        Command::Demo { train_first, .. } => commands::demo(&cfg, train_first).map(drop),
        Command::Eval => commands::eval(&cfg).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
