use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use imgalign::audit::{run_audit_with, AuditReport};
use imgalign::rng::Stream;
use imgalign::synthworld::{make_world, read_dataset, write_dataset, Dataset, World};
use imgalign::toydiffusion::{
    img_pipeline, load_denoiser, sample, save_denoiser, summarize, train_denoiser, write_diffusion_metrics,
    PipelineModels, PipelineReport, PipelineSummary, TrainedDenoiser,
};
use imgalign::trainer::{
    evaluate, load_checkpoint, save_checkpoint, train_until, write_metrics, Checkpoint, DatasetSource, Evaluation,
    MetricsRow, TripletSource,
};

use crate::config::RunConfig;
use crate::error::CliError;

pub const DATASET_FILE: &str = "triplets.csv";
pub const ALIGNER_FILE: &str = "aligner.ckpt";
pub const ALIGNER_METRICS_FILE: &str = "aligner_metrics.csv";
pub const DENOISER_FILE: &str = "denoiser.bin";
pub const DIFFUSION_METRICS_FILE: &str = "diffusion_metrics.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const DEMO_DIR: &str = "demo";
pub const DEMO_SUMMARY_FILE: &str = "summary.json";
pub const EVAL_FILE: &str = "eval.json";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn world(cfg: &RunConfig) -> Result<World, CliError> {
    Ok(make_world(cfg.world)?)
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Serialize)]
pub struct DataSummary {
    pub triplets: usize,
    pub label_swapped: usize,
    pub label_noise_frequency: f64,
    pub min_concept_separation: f64,
    pub mean_concept_separation: f64,
    pub mean_corruption_norm: f64,
}

fn summarize_data(world: &World, dataset: &Dataset) -> DataSummary {
    let n = world.config.n_concepts;
    let mut seps = Vec::new();
    for i in 0..n {
        for j in 0..i {
            let d = world
                .concept(i)
                .squared_distance(&world.concept(j))
                .expect("same shape");
            seps.push(d.sqrt());
        }
    }
    let swapped = dataset.triplets.iter().filter(|t| t.label_swapped).count();
    let count = dataset.triplets.len();
    let corruption: f64 = dataset
        .triplets
        .iter()
        .map(|t| t.losing.squared_distance(&t.winning).expect("same shape").sqrt())
        .sum();
    DataSummary {
        triplets: count,
        label_swapped: swapped,
        label_noise_frequency: swapped as f64 / count.max(1) as f64,
        min_concept_separation: seps.iter().copied().fold(f64::INFINITY, f64::min),
        mean_concept_separation: seps.iter().sum::<f64>() / seps.len().max(1) as f64,
        mean_corruption_norm: corruption / count.max(1) as f64,
    }
}

pub fn gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<DataSummary, CliError> {
    let world = world(cfg)?;
    let mut sampler = world.sampler(Stream::Data);
    let dataset = Dataset {
        config: world.config,
        triplets: (0..cfg.data.triplets).map(|_| sampler.next_triplet()).collect(),
    };
    let path = out.unwrap_or_else(|| cfg.out_dir.join(DATASET_FILE));
    let mut bytes = Vec::new();
    write_dataset(&dataset, &mut bytes)?;
    write_file(&path, &bytes)?;
    let summary = summarize_data(&world, &dataset);
    println!("wrote {} triplets to {}", summary.triplets, path.display());
    println!(
        "label noise: {} swapped ({:.4}, configured {})",
        summary.label_swapped, summary.label_noise_frequency, cfg.world.label_noise
    );
    println!(
        "concept separation: min {:.4}, mean {:.4}; mean corruption norm {:.4}",
        summary.min_concept_separation, summary.mean_concept_separation, summary.mean_corruption_norm
    );
    Ok(summary)
}

// ----------------------------------------------------------- train-aligner

fn metrics_bytes(cfg: &RunConfig, rows: &[MetricsRow], with_header: bool) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_metrics(rows, &mut buf)?;
    if with_header {
        let mut out = format!("# config: {}\n", cfg.snapshot_line()).into_bytes();
        out.extend_from_slice(&buf);
        Ok(out)
    } else {
        // Drop the column header when appending to an existing file.
        let skip = buf.iter().position(|&b| b == b'\n').map_or(buf.len(), |i| i + 1);
        Ok(buf[skip..].to_vec())
    }
}

#[derive(Debug, Serialize)]
pub struct AlignerRun {
    pub iterations: u64,
    pub swaps: u64,
    pub initial: Evaluation,
    pub fin: Evaluation,
}

/// Trains (or resumes) the aligner up to `until` iterations.
///
/// A fresh run stores the full run config in the checkpoint; a resumed run
/// takes its config from there, so only the iteration target can change.
pub fn train_aligner(
    cfg: &RunConfig,
    until: Option<u64>,
    data: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<AlignerRun, CliError> {
    let (mut ckpt, run, data) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(&path)?;
            let run = RunConfig::from_snapshot(&ckpt.context["run"])?;
            let data = ckpt.context["data"].as_str().map(PathBuf::from);
            (
                ckpt,
                RunConfig {
                    out_dir: cfg.out_dir.clone(),
                    ..run
                },
                data,
            )
        }
        None => {
            let context = json!({
                "run": cfg.snapshot(),
                "data": data.as_ref().map(|p| p.display().to_string()),
            });
            let ckpt = Checkpoint::initial(cfg.trainer, cfg.aligner_config(), context)?;
            (ckpt, cfg.clone(), data)
        }
    };
    let until = until.unwrap_or(run.trainer.iterations);
    let resuming = ckpt.iteration > 0;

    let (world, dataset) = match &data {
        Some(path) => {
            let dataset = read_dataset(&read_file(path)?)?;
            (make_world(dataset.config)?, Some(dataset))
        }
        None => (world(&run)?, None),
    };
    let mut rows = Vec::new();
    let outcome = match dataset {
        Some(d) => {
            let mut source = DatasetSource::new(d.triplets)?;
            run_training(&mut ckpt, &mut source, until, &mut rows)
        }
        None => {
            let mut source = world.sampler(Stream::Data);
            run_training(&mut ckpt, &mut source, until, &mut rows)
        }
    };

    // Persist whatever completed, even when training aborted.
    create_dir(&run.out_dir)?;
    let metrics_path = run.out_dir.join(ALIGNER_METRICS_FILE);
    let append = resuming && metrics_path.exists();
    let bytes = metrics_bytes(&run, &rows, !append)?;
    if append {
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| CliError::io(&metrics_path, e))?;
        f.write_all(&bytes).map_err(|e| CliError::io(&metrics_path, e))?;
    } else {
        write_file(&metrics_path, &bytes)?;
    }
    let ckpt_path = run.out_dir.join(ALIGNER_FILE);
    save_checkpoint(&ckpt, &ckpt_path)?;
    outcome?;

    let held_out = world.held_out(run.data.held_out);
    let initial = Checkpoint::initial(ckpt.trainer, ckpt.aligner, serde_json::Value::Null)?;
    let objective = &ckpt.trainer.objective;
    let report = AlignerRun {
        iterations: ckpt.iteration,
        swaps: ckpt.controller.total_swaps,
        initial: evaluate(&held_out, &initial.theta, &initial.reference, objective)?,
        fin: evaluate(&held_out, &ckpt.theta, &ckpt.reference, objective)?,
    };
    println!(
        "trained aligner to iteration {} ({} reference swaps); checkpoint {}",
        report.iterations,
        report.swaps,
        ckpt_path.display()
    );
    println!(
        "held-out l_base {:.6} -> {:.6} ({:.1}% of initial); reward win rate {:.3}",
        report.initial.l_base,
        report.fin.l_base,
        100.0 * report.fin.l_base / report.initial.l_base,
        report.fin.reward_win_rate
    );
    Ok(report)
}

fn run_training<S: TripletSource>(
    ckpt: &mut Checkpoint,
    source: &mut S,
    until: u64,
    rows: &mut Vec<MetricsRow>,
) -> Result<(), CliError> {
    train_until(ckpt, source, until, |r| rows.push(r)).map_err(CliError::from)
}

// --------------------------------------------------------- train-diffusion

#[derive(Debug, Serialize)]
pub struct DiffusionRun {
    pub iterations: u64,
    pub final_loss: Option<f64>,
    /// Fraction of text-only samples closest to their own concept.
    pub nearest_concept_rate: f64,
}

const QUALITY_SAMPLES: usize = 100;

pub fn train_diffusion(cfg: &RunConfig) -> Result<DiffusionRun, CliError> {
    let world = world(cfg)?;
    let (model, rows) = train_denoiser(&world, cfg.diffusion, json!({ "run": cfg.snapshot() }))?;
    let path = cfg.out_dir.join(DENOISER_FILE);
    create_dir(&cfg.out_dir)?;
    save_denoiser(&model, &path)?;
    let mut buf = format!("# config: {}\n", cfg.snapshot_line()).into_bytes();
    write_diffusion_metrics(&rows, &mut buf)?;
    write_file(&cfg.out_dir.join(DIFFUSION_METRICS_FILE), &buf)?;

    let rate = nearest_concept_rate(&world, &model)?;
    let report = DiffusionRun {
        iterations: model.iterations,
        final_loss: rows.last().map(|r| r.loss),
        nearest_concept_rate: rate,
    };
    println!(
        "trained denoiser for {} iterations; model {}",
        report.iterations,
        path.display()
    );
    if let Some(loss) = report.final_loss {
        println!("last logged batch loss {loss:.6}");
    }
    println!("text-only samples nearest their own concept: {:.1}%", 100.0 * rate);
    Ok(report)
}

fn nearest_concept_rate(world: &World, model: &TrainedDenoiser) -> Result<f64, CliError> {
    let sched = model.schedule()?;
    let n = world.config.n_concepts;
    let width = model.params.config().width;
    let concepts: Vec<_> = (0..n)
        .map(|j| world.concept(j).reshape(1, width))
        .collect::<Result<_, _>>()?;
    let mut hits = 0;
    for s in 0..QUALITY_SAMPLES {
        let id = s % n;
        let x = sample(&model.params, id, None, &sched, model.config.sampler, s as u64)?.x;
        let d: Vec<f64> = concepts
            .iter()
            .map(|c| x.squared_distance(c))
            .collect::<Result<_, _>>()?;
        if (0..n).all(|j| j == id || d[id] < d[j]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / QUALITY_SAMPLES as f64)
}

// --------------------------------------------------------------- gradcheck

pub fn gradcheck(cfg: &RunConfig, inject_sign_flip: Option<&str>) -> Result<AuditReport, CliError> {
    let flip = |op: &str, g: &mut Vec<f64>| {
        if Some(op) == inject_sign_flip {
            g.iter_mut().for_each(|v| *v = -*v);
        }
    };
    let report = run_audit_with(cfg.gradcheck.points, cfg.gradcheck.seed, &flip);
    println!("{:<16} {:>6} {:>14}  status", "operation", "points", "max rel error");
    for e in &report.entries {
        println!(
            "{:<16} {:>6} {:>14.3e}  {}{}",
            e.op,
            e.points,
            e.max_rel_error,
            if e.passed { "ok" } else { "FAIL" },
            e.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default()
        );
    }
    create_dir(&cfg.out_dir)?;
    write_json(
        &cfg.out_dir.join(GRADCHECK_FILE),
        &json!({ "report": report, "config": cfg.snapshot() }),
    )?;
    if report.passed() {
        println!("all {} operations within {:e}", report.entries.len(), report.tolerance);
        Ok(report)
    } else {
        let failed: Vec<_> = report
            .entries
            .iter()
            .filter(|e| !e.passed)
            .map(|e| e.op.as_str())
            .collect();
        Err(CliError::GradCheck(failed.join(", ")))
    }
}

// -------------------------------------------------------------------- demo

pub fn case_file(i: usize) -> String {
    format!("case_{i:05}.json")
}

pub fn demo(cfg: &RunConfig, train_first: bool) -> Result<PipelineSummary, CliError> {
    if train_first {
        train_aligner(cfg, None, None, None)?;
        train_diffusion(cfg)?;
    }
    let aligner = load_checkpoint(&cfg.out_dir.join(ALIGNER_FILE))?;
    let denoiser = load_denoiser(&cfg.out_dir.join(DENOISER_FILE))?;
    let world = world(cfg)?;
    let models = PipelineModels {
        aligner: &aligner.theta,
        aligner_iterations: aligner.iteration,
        denoiser: &denoiser,
    };
    let dir = cfg.out_dir.join(DEMO_DIR);
    create_dir(&dir)?;
    let mut reports = Vec::with_capacity(cfg.demo.cases);
    for i in 0..cfg.demo.cases {
        let concept = i % world.config.n_concepts;
        let seed = cfg.demo.first_case_seed.wrapping_add(i as u64);
        let report = img_pipeline(&world, &models, concept, seed, cfg.pipeline)?;
        write_json(&dir.join(case_file(i)), &report)?;
        reports.push(report);
    }
    let summary = summarize(&reports);
    write_json(
        &dir.join(DEMO_SUMMARY_FILE),
        &json!({ "summary": summary, "config": cfg.snapshot() }),
    )?;
    print_pipeline_summary(&summary, &reports);
    Ok(summary)
}

fn print_pipeline_summary(summary: &PipelineSummary, reports: &[PipelineReport]) {
    let mut flags: Vec<&str> = reports
        .iter()
        .flat_map(|r| r.flags.iter().map(String::as_str))
        .collect();
    flags.sort_unstable();
    flags.dedup();
    if !flags.is_empty() {
        println!("warning: {}", flags.join(", "));
    }
    println!("{:<8} {:>12}", "round", "mean metric");
    for (k, m) in summary.mean_metric.iter().enumerate() {
        println!("{k:<8} {m:>12.4}");
    }
    println!("{:<8} {:>12.4}", "floor", summary.mean_floor);
    println!(
        "improvement rate (round 1 < round 0): {:.3} over {} cases",
        summary.improvement_rate, summary.cases
    );
    if let Some(r) = summary.round2_no_worse_rate {
        println!("round 2 no worse than round 1 (above floor): {r:.3}");
    }
}

// -------------------------------------------------------------------- eval

pub fn read_demo_reports(out_dir: &Path) -> Result<Vec<PipelineReport>, CliError> {
    let dir = out_dir.join(DEMO_DIR);
    let mut names: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| CliError::io(&dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("case_"))
        })
        .collect();
    names.sort();
    names
        .iter()
        .map(|p| {
            serde_json::from_slice(&read_file(p)?).map_err(|e| {
                CliError::Core(imgalign::Error::Parse {
                    offset: e.column(),
                    message: format!("{}: {e}", p.display()),
                })
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub aligner: Option<AlignerRun>,
    pub pipeline: Option<PipelineSummary>,
}

pub fn eval(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    let ckpt_path = cfg.out_dir.join(ALIGNER_FILE);
    let aligner = if ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path)?;
        let run = RunConfig::from_snapshot(&ckpt.context["run"])?;
        let held_out = world(&run)?.held_out(run.data.held_out);
        let initial = Checkpoint::initial(ckpt.trainer, ckpt.aligner, serde_json::Value::Null)?;
        let objective = &ckpt.trainer.objective;
        let r = AlignerRun {
            iterations: ckpt.iteration,
            swaps: ckpt.controller.total_swaps,
            initial: evaluate(&held_out, &initial.theta, &initial.reference, objective)?,
            fin: evaluate(&held_out, &ckpt.theta, &ckpt.reference, objective)?,
        };
        println!(
            "aligner at iteration {}: held-out l_base {:.6} -> {:.6} ({:.1}%), reward win rate {:.3}",
            r.iterations,
            r.initial.l_base,
            r.fin.l_base,
            100.0 * r.fin.l_base / r.initial.l_base,
            r.fin.reward_win_rate
        );
        Some(r)
    } else {
        println!("no aligner checkpoint at {}", ckpt_path.display());
        None
    };
    let pipeline = if cfg.out_dir.join(DEMO_DIR).is_dir() {
        let reports = read_demo_reports(&cfg.out_dir)?;
        let summary = summarize(&reports);
        print_pipeline_summary(&summary, &reports);
        Some(summary)
    } else {
        println!("no demo reports under {}", cfg.out_dir.join(DEMO_DIR).display());
        None
    };
    let report = EvalReport { aligner, pipeline };
    write_json(
        &cfg.out_dir.join(EVAL_FILE),
        &json!({ "eval": report, "config": cfg.snapshot() }),
    )?;
    Ok(report)
}
