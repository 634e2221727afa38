//! A small conditional diffusion model over feature vectors.
//!
//! Samples are points in the world's image-feature space. The denoiser is
//! conditioned on the concept label and, optionally, on image features; the
//! pipeline regenerates from aligner-refined features with the same seed.

mod denoiser;
mod pipeline;
mod sampler;
mod schedule;
mod training;

pub use denoiser::{
    denoise, denoise_backward, denoise_traced, denoiser_loss, denoiser_loss_backward, denoiser_loss_text_only, one_hot,
    time_features, DenoiserConfig, DenoiserInput, DenoiserParams, DenoiserTrace, DiffusionBatch, TIME_FEATURES,
};
pub use pipeline::{
    img_pipeline, make_case, run_case, summarize, Blend, PipelineCase, PipelineConfig, PipelineModels, PipelineReport,
    PipelineSummary, RoundRecord,
};
pub use sampler::{sample, Sample, SamplerConfig, ALPHA_FLOOR};
pub use schedule::{make_schedule, noising, DiffusionSchedule, ScheduleKind};
pub use training::{
    denoiser_config, diffusion_batch, load_denoiser, read_denoiser, save_denoiser, train_denoiser, write_denoiser,
    write_diffusion_metrics, DiffusionConfig, DiffusionMetricsRow, TrainedDenoiser, DENOISER_FILE_VERSION,
    DIFFUSION_METRICS_HEADER,
};
