//! Shared steps behind `train`, `sample` and `sweep`: dataset loading,
//! direction estimation, training, sampling and scoring.

use std::path::Path;

use sqdm_core::data::{generate, load_samples, toy_mixture};
use sqdm_core::denoiser::{resume_training, DenoiserParams, TrainOutcome};
use sqdm_core::diffusion::sample_chain_observed;
use sqdm_core::metrics::{precision_recall_knn, random_directions, sliced_wasserstein2_with};
use sqdm_core::squeeze::estimate_principal_direction;
use sqdm_core::{rng, DiffusionConfig, Matrix, PrPoint, PrincipalDirection, SqueezeSpec};

use crate::config::ResolvedConfig;
use crate::manifest::{fmt_f64, write_file, DirectionRecord};
use crate::CliError;

/// Substream of the run seed used by the sampler.
pub const SAMPLE_STREAM: u64 = u64::MAX - 1;
/// Substream of the run seed used for sliced-W2 projections.
pub const METRIC_STREAM: u64 = u64::MAX - 2;
/// Held-out toy reference sets use `seed ^ REFERENCE_SALT` as their data seed.
pub const REFERENCE_SALT: u64 = 0x005e_ed0f_5eed_0f5e;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_MANIFEST_FILE: &str = "train.manifest.json";

/// Training data: the `dataset` file if given, else the toy mixture drawn with the run seed.
pub fn load_dataset(cfg: &ResolvedConfig) -> Result<(Matrix, String), CliError> {
    match &cfg.dataset {
        Some(path) => Ok((load_samples(path)?, path.display().to_string())),
        None => Ok((generate(&toy_mixture(cfg.dataset_size), cfg.seed)?, "toy-mixture".into())),
    }
}

/// Samples to score against: the dataset itself when loaded from a file,
/// otherwise a fresh toy draw independent of the training set.
pub fn reference_set(cfg: &ResolvedConfig, data: &Matrix) -> Result<Matrix, CliError> {
    match &cfg.dataset {
        Some(_) => Ok(data.clone()),
        None => Ok(generate(&toy_mixture(cfg.num_samples), cfg.seed ^ REFERENCE_SALT)?),
    }
}

/// Reshapes each D-dim row into D/n rows of n channels.
pub fn group_rows(data: &Matrix, n: usize) -> Result<Matrix, CliError> {
    if n == 0 || !data.cols().is_multiple_of(n) {
        return Err(CliError::Usage(format!("feature dim {n} does not divide data dim {}", data.cols())));
    }
    Ok(Matrix::from_vec(data.rows() * data.cols() / n, n, data.as_slice().to_vec())?)
}

/// PCA direction of the feature groups, with its on-disk record.
pub fn estimate_direction(data: &Matrix, n: usize) -> Result<(PrincipalDirection, DirectionRecord), CliError> {
    let d = estimate_principal_direction(&group_rows(data, n)?)?;
    let record = DirectionRecord::from_direction(&d);
    Ok((d, record))
}

pub fn diffusion_config(
    cfg: &ResolvedConfig,
    direction: PrincipalDirection,
    data_dim: usize,
) -> Result<DiffusionConfig, CliError> {
    let spec = SqueezeSpec::new(cfg.variant()?, cfg.s0, direction, cfg.time_dependent)?;
    Ok(DiffusionConfig::new(cfg.train_schedule()?, spec, data_dim)?.with_marginal_mode(cfg.marginal_mode()?))
}

pub struct Prepared {
    pub data: Matrix,
    pub dataset_label: String,
    pub record: DirectionRecord,
    pub diffusion: DiffusionConfig,
}

pub fn prepare(cfg: &ResolvedConfig) -> Result<Prepared, CliError> {
    let (data, dataset_label) = load_dataset(cfg)?;
    let n = cfg.feature_dim_for(data.cols());
    let (direction, record) = estimate_direction(&data, n)?;
    let diffusion = diffusion_config(cfg, direction, data.cols())?;
    Ok(Prepared { data, dataset_label, record, diffusion })
}

/// Trains from `start` (or a fresh init with the run seed) up to `cfg.steps`.
/// Divergence comes back as the inner error so callers can record it.
pub fn train_model(
    cfg: &ResolvedConfig,
    prep: &Prepared,
    start: Option<DenoiserParams>,
) -> Result<sqdm_core::Result<TrainOutcome>, CliError> {
    let params = match start {
        Some(p) => p,
        None => DenoiserParams::init(cfg.denoiser_config(prep.data.cols())?, cfg.seed)?,
    };
    let result = resume_training(params, &prep.data, &prep.diffusion, &cfg.train_options(cfg.seed));
    match result {
        Err(e @ sqdm_core::Error::Diverged { .. }) => Ok(Err(e)),
        Err(e) => Err(e.into()),
        Ok(out) => Ok(Ok(out)),
    }
}

/// Ancestral sampling on the inference schedule, with the EMA or live weights.
/// `observe(t, states)` sees the batch after each step.
pub fn sample_with<F: FnMut(usize, &Matrix)>(
    cfg: &ResolvedConfig,
    diffusion: &DiffusionConfig,
    params: &DenoiserParams,
    observe: F,
) -> Result<Matrix, CliError> {
    let inference = cfg.inference_schedule()?;
    let model = if cfg.ema { params.ema() } else { params.live() };
    let mut r = rng::stream(cfg.seed, SAMPLE_STREAM);
    Ok(sample_chain_observed(diffusion, &model, cfg.num_samples, &inference, &mut r, observe)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub sw2: f64,
    pub pr: PrPoint,
}

pub fn score(cfg: &ResolvedConfig, reference: &Matrix, samples: &Matrix) -> Result<Scores, CliError> {
    let mut r = rng::stream(cfg.seed, METRIC_STREAM);
    let dirs = random_directions(reference.cols(), cfg.num_projections, &mut r);
    let sw2 = sliced_wasserstein2_with(reference, samples, &dirs)?;
    let pr = precision_recall_knn(reference, samples, cfg.k)?;
    Ok(Scores { sw2, pr })
}

pub fn write_loss_csv(path: &Path, trace: &[(u64, f64)]) -> Result<(), CliError> {
    let mut text = String::from("step,loss\n");
    for (step, loss) in trace {
        text.push_str(&format!("{step},{}\n", fmt_f64(*loss)));
    }
    write_file(path, text.as_bytes())
}
