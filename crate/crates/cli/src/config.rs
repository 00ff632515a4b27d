//! Run configuration: built-in defaults, overridden by a flat JSON config
//! file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sqdm_core::denoiser::{AdamConfig, DenoiserConfig, TrainOptions};
use sqdm_core::diffusion::MarginalMode;
use sqdm_core::schedule::{build_linear_schedule, resample_schedule};
use sqdm_core::{NoiseSchedule, Variant};

use crate::CliError;

/// Every knob after defaults, config file and flags have been merged.
///
/// Schedule and EMA defaults follow the reference DDPM setup (linear β from
/// 1e-4 to 0.02, 1000 training / 50 sampling steps, EMA 0.9999). Optimizer,
/// network and dataset settings are this tool's own toy-scale choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub s0: f64,
    pub variant: String,
    pub time_dependent: bool,
    pub marginal: String,
    pub feature_dim: Option<usize>,
    pub timesteps: usize,
    pub inference_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub dataset: Option<PathBuf>,
    pub dataset_size: usize,
    pub out: PathBuf,
    pub ema: bool,
    pub ema_decay: f64,
    #[serde(with = "list")]
    pub grid: Vec<f64>,
    #[serde(with = "list")]
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(with = "list")]
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub log_every: u64,
    pub num_samples: usize,
    pub num_projections: usize,
    pub k: usize,
    pub filter: Option<String>,
}

impl Default for ResolvedConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            s0: 0.0,
            variant: "sdm".into(),
            time_dependent: true,
            marginal: "exact".into(),
            feature_dim: None,
            timesteps: 1000,
            inference_steps: 50,
            beta_min: 1e-4,
            beta_max: 0.02,
            dataset: None,
            dataset_size: 4000,
            out: PathBuf::from("runs"),
            ema: true,
            ema_decay: 0.9999,
            grid: vec![-0.6, -0.4, -0.3, -0.2, 0.0, 0.2, 0.4],
            seeds: vec![0, 1, 2],
            steps: 3000,
            batch_size: 128,
            lr: 2e-3,
            hidden: vec![64, 64],
            time_dim: 32,
            log_every: 100,
            num_samples: 2000,
            num_projections: 128,
            k: 3,
            filter: None,
        }
    }
}

// Lists are stored as "a,b,c" strings so a manifest's config block is itself
// a valid config file.
mod list {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};
    use std::fmt::Display;
    use std::str::FromStr;

    pub fn serialize<T: Display, S: Serializer>(v: &[T], s: S) -> Result<S::Ok, S::Error> {
        let text: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        s.serialize_str(&text.join(","))
    }

    pub fn deserialize<'de, T: FromStr, D: Deserializer<'de>>(d: D) -> Result<Vec<T>, D::Error> {
        let text = String::deserialize(d)?;
        super::parse_list("list", &text).map_err(D::Error::custom)
    }
}

/// Optional overrides, shared by the config file and the flag parser.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, clap::Args)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    pub s0: Option<f64>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, action = clap::ArgAction::Set, value_name = "BOOL")]
    pub time_dependent: Option<bool>,
    #[arg(long)]
    pub marginal: Option<String>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub inference_steps: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta_min: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta_max: Option<f64>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub dataset_size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, action = clap::ArgAction::Set, value_name = "BOOL")]
    pub ema: Option<bool>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[arg(long, value_name = "LIST", allow_hyphen_values = true)]
    pub grid: Option<String>,
    #[arg(long, value_name = "LIST")]
    pub seeds: Option<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long, value_name = "LIST")]
    pub hidden: Option<String>,
    #[arg(long)]
    pub time_dim: Option<usize>,
    #[arg(long)]
    pub log_every: Option<u64>,
    #[arg(long)]
    pub num_samples: Option<usize>,
    #[arg(long)]
    pub num_projections: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub filter: Option<String>,
}

pub fn parse_list<T: std::str::FromStr>(key: &str, text: &str) -> Result<Vec<T>, CliError> {
    let items: Result<Vec<T>, _> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Usage(format!("{key}: expected a comma-separated list, got {text:?}"))),
    }
}

impl Overrides {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn apply(&self, cfg: &mut ResolvedConfig) -> Result<(), CliError> {
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = &self.$f { cfg.$f = v.clone(); } )*};
        }
        set!(seed, s0, variant, time_dependent, marginal, timesteps, inference_steps, beta_min, beta_max,
             dataset_size, out, ema, ema_decay, steps, batch_size, lr, time_dim, log_every, num_samples,
             num_projections, k);
        if let Some(v) = self.feature_dim {
            cfg.feature_dim = Some(v);
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = Some(v.clone());
        }
        if let Some(v) = &self.filter {
            cfg.filter = Some(v.clone());
        }
        if let Some(v) = &self.grid {
            cfg.grid = parse_list("grid", v)?;
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = parse_list("seeds", v)?;
        }
        if let Some(v) = &self.hidden {
            cfg.hidden = parse_list("hidden", v)?;
        }
        Ok(())
    }
}

/// defaults ← config file ← flags
pub fn resolve(config_file: Option<&Path>, flags: &Overrides) -> Result<ResolvedConfig, CliError> {
    let mut cfg = ResolvedConfig::default();
    if let Some(path) = config_file {
        Overrides::from_file(path)?.apply(&mut cfg)?;
    }
    flags.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

impl ResolvedConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.variant()?;
        self.marginal_mode()?;
        if self.grid.iter().any(|s| !s.is_finite()) {
            return Err(CliError::Usage("grid values must be finite".into()));
        }
        if self.batch_size == 0 || self.num_projections == 0 {
            return Err(CliError::Usage("batch_size and num_projections must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(CliError::Usage(format!("ema_decay must be in [0, 1], got {}", self.ema_decay)));
        }
        Ok(())
    }

    pub fn variant(&self) -> Result<Variant, CliError> {
        self.variant.parse().map_err(|e: sqdm_core::Error| CliError::Usage(e.to_string()))
    }

    pub fn marginal_mode(&self) -> Result<MarginalMode, CliError> {
        self.marginal.parse().map_err(|e: sqdm_core::Error| CliError::Usage(e.to_string()))
    }

    pub fn train_schedule(&self) -> Result<NoiseSchedule, CliError> {
        Ok(build_linear_schedule(self.timesteps, self.beta_min, self.beta_max)?)
    }

    pub fn inference_schedule(&self) -> Result<NoiseSchedule, CliError> {
        Ok(resample_schedule(&self.train_schedule()?, self.inference_steps)?.0)
    }

    /// Feature-group size n for data of dimension `d`: the configured value,
    /// else 3 (RGB pixels) when it divides d, else d.
    pub fn feature_dim_for(&self, d: usize) -> usize {
        self.feature_dim.unwrap_or(if d.is_multiple_of(3) { 3 } else { d })
    }

    pub fn denoiser_config(&self, d: usize) -> Result<DenoiserConfig, CliError> {
        Ok(DenoiserConfig::new(d, self.hidden.clone())?.with_time_dim(self.time_dim)?)
    }

    pub fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            ema_decay: self.ema_decay,
            log_every: self.log_every,
            adam: AdamConfig::default(),
        }
    }
}
