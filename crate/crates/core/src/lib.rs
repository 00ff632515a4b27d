//! Squeezed diffusion models.
//!
//! A DDPM whose per-step Gaussian noise is scaled anisotropically along the
//! first principal component of the data. The crate provides:
//!
//! * [`schedule`]: linear β schedules and strided inference subsequences.
//! * [`squeeze`]: the SDM / HDM squeeze operators, their inverses, drift
//!   factors and PCA estimation of the squeeze direction.
//! * [`diffusion`]: squeezed forward process, exact marginals, training pairs
//!   and the whiten / denoise / resqueeze reverse sampler.
//! * [`denoiser`]: a time-conditioned MLP noise predictor with hand-written
//!   backprop, Adam and EMA weights.
//! * [`metrics`]: sliced Wasserstein-2, k-NN precision/recall, covariance
//!   diagnostics.
//! * [`data`]: synthetic datasets, PPM pixel ingestion and the flat tensor
//!   file format.
//! * [`verify`]: the self-check suite behind `sqdm verify`.
//!
//! # Index convention
//!
//! Timesteps are 1-based everywhere in the public API (`t = 1..=T`), matching
//! the diffusion literature. `t = 0` denotes the clean data. Internally
//! per-step tables are stored 0-based and accessed only through
//! [`schedule::NoiseSchedule`] accessors.

pub mod data;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod schedule;
pub mod squeeze;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use schedule::NoiseSchedule;
pub use squeeze::{PrincipalDirection, SqueezeSpec, Variant};
pub use diffusion::{DiffusionConfig, MarginalMode, MarginalParams, TrainingPair};
pub use denoiser::{DenoiserConfig, DenoiserParams, NoisePredictor};
pub use metrics::PrPoint;
