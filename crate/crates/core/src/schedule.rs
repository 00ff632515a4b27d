//! Discrete variance schedules shared by the forward and reverse processes.
//!
//! Per-step tables are stored 0-based; every accessor takes the 1-based
//! timestep `t ∈ 1..=len()`. `alpha_bar(0)` is defined as 1.

use crate::{Error, Result};

/// β, α = 1 − β, ᾱ = ∏α and the posterior variance β̃ of a DDPM chain.
///
/// A schedule produced by [`resample_schedule`] also remembers which training
/// timestep each of its steps corresponds to, and the training β at that
/// timestep (which drives the time-dependent squeeze strength).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    beta_tildes: Vec<f64>,
    train_timesteps: Vec<usize>,
    squeeze_betas: Vec<f64>,
    beta_max: f64,
    train_len: usize,
}

/// Linear schedule with `beta[1] = beta_min` and `beta[T] = beta_max`.
pub fn build_linear_schedule(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::InvalidSchedule("number of timesteps must be positive".into()));
    }
    if !beta_min.is_finite() || !beta_max.is_finite() {
        return Err(Error::InvalidSchedule("beta bounds must be finite".into()));
    }
    if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = (0..timesteps)
        .map(|i| {
            if i + 1 == timesteps {
                beta_max
            } else if i == 0 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    let train_timesteps = (1..=timesteps).collect();
    Ok(NoiseSchedule::from_parts(betas.clone(), train_timesteps, betas, beta_max, timesteps))
}

/// Strided subsequence of `train` for sampling with fewer steps.
///
/// Step `k` (1-based) of the returned schedule is training timestep
/// `k · ⌊T / num_inference_steps⌋`; its ᾱ equals the training ᾱ at that
/// timestep and its β is re-derived as `1 − ᾱ_k / ᾱ_{k−1}`. The returned
/// vector lists the training timesteps in sampling (descending) order.
pub fn resample_schedule(
    train: &NoiseSchedule,
    num_inference_steps: usize,
) -> Result<(NoiseSchedule, Vec<usize>)> {
    let total = train.len();
    if num_inference_steps == 0 || num_inference_steps > total {
        return Err(Error::InvalidSchedule(format!(
            "inference steps must be in 1..={total}, got {num_inference_steps}"
        )));
    }
    if num_inference_steps == total {
        let order = train.train_timesteps.iter().rev().copied().collect();
        return Ok((train.clone(), order));
    }
    let stride = total / num_inference_steps;
    let picked: Vec<usize> = (1..=num_inference_steps).map(|k| k * stride).collect();
    let mut betas = Vec::with_capacity(picked.len());
    let mut prev_bar = 1.0;
    for &t in &picked {
        let bar = train.alpha_bar(t);
        betas.push(1.0 - bar / prev_bar);
        prev_bar = bar;
    }
    let train_timesteps: Vec<usize> = picked.iter().map(|&t| train.train_timestep(t)).collect();
    let squeeze_betas = picked.iter().map(|&t| train.squeeze_beta(t)).collect();
    let mut schedule = NoiseSchedule::from_parts(
        betas,
        train_timesteps.clone(),
        squeeze_betas,
        train.beta_max,
        train.train_len,
    );
    // pin ᾱ to the training values rather than the re-accumulated product
    for (k, &t) in picked.iter().enumerate() {
        schedule.alpha_bars[k] = train.alpha_bar(t);
    }
    schedule.recompute_beta_tildes();
    Ok((schedule, train_timesteps.into_iter().rev().collect()))
}

impl NoiseSchedule {
    fn from_parts(
        betas: Vec<f64>,
        train_timesteps: Vec<usize>,
        squeeze_betas: Vec<f64>,
        beta_max: f64,
        train_len: usize,
    ) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let mut s = Self {
            beta_tildes: vec![0.0; betas.len()],
            betas,
            alphas,
            alpha_bars,
            train_timesteps,
            squeeze_betas,
            beta_max,
            train_len,
        };
        s.recompute_beta_tildes();
        s
    }

    fn recompute_beta_tildes(&mut self) {
        for i in 0..self.betas.len() {
            let prev = if i == 0 { 1.0 } else { self.alpha_bars[i - 1] };
            self.beta_tildes[i] = (1.0 - prev) / (1.0 - self.alpha_bars[i]) * self.betas[i];
        }
    }

    /// Number of steps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Errors unless `1 <= t <= T`.
    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            Err(Error::TimestepOutOfRange { t, max: self.len() })
        } else {
            Ok(())
        }
    }

    #[inline]
    fn idx(t: usize) -> usize {
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[Self::idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[Self::idx(t)]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[Self::idx(t)]
        }
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tildes[Self::idx(t)]
    }

    /// Training timestep that step `t` of this schedule corresponds to.
    pub fn train_timestep(&self, t: usize) -> usize {
        self.train_timesteps[Self::idx(t)]
    }

    /// Training-schedule β at step `t`; drives s(t) = s0·β_t/β_max.
    pub fn squeeze_beta(&self, t: usize) -> f64 {
        self.squeeze_betas[Self::idx(t)]
    }

    /// β_max of the training schedule.
    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    /// T of the training schedule this one was derived from.
    pub fn train_len(&self) -> usize {
        self.train_len
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}
