//! Squeezed forward process and the whiten / denoise / resqueeze sampler.
//!
//! States are flat vectors of length D = groups × n. The n-dimensional
//! squeeze operator acts on each consecutive group of n entries (each pixel
//! of an image), so a batch of states is squeezed block-diagonally.
//!
//! Random draw contract (all draws are standard normals from the passed rng):
//!
//! | operation            | draws                                   |
//! |----------------------|-----------------------------------------|
//! | `forward_step`       | D                                       |
//! | `marginal_sample`    | D                                       |
//! | `make_training_pair` | D                                       |
//! | `reverse_step`       | D if `t_prev > 0`, else 0               |
//! | `sample_chain`       | N·D for x_T, then N·D per non-final step |

use rand::Rng;

use crate::denoiser::NoisePredictor;
use crate::linalg::{dot, Matrix};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::squeeze::SqueezeSpec;
use crate::{Error, Result};

/// How training states x_t are drawn from x_0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MarginalMode {
    /// The exact marginal covariance Σ_t = Σᵢ (1−αᵢ)∏ⱼ αⱼ SᵢSᵢᵀ.
    #[default]
    Exact,
    /// The approximation x_t = √ᾱ_t x_0 + √(1−ᾱ_t) S_t ε.
    SingleSqueeze,
}

impl MarginalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MarginalMode::Exact => "exact",
            MarginalMode::SingleSqueeze => "single",
        }
    }
}

impl std::str::FromStr for MarginalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(MarginalMode::Exact),
            "single" => Ok(MarginalMode::SingleSqueeze),
            other => Err(Error::InvalidArgument(format!("unknown marginal mode {other:?}"))),
        }
    }
}

/// Schedule, squeeze and state dimension of one diffusion process.
#[derive(Debug, Clone)]
pub struct DiffusionConfig {
    schedule: NoiseSchedule,
    spec: SqueezeSpec,
    data_dim: usize,
    marginal_mode: MarginalMode,
    // (var_parallel, var_perp) per step
    variances: Vec<(f64, f64)>,
}

/// Marginal q(x_t | x_0) in axis-decomposed form.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalParams {
    pub mean: Vec<f64>,
    /// Variance along v̂ within each feature group.
    pub var_parallel: f64,
    /// Variance along every direction orthogonal to v̂.
    pub var_perp: f64,
}

/// One (x_t, S_t ε, t) example for the noise-prediction loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x_t_sq: Vec<f64>,
    pub target: Vec<f64>,
    /// Timestep in the config's schedule.
    pub t: usize,
}

impl DiffusionConfig {
    pub fn new(schedule: NoiseSchedule, spec: SqueezeSpec, data_dim: usize) -> Result<Self> {
        let n = spec.dim();
        if data_dim == 0 || !data_dim.is_multiple_of(n) {
            return Err(Error::InvalidArgument(format!(
                "data dimension {data_dim} is not a positive multiple of the feature dimension {n}"
            )));
        }
        let variances = marginal_variances(&schedule, &spec);
        Ok(Self { schedule, spec, data_dim, marginal_mode: MarginalMode::Exact, variances })
    }

    pub fn with_marginal_mode(mut self, mode: MarginalMode) -> Self {
        self.marginal_mode = mode;
        self
    }

    /// Same squeeze and dimension, different schedule.
    pub fn with_schedule(&self, schedule: NoiseSchedule) -> Self {
        let variances = marginal_variances(&schedule, &self.spec);
        Self { schedule, spec: self.spec.clone(), data_dim: self.data_dim, marginal_mode: self.marginal_mode, variances }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn spec(&self) -> &SqueezeSpec {
        &self.spec
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn marginal_mode(&self) -> MarginalMode {
        self.marginal_mode
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.data_dim {
            return Err(Error::DimensionMismatch { expected: self.data_dim, actual: x.len() });
        }
        Ok(())
    }

    /// s(t), with s(0) taken as s(1).
    fn strength(&self, t: usize) -> f64 {
        self.spec.strength_unchecked(&self.schedule, t.max(1))
    }

    fn squeeze(&self, t: usize, x: &mut [f64]) {
        self.spec.apply_groups(self.strength(t), x).expect("state length checked");
    }

    fn whiten(&self, t: usize, x: &mut [f64]) {
        self.spec.apply_inverse_groups(self.strength(t), x).expect("state length checked");
    }
}

// Var along/orthogonal to v̂ is (1 − ᾱ_t) + C_t with
// C_t = α_t C_{t−1} + β_t (σ_t² − 1); C ≡ 0 exactly when s ≡ 0.
fn marginal_variances(schedule: &NoiseSchedule, spec: &SqueezeSpec) -> Vec<(f64, f64)> {
    let n = spec.dim() as f64;
    let (mut c_par, mut c_perp) = (0.0, 0.0);
    (1..=schedule.len())
        .map(|t| {
            let s = spec.strength_unchecked(schedule, t);
            let (d_par, d_perp) = match spec.variant() {
                crate::Variant::Sdm => ((-2.0 * s).exp_m1(), 0.0),
                crate::Variant::Hdm => ((-2.0 * s).exp_m1(), (2.0 * s / (n - 1.0)).exp_m1()),
            };
            let (a, b) = (schedule.alpha(t), schedule.beta(t));
            c_par = a * c_par + b * d_par;
            c_perp = a * c_perp + b * d_perp;
            let base = 1.0 - schedule.alpha_bar(t);
            (base + c_par, base + c_perp)
        })
        .collect()
}

/// One squeezed forward step x_{t−1} → x_t.
pub fn forward_step<R: Rng + ?Sized>(
    config: &DiffusionConfig,
    x_prev: &[f64],
    t: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    config.check_state(x_prev)?;
    config.schedule.check(t)?;
    let mut noise = rng::normal_vec(rng, config.data_dim);
    config.squeeze(t, &mut noise);
    let sa = config.schedule.alpha(t).sqrt();
    let sb = config.schedule.beta(t).sqrt();
    Ok(x_prev.iter().zip(&noise).map(|(x, e)| sa * x + sb * e).collect())
}

pub fn marginal_params(config: &DiffusionConfig, x0: &[f64], t: usize) -> Result<MarginalParams> {
    config.check_state(x0)?;
    config.schedule.check(t)?;
    let scale = config.schedule.alpha_bar(t).sqrt();
    let (var_parallel, var_perp) = config.variances[t - 1];
    Ok(MarginalParams { mean: x0.iter().map(|x| scale * x).collect(), var_parallel, var_perp })
}

// √ᾱ_t x0 + Σ_t^{1/2} ε, per feature group
fn exact_marginal_into(config: &DiffusionConfig, x0: &[f64], t: usize, eps: &[f64], out: &mut [f64]) {
    let scale = config.schedule.alpha_bar(t).sqrt();
    let (vp, vo) = config.variances[t - 1];
    if vp == vo {
        let sd = vp.sqrt();
        for ((o, x), e) in out.iter_mut().zip(x0).zip(eps) {
            *o = scale * x + sd * e;
        }
        return;
    }
    let (sp, so) = (vp.sqrt(), vo.sqrt());
    let v = config.spec.direction().v();
    let n = v.len();
    for ((o, x), e) in out.chunks_exact_mut(n).zip(x0.chunks_exact(n)).zip(eps.chunks_exact(n)) {
        let proj = dot(v, e);
        for i in 0..n {
            let along = proj * v[i];
            o[i] = scale * x[i] + sp * along + so * (e[i] - along);
        }
    }
}

/// Direct draw from q(x_t | x_0). Returns the state and the standard-normal
/// draw used to build it.
pub fn marginal_sample<R: Rng + ?Sized>(
    config: &DiffusionConfig,
    x0: &[f64],
    t: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    config.check_state(x0)?;
    config.schedule.check(t)?;
    let eps = rng::normal_vec(rng, config.data_dim);
    let mut out = vec![0.0; config.data_dim];
    exact_marginal_into(config, x0, t, &eps, &mut out);
    Ok((out, eps))
}

/// Draws ε and returns (x_t, S_t ε, t). The state uses the configured
/// [`MarginalMode`].
pub fn make_training_pair<R: Rng + ?Sized>(
    config: &DiffusionConfig,
    x0: &[f64],
    t: usize,
    rng: &mut R,
) -> Result<TrainingPair> {
    config.check_state(x0)?;
    config.schedule.check(t)?;
    let eps = rng::normal_vec(rng, config.data_dim);
    let mut target = eps.clone();
    config.squeeze(t, &mut target);
    let mut x_t_sq = vec![0.0; config.data_dim];
    match config.marginal_mode {
        MarginalMode::Exact => exact_marginal_into(config, x0, t, &eps, &mut x_t_sq),
        MarginalMode::SingleSqueeze => {
            let scale = config.schedule.alpha_bar(t).sqrt();
            let sd = (1.0 - config.schedule.alpha_bar(t)).sqrt();
            for ((o, x), e) in x_t_sq.iter_mut().zip(x0).zip(&target) {
                *o = scale * x + sd * e;
            }
        }
    }
    Ok(TrainingPair { x_t_sq, target, t })
}

/// One reverse step x_t → x_{t_prev} in squeezed coordinates.
///
/// The denoiser sees the squeezed state and the training timestep. Its
/// squeezed-noise prediction and the state are whitened with S_t⁻¹, the
/// isotropic DDPM posterior mean is formed, noise √β̃ z is added unless
/// `t_prev == 0`, and the result is resqueezed with S_{t_prev} (S_0 := S_1).
pub fn reverse_step<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    config: &DiffusionConfig,
    denoiser: &P,
    x_t_sq: &[f64],
    t: usize,
    t_prev: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    config.check_state(x_t_sq)?;
    let sched = &config.schedule;
    sched.check(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("reverse step needs t_prev < t, got {t_prev} >= {t}")));
    }
    let mut eps = denoiser.predict(x_t_sq, sched.train_timestep(t), sched.train_len())?;
    if eps.len() != config.data_dim {
        return Err(Error::DimensionMismatch { expected: config.data_dim, actual: eps.len() });
    }
    let mut x = x_t_sq.to_vec();
    config.whiten(t, &mut x);
    config.whiten(t, &mut eps);

    let bar_t = sched.alpha_bar(t);
    let (alpha, one_minus_alpha, beta_tilde) = if t_prev + 1 == t {
        (sched.alpha(t), sched.beta(t), sched.beta_tilde(t))
    } else {
        let bar_prev = sched.alpha_bar(t_prev);
        let alpha = bar_t / bar_prev;
        (alpha, 1.0 - alpha, (1.0 - bar_prev) / (1.0 - bar_t) * (1.0 - alpha))
    };
    let coeff = one_minus_alpha / (1.0 - bar_t).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    for (xi, ei) in x.iter_mut().zip(&eps) {
        *xi = (*xi - coeff * ei) * inv_sqrt_alpha;
    }
    if t_prev > 0 {
        let sd = beta_tilde.sqrt();
        for xi in x.iter_mut() {
            *xi += sd * rng::normal(rng);
        }
    }
    config.squeeze(t_prev, &mut x);
    Ok(x)
}

/// Full ancestral sampling down `inference` (a schedule from
/// [`crate::schedule::resample_schedule`], or the training schedule itself).
pub fn sample_chain<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    config: &DiffusionConfig,
    denoiser: &P,
    num_samples: usize,
    inference: &NoiseSchedule,
    rng: &mut R,
) -> Result<Matrix> {
    sample_chain_observed(config, denoiser, num_samples, inference, rng, |_, _| {})
}

/// [`sample_chain`], calling `observe(t, states)` with the batch after it
/// reaches each step t (including x_T and the final t = 0).
pub fn sample_chain_observed<P, R, F>(
    config: &DiffusionConfig,
    denoiser: &P,
    num_samples: usize,
    inference: &NoiseSchedule,
    rng: &mut R,
    mut observe: F,
) -> Result<Matrix>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
    F: FnMut(usize, &Matrix),
{
    let d = config.data_dim;
    let mut states = Matrix::zeros(num_samples, d);
    if num_samples == 0 {
        return Ok(states);
    }
    let cfg = config.with_schedule(inference.clone());
    let top = inference.len();
    for i in 0..num_samples {
        let row = states.row_mut(i);
        rng::fill_normal(rng, row);
        cfg.squeeze(top, row);
    }
    observe(top, &states);
    for t in (1..=top).rev() {
        for i in 0..num_samples {
            let next = reverse_step(&cfg, denoiser, states.row(i), t, t - 1, rng)?;
            states.row_mut(i).copy_from_slice(&next);
        }
        observe(t - 1, &states);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_linear_schedule;
    use crate::squeeze::{PrincipalDirection, Variant};

    fn config(variant: Variant, s0: f64, t: usize) -> DiffusionConfig {
        let dir = PrincipalDirection::new(vec![1.0, 2.0, -0.5]).unwrap();
        let spec = SqueezeSpec::new(variant, s0, dir, true).unwrap();
        DiffusionConfig::new(build_linear_schedule(t, 1e-4, 0.02).unwrap(), spec, 6).unwrap()
    }

    #[test]
    fn rejects_bad_dim() {
        let spec = SqueezeSpec::isotropic(3).unwrap();
        let sched = build_linear_schedule(10, 1e-4, 0.02).unwrap();
        assert!(DiffusionConfig::new(sched.clone(), spec.clone(), 4).is_err());
        assert!(DiffusionConfig::new(sched, spec, 0).is_err());
    }

    #[test]
    fn isotropic_marginal_is_ddpm() {
        let cfg = config(Variant::Sdm, 0.0, 100);
        for t in [1, 37, 100] {
            let m = marginal_params(&cfg, &[0.0; 6], t).unwrap();
            assert_eq!(m.var_parallel, 1.0 - cfg.schedule().alpha_bar(t));
            assert_eq!(m.var_perp, m.var_parallel);
        }
    }

    #[test]
    fn first_step_marginal() {
        for variant in [Variant::Sdm, Variant::Hdm] {
            let cfg = config(variant, -0.4, 10);
            let s1 = cfg.spec().strength_at(cfg.schedule(), 1).unwrap();
            let b1 = cfg.schedule().beta(1);
            let m = marginal_params(&cfg, &[1.0; 6], 1).unwrap();
            assert!((m.var_parallel - b1 * (-2.0 * s1).exp()).abs() < 1e-15);
            let perp = match variant {
                Variant::Sdm => b1,
                Variant::Hdm => b1 * (s1).exp(),
            };
            assert!((m.var_perp - perp).abs() < 1e-15);
            assert_eq!(m.mean, vec![cfg.schedule().alpha_bar(1).sqrt(); 6]);
        }
    }

    #[test]
    fn degenerate_step_keeps_state() {
        // α_1 = 1 − 1e-300 rounds to exactly 1
        let sched = build_linear_schedule(2, 1e-300, 0.5).unwrap();
        let cfg = DiffusionConfig::new(sched, SqueezeSpec::isotropic(3).unwrap(), 3).unwrap();
        let x = [0.25, -1.0, 3.5];
        let out = forward_step(&cfg, &x, 1, &mut rng::stream(0, 0)).unwrap();
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-140);
        }
    }

    #[test]
    fn training_target_is_squeezed_noise() {
        let cfg = config(Variant::Hdm, 0.3, 20);
        let x0 = [0.1, 0.2, 0.3, -0.4, 0.5, -0.6];
        let mut r = rng::stream(5, 0);
        let pair = make_training_pair(&cfg, &x0, 13, &mut r).unwrap();
        let eps = rng::normal_vec(&mut rng::stream(5, 0), 6);
        let s = cfg.spec().strength_at(cfg.schedule(), 13).unwrap();
        let mut expect = eps.clone();
        cfg.spec().apply_groups(s, &mut expect).unwrap();
        assert_eq!(pair.target, expect);
        let (x_t, eps_used) = marginal_sample(&cfg, &x0, 13, &mut rng::stream(5, 0)).unwrap();
        assert_eq!(eps_used, eps);
        assert_eq!(pair.x_t_sq, x_t);
    }

    #[test]
    fn reverse_step_final_adds_no_noise() {
        let cfg = config(Variant::Sdm, -0.4, 10);
        let zero = |x: &[f64], _: usize, _: usize| -> Vec<f64> { vec![0.0; x.len()] };
        let mut r = rng::stream(1, 0);
        let before = r.clone();
        let x = [0.3; 6];
        reverse_step(&cfg, &zero, &x, 1, 0, &mut r).unwrap();
        assert_eq!(r, before);
        reverse_step(&cfg, &zero, &x, 3, 2, &mut r).unwrap();
        assert_ne!(r, before);
        assert!(reverse_step(&cfg, &zero, &x, 3, 3, &mut r).is_err());
        let bad = |_: &[f64], _: usize, _: usize| -> Vec<f64> { vec![0.0; 2] };
        assert!(matches!(
            reverse_step(&cfg, &bad, &x, 3, 2, &mut r),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn empty_chain_consumes_nothing() {
        let cfg = config(Variant::Sdm, -0.4, 10);
        let zero = |x: &[f64], _: usize, _: usize| -> Vec<f64> { vec![0.0; x.len()] };
        let mut r = rng::stream(1, 0);
        let before = r.clone();
        let out = sample_chain(&cfg, &zero, 0, cfg.schedule(), &mut r).unwrap();
        assert_eq!(out.rows(), 0);
        assert_eq!(r, before);
    }

    #[test]
    fn one_step_inversion_with_oracle_denoiser() {
        for variant in [Variant::Sdm, Variant::Hdm] {
            let dir = PrincipalDirection::new(vec![0.3, 0.9, 0.1]).unwrap();
            let spec = SqueezeSpec::new(variant, -0.4, dir, true).unwrap();
            let sched = build_linear_schedule(1, 0.3, 0.3).unwrap();
            let cfg = DiffusionConfig::new(sched, spec.clone(), 3).unwrap();
            let x0 = [0.7, -0.2, 0.4];
            let mut r = rng::stream(2, 0);
            let eps = rng::normal_vec(&mut r.clone(), 3);
            let x1 = forward_step(&cfg, &x0, 1, &mut r).unwrap();
            let sq = spec.apply(spec.strength_at(cfg.schedule(), 1).unwrap(), &eps).unwrap();
            let oracle = move |_: &[f64], _: usize, _: usize| sq.clone();
            let back = reverse_step(&cfg, &oracle, &x1, 1, 0, &mut r).unwrap();
            for (a, b) in back.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
