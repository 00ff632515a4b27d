//! Squeeze operators.
//!
//! Both variants act on an n-dimensional feature vector (an RGB pixel for
//! images, n = 3) as rank-one modifications of a scaled identity:
//!
//! ```text
//! SDM(s) = I + v vᵀ (e^{−s} − 1)
//! HDM(s) = e^{−s} v vᵀ + e^{s/(n−1)} (I − v vᵀ)
//! ```
//!
//! `s > 0` squeezes (shrinks variance along `v`), `s < 0` antisqueezes. HDM
//! compensates in the orthogonal complement so that `det HDM(s) = 1`.
//! Operators are never materialized on the hot path; [`SqueezeSpec::apply`]
//! is O(n).

use crate::linalg::{dot, mean_and_covariance, norm, Matrix};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Largest |s0| accepted by [`SqueezeSpec::new`].
pub const MAX_STRENGTH: f64 = 5.0;
/// Largest n for which dense matrices are built.
pub const DENSE_LIMIT: usize = 64;

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Scales the principal axis only.
    Sdm,
    /// Scales the principal axis and counter-scales its complement (unit determinant).
    Hdm,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Sdm => "sdm",
            Variant::Hdm => "hdm",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sdm" => Ok(Variant::Sdm),
            "hdm" => Ok(Variant::Hdm),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?} (expected sdm or hdm)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Unit squeeze direction v̂ in feature space.
///
/// Always normalized, with the first nonzero component positive. The
/// operators only depend on v vᵀ, so the sign convention exists purely to
/// make stored directions reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalDirection {
    v: Vec<f64>,
    explained_variance_ratio: f64,
    mean: Vec<f64>,
}

impl PrincipalDirection {
    /// Normalizes and canonicalizes `v`. The diagnostics are left empty
    /// (ratio 0, no mean).
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let nrm = norm(&v);
        if v.is_empty() || !nrm.is_finite() || nrm == 0.0 {
            return Err(Error::InvalidArgument("direction must be a finite nonzero vector".into()));
        }
        let mut v: Vec<f64> = v.into_iter().map(|x| x / nrm).collect();
        canonicalize_sign(&mut v);
        Ok(Self { v, explained_variance_ratio: 0.0, mean: Vec::new() })
    }

    /// Takes an already unit-norm, sign-canonical `v` verbatim, so stored
    /// directions reload bit for bit. Fails if ‖v‖ is off by more than 1e-12
    /// or the sign convention is violated.
    pub fn from_unit(v: Vec<f64>) -> Result<Self> {
        let nrm = norm(&v);
        if v.is_empty() || !nrm.is_finite() || (nrm - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("direction must have unit norm, got {nrm}")));
        }
        let mut canon = v.clone();
        canonicalize_sign(&mut canon);
        if canon != v {
            return Err(Error::InvalidArgument("direction's first nonzero component must be positive".into()));
        }
        Ok(Self { v, explained_variance_ratio: 0.0, mean: Vec::new() })
    }

    /// The standard basis vector e_axis in n dimensions.
    pub fn axis(n: usize, axis: usize) -> Result<Self> {
        if axis >= n {
            return Err(Error::InvalidArgument(format!("axis {axis} out of range for n = {n}")));
        }
        let mut v = vec![0.0; n];
        v[axis] = 1.0;
        Self::new(v)
    }

    pub fn with_diagnostics(mut self, explained_variance_ratio: f64, mean: Vec<f64>) -> Self {
        self.explained_variance_ratio = explained_variance_ratio;
        self.mean = mean;
        self
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn explained_variance_ratio(&self) -> f64 {
        self.explained_variance_ratio
    }

    /// Per-channel mean of the data the direction was estimated from (empty if unknown).
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
}

fn canonicalize_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Squeeze configuration: variant, base strength s0, direction, and
/// whether s follows the β schedule (s(t) = s0·β_t/β_max).
#[derive(Debug, Clone, PartialEq)]
pub struct SqueezeSpec {
    variant: Variant,
    s0: f64,
    direction: PrincipalDirection,
    time_dependent: bool,
}

/// Drift R_t = S_t⁻¹ S_{t−1} between consecutive squeeze matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftFactor {
    /// Dense R_t.
    pub matrix: Matrix,
    /// Spectral norm ‖R_t − I‖₂.
    pub deviation: f64,
    /// s(t) − s(t−1).
    pub strength_step: f64,
}

impl SqueezeSpec {
    pub fn new(variant: Variant, s0: f64, direction: PrincipalDirection, time_dependent: bool) -> Result<Self> {
        if !s0.is_finite() || s0.abs() > MAX_STRENGTH {
            return Err(Error::InvalidSqueeze(format!("|s0| must be finite and <= {MAX_STRENGTH}, got {s0}")));
        }
        if variant == Variant::Hdm && direction.dim() < 2 {
            return Err(Error::InvalidSqueeze("HDM needs at least two dimensions".into()));
        }
        Ok(Self { variant, s0, direction, time_dependent })
    }

    /// The identity squeeze (s0 = 0) in n dimensions; a plain DDPM.
    pub fn isotropic(n: usize) -> Result<Self> {
        Self::new(Variant::Sdm, 0.0, PrincipalDirection::axis(n, 0)?, true)
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn s0(&self) -> f64 {
        self.s0
    }

    pub fn direction(&self) -> &PrincipalDirection {
        &self.direction
    }

    pub fn time_dependent(&self) -> bool {
        self.time_dependent
    }

    /// Feature dimension n.
    pub fn dim(&self) -> usize {
        self.direction.dim()
    }

    /// Squeeze strength at 1-based step `t` of `schedule`.
    pub fn strength_at(&self, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
        schedule.check(t)?;
        Ok(self.strength_unchecked(schedule, t))
    }

    pub(crate) fn strength_unchecked(&self, schedule: &NoiseSchedule, t: usize) -> f64 {
        if self.time_dependent {
            self.s0 * schedule.squeeze_beta(t) / schedule.beta_max()
        } else {
            self.s0
        }
    }

    /// Eigenvalues of S(s): (along v, orthogonal to v).
    pub fn eigenvalues(&self, s: f64) -> (f64, f64) {
        match self.variant {
            Variant::Sdm => ((-s).exp(), 1.0),
            Variant::Hdm => ((-s).exp(), (s / (self.dim() - 1) as f64).exp()),
        }
    }

    /// S(s)·x.
    pub fn apply(&self, s: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = x.to_vec();
        self.apply_in_place(s, &mut out)?;
        Ok(out)
    }

    /// S(s)⁻¹·x. For SDM this is the Sherman–Morrison inverse
    /// I + v vᵀ (e^{s} − 1); for HDM the eigenvalues are inverted. Both
    /// coincide with S(−s).
    pub fn apply_inverse(&self, s: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.apply(-s, x)
    }

    pub fn apply_in_place(&self, s: f64, x: &mut [f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: x.len() });
        }
        self.apply_unchecked(s, x);
        Ok(())
    }

    pub fn apply_inverse_in_place(&self, s: f64, x: &mut [f64]) -> Result<()> {
        self.apply_in_place(-s, x)
    }

    /// Applies S(s) to each consecutive n-element group of `x`.
    pub fn apply_groups(&self, s: f64, x: &mut [f64]) -> Result<()> {
        let n = self.dim();
        if !x.len().is_multiple_of(n) {
            return Err(Error::DimensionMismatch { expected: n * (x.len() / n + 1), actual: x.len() });
        }
        for group in x.chunks_exact_mut(n) {
            self.apply_unchecked(s, group);
        }
        Ok(())
    }

    pub fn apply_inverse_groups(&self, s: f64, x: &mut [f64]) -> Result<()> {
        self.apply_groups(-s, x)
    }

    fn apply_unchecked(&self, s: f64, x: &mut [f64]) {
        // S(0) = I exactly; skipping keeps s0 = 0 runs bit-identical to a plain DDPM
        if s == 0.0 {
            return;
        }
        let v = self.direction.v();
        let proj = dot(v, x);
        match self.variant {
            Variant::Sdm => {
                let coeff = (-s).exp_m1() * proj;
                for (xi, vi) in x.iter_mut().zip(v) {
                    *xi += vi * coeff;
                }
            }
            Variant::Hdm => {
                let (par, perp) = self.eigenvalues(s);
                for (xi, vi) in x.iter_mut().zip(v) {
                    let along = proj * vi;
                    *xi = par * along + perp * (*xi - along);
                }
            }
        }
    }

    /// Dense n×n S(s), straight from the closed form.
    pub fn materialize_matrix(&self, s: f64) -> Result<Matrix> {
        let n = self.dim();
        if n > DENSE_LIMIT {
            return Err(Error::TooLarge { n, limit: DENSE_LIMIT });
        }
        let v = self.direction.v();
        let mut m = Matrix::zeros(n, n);
        match self.variant {
            Variant::Sdm => {
                let c = (-s).exp() - 1.0;
                for i in 0..n {
                    for j in 0..n {
                        m[(i, j)] = if i == j { 1.0 } else { 0.0 } + c * v[i] * v[j];
                    }
                }
            }
            Variant::Hdm => {
                let (par, perp) = self.eigenvalues(s);
                for i in 0..n {
                    for j in 0..n {
                        let vv = v[i] * v[j];
                        let id = if i == j { 1.0 } else { 0.0 };
                        m[(i, j)] = par * vv + perp * (id - vv);
                    }
                }
            }
        }
        Ok(m)
    }

    /// s(t) − s(t−1) for `2 <= t <= T`.
    pub fn strength_step(&self, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
        schedule.check(t)?;
        if t < 2 {
            return Err(Error::InvalidArgument("drift needs t >= 2 (no predecessor at t = 1)".into()));
        }
        if !self.time_dependent {
            return Ok(0.0);
        }
        let dbeta = schedule.squeeze_beta(t) - schedule.squeeze_beta(t - 1);
        Ok(self.s0 * dbeta / schedule.beta_max())
    }

    /// ‖R_t − I‖₂ without building R_t.
    pub fn drift_deviation(&self, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
        let ds = self.strength_step(schedule, t)?;
        let (par, perp) = self.drift_eigen_offsets(ds);
        Ok(par.abs().max(perp.abs()))
    }

    // eigenvalues of R_t − I: along v, orthogonal to v
    fn drift_eigen_offsets(&self, ds: f64) -> (f64, f64) {
        match self.variant {
            Variant::Sdm => (ds.exp_m1(), 0.0),
            Variant::Hdm => (ds.exp_m1(), (-ds / (self.dim() - 1) as f64).exp_m1()),
        }
    }

    /// R_t = S_t⁻¹ S_{t−1} and its deviation from the identity.
    pub fn drift_factor(&self, schedule: &NoiseSchedule, t: usize) -> Result<DriftFactor> {
        let n = self.dim();
        if n > DENSE_LIMIT {
            return Err(Error::TooLarge { n, limit: DENSE_LIMIT });
        }
        let ds = self.strength_step(schedule, t)?;
        let (par, perp) = self.drift_eigen_offsets(ds);
        let v = self.direction.v();
        let mut m = Matrix::identity(n);
        for i in 0..n {
            for j in 0..n {
                let vv = v[i] * v[j];
                let id = if i == j { 1.0 } else { 0.0 };
                m[(i, j)] += par * vv + perp * (id - vv);
            }
        }
        Ok(DriftFactor { matrix: m, deviation: par.abs().max(perp.abs()), strength_step: ds })
    }
}

/// Top principal direction of the rows of `samples` (N×n).
///
/// Mean-centered covariance with 1/(N−1) normalization; the top eigenvector
/// is found by power iteration. Each basis vector e_k is tried as a start so
/// that a start orthogonal to the top eigenvector cannot stall the result;
/// the run with the largest Rayleigh quotient wins.
pub fn estimate_principal_direction(samples: &Matrix) -> Result<PrincipalDirection> {
    if samples.rows() < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 samples, got {}", samples.rows())));
    }
    let n = samples.cols();
    if n == 0 {
        return Err(Error::InvalidArgument("PCA needs at least one feature column".into()));
    }
    let (mean, cov) = mean_and_covariance(samples);
    let trace = cov.trace();
    let mean_sq = dot(&mean, &mean);
    if !trace.is_finite() {
        return Err(Error::InvalidArgument("non-finite samples".into()));
    }
    if trace <= 1e-24 * (1.0 + mean_sq) {
        return Err(Error::ZeroVariance);
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in 0..n {
        let mut start = vec![0.0; n];
        start[k] = 1.0;
        let Some((lambda, v)) = power_iteration(&cov, start)? else {
            continue;
        };
        if best.as_ref().is_none_or(|(l, _)| lambda > *l) {
            best = Some((lambda, v));
        }
    }
    let (lambda, v) = best.ok_or(Error::ZeroVariance)?;
    let dir = PrincipalDirection::new(v)?;
    Ok(dir.with_diagnostics((lambda / trace).clamp(0.0, 1.0), mean))
}

// None when the start lies in the null space of `cov`.
fn power_iteration(cov: &Matrix, mut v: Vec<f64>) -> Result<Option<(f64, Vec<f64>)>> {
    let scale = cov.trace();
    for _ in 0..POWER_MAX_ITERS {
        let mut w = cov.matvec(&v)?;
        let nw = norm(&w);
        if nw <= 1e-14 * scale {
            return Ok(None);
        }
        w.iter_mut().for_each(|x| *x /= nw);
        let change = w.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = w;
        if change < POWER_TOL {
            let cv = cov.matvec(&v)?;
            return Ok(Some((dot(&v, &cv), v)));
        }
    }
    Err(Error::NoConvergence { iterations: POWER_MAX_ITERS })
}
