//! Self-checks behind `sqdm verify`.
//!
//! Each check recomputes a closed-form property of the implementation
//! against an independent route (dense matrices, Monte Carlo, finite
//! differences) and reports the observed error next to its threshold.

use crate::denoiser::{DenoiserConfig, DenoiserParams, Mlp};
use crate::diffusion::{forward_step, marginal_params, marginal_sample, DiffusionConfig, TrainingPair};
use crate::linalg::{dot, Matrix};
use crate::metrics::{precision_recall_knn, sliced_wasserstein2};
use crate::rng;
use crate::schedule::build_linear_schedule;
use crate::squeeze::{estimate_principal_direction, PrincipalDirection, SqueezeSpec, Variant};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub group: &'static str,
    pub name: &'static str,
    pub passed: bool,
    /// Observed error (or statistic) compared against `threshold`.
    pub observed: f64,
    pub threshold: f64,
}

/// Deliberate defects for exercising the failure path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flips the sign of the rank-one correction in the fast squeeze path.
    FlipApplySign,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Only run checks whose `group/name` contains this substring.
    pub filter: Option<String>,
    pub fault: Option<Fault>,
}

type ApplyFn = dyn Fn(&SqueezeSpec, f64, &[f64]) -> Vec<f64>;

fn faulty_apply(spec: &SqueezeSpec, s: f64, x: &[f64]) -> Vec<f64> {
    let v = spec.direction().v();
    let (par, perp) = spec.eigenvalues(s);
    let proj = dot(v, x);
    x.iter().zip(v).map(|(xi, vi)| perp * xi - (par - perp) * proj * vi).collect()
}

fn good_apply(spec: &SqueezeSpec, s: f64, x: &[f64]) -> Vec<f64> {
    spec.apply(s, x).expect("dimension matches")
}

struct Ctx<'a> {
    apply: &'a ApplyFn,
}

type CheckFn = fn(&Ctx) -> Result<(f64, f64, bool)>;

const CHECKS: &[(&str, &str, CheckFn)] = &[
    ("schedule", "linear-invariants", check_schedule),
    ("operator", "hdm-determinant", check_hdm_det),
    ("operator", "sherman-morrison-inverse", check_sherman_morrison),
    ("operator", "round-trip", check_round_trip),
    ("operator", "fast-path-vs-dense", check_fast_vs_dense),
    ("drift", "t1000-closed-form", check_drift_closed_form),
    ("drift", "t1000-bound", check_drift_1000),
    ("drift", "t50-bound", check_drift_50),
    ("marginal", "dense-accumulation", check_marginal_dense),
    ("marginal", "monte-carlo", check_marginal_mc),
    ("reduction", "ddpm-forward", check_reduction),
    ("gradient", "finite-difference", check_gradients),
    ("pca", "planted-direction", check_pca),
    ("metrics", "pr-identical-sets", check_pr_identical),
    ("metrics", "sw-self-distance", check_sw_self),
];

/// Runs every selected check. Errors inside a check count as failures.
pub fn run_checks(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    let apply: &ApplyFn = match opts.fault {
        Some(Fault::FlipApplySign) => &faulty_apply,
        None => &good_apply,
    };
    let ctx = Ctx { apply };
    CHECKS
        .iter()
        .filter(|(group, name, _)| {
            opts.filter.as_deref().is_none_or(|f| format!("{group}/{name}").contains(f))
        })
        .map(|&(group, name, check)| {
            let (observed, threshold, passed) = check(&ctx).unwrap_or((f64::NAN, f64::NAN, false));
            CheckOutcome { group, name, passed, observed, threshold }
        })
        .collect()
}

fn le(observed: f64, threshold: f64) -> Result<(f64, f64, bool)> {
    Ok((observed, threshold, observed <= threshold))
}

fn check_schedule(_: &Ctx) -> Result<(f64, f64, bool)> {
    let mut worst: f64 = 0.0;
    for t_len in [1000, 50] {
        let s = build_linear_schedule(t_len, 1e-4, 0.02)?;
        for t in 1..=t_len {
            worst = worst.max((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs());
            let bt = (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * s.beta(t);
            worst = worst.max((bt - s.beta_tilde(t)).abs());
            if t > 1 && s.alpha_bar(t) >= s.alpha_bar(t - 1) {
                return Ok((f64::INFINITY, 1e-12, false));
            }
        }
    }
    le(worst, 1e-12)
}

// Dense matrix of the operator, built column by column through `apply`.
fn operator_matrix(ctx: &Ctx, spec: &SqueezeSpec, s: f64) -> Matrix {
    let n = spec.dim();
    let mut m = Matrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        for (i, x) in (ctx.apply)(spec, s, &e).into_iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    m
}

fn random_spec(variant: Variant, n: usize, seed: u64) -> Result<SqueezeSpec> {
    let dir = PrincipalDirection::new(rng::normal_vec(&mut rng::stream(seed, 0), n))?;
    SqueezeSpec::new(variant, 0.0, dir, true)
}

fn check_hdm_det(ctx: &Ctx) -> Result<(f64, f64, bool)> {
    let mut worst: f64 = 0.0;
    for n in [2, 3, 8] {
        let spec = random_spec(Variant::Hdm, n, n as u64)?;
        for k in 0..=16 {
            let s = -2.0 + 0.25 * k as f64;
            let (det, _) = lu_det_inverse(&operator_matrix(ctx, &spec, s));
            worst = worst.max((det - 1.0).abs());
        }
    }
    le(worst, 1e-10)
}

fn check_sherman_morrison(ctx: &Ctx) -> Result<(f64, f64, bool)> {
    let mut worst: f64 = 0.0;
    for n in [2, 3, 8] {
        let spec = random_spec(Variant::Sdm, n, 100 + n as u64)?;
        for k in 0..=16 {
            let s = -2.0 + 0.25 * k as f64;
            let (_, inv) = lu_det_inverse(&operator_matrix(ctx, &spec, s));
            let sm = operator_matrix(ctx, &spec, -s);
            for (a, b) in inv.as_slice().iter().zip(sm.as_slice()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    le(worst, 1e-12)
}

fn check_round_trip(ctx: &Ctx) -> Result<(f64, f64, bool)> {
    let mut r = rng::stream(21, 0);
    let mut worst: f64 = 0.0;
    for variant in [Variant::Sdm, Variant::Hdm] {
        let spec = random_spec(variant, 3, 22)?;
        for _ in 0..1000 {
            let s = rng::normal(&mut r);
            let x = rng::normal_vec(&mut r, 3);
            let y = (ctx.apply)(&spec, s, &x);
            let back = (ctx.apply)(&spec, -s, &y);
            let scale = dot(&x, &x).sqrt().max(1e-300);
            let err = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(err / scale);
        }
    }
    le(worst, 1e-12)
}

fn check_fast_vs_dense(ctx: &Ctx) -> Result<(f64, f64, bool)> {
    let mut r = rng::stream(31, 0);
    let mut worst: f64 = 0.0;
    for variant in [Variant::Sdm, Variant::Hdm] {
        let spec = random_spec(variant, 3, 32)?;
        for _ in 0..1000 {
            let s = rng::normal(&mut r);
            let x = rng::normal_vec(&mut r, 3);
            let dense = spec.materialize_matrix(s)?.matvec(&x)?;
            let fast = (ctx.apply)(&spec, s, &x);
            let err = dense.iter().zip(&fast).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(err / (1.0 + dot(&x, &x).sqrt()));
        }
    }
    le(worst, 1e-12)
}

fn max_drift(t_len: usize, s0: f64) -> Result<f64> {
    let sched = build_linear_schedule(t_len, 1e-4, 0.02)?;
    let spec = SqueezeSpec::new(Variant::Sdm, s0, PrincipalDirection::axis(3, 0)?, true)?;
    let mut worst: f64 = 0.0;
    for t in 2..=t_len {
        worst = worst.max(spec.drift_factor(&sched, t)?.deviation);
    }
    Ok(worst)
}

fn check_drift_closed_form(_: &Ctx) -> Result<(f64, f64, bool)> {
    let closed = (-0.4 * ((0.02 - 1e-4) / 999.0) / 0.02f64).exp_m1().abs();
    le((max_drift(1000, -0.4)? - closed).abs(), 1e-14)
}

fn check_drift_1000(_: &Ctx) -> Result<(f64, f64, bool)> {
    let worst = [-0.6, -0.4, 0.4, 0.6].iter().map(|&s| max_drift(1000, s)).collect::<Result<Vec<_>>>()?;
    let w = worst.into_iter().fold(0.0, f64::max);
    Ok((w, 7e-4, w < 7e-4))
}

fn check_drift_50(_: &Ctx) -> Result<(f64, f64, bool)> {
    let worst = [-0.6, -0.4, 0.4, 0.6].iter().map(|&s| max_drift(50, s)).collect::<Result<Vec<_>>>()?;
    let w = worst.into_iter().fold(0.0, f64::max);
    Ok((w, 1.3e-2, w < 1.3e-2))
}

fn toy_config(variant: Variant, s0: f64) -> Result<DiffusionConfig> {
    let dir = PrincipalDirection::new(vec![1.0, 1.0, 1.0])?;
    let spec = SqueezeSpec::new(variant, s0, dir, true)?;
    DiffusionConfig::new(build_linear_schedule(10, 1e-4, 0.02)?, spec, 3)
}

fn check_marginal_dense(ctx: &Ctx) -> Result<(f64, f64, bool)> {
    let mut worst: f64 = 0.0;
    for variant in [Variant::Sdm, Variant::Hdm] {
        for s0 in [-0.4, 0.0, 0.4] {
            let cfg = toy_config(variant, s0)?;
            let sched = cfg.schedule();
            let v = cfg.spec().direction().v().to_vec();
            for t in 1..=10 {
                let mut sigma = Matrix::zeros(3, 3);
                for i in 1..=t {
                    let w: f64 = (1.0 - sched.alpha(i)) * (i + 1..=t).map(|j| sched.alpha(j)).product::<f64>();
                    let s_mat = operator_matrix(ctx, cfg.spec(), cfg.spec().strength_at(sched, i)?);
                    let sst = s_mat.matmul(&s_mat.transpose())?;
                    for (a, b) in sigma.as_mut_slice().iter_mut().zip(sst.as_slice()) {
                        *a += w * b;
                    }
                }
                let m = marginal_params(&cfg, &[0.0; 3], t)?;
                let par = dot(&v, &sigma.matvec(&v)?);
                let perp = (sigma.trace() - par) / 2.0;
                worst = worst.max((par - m.var_parallel).abs()).max((perp - m.var_perp).abs());
            }
        }
    }
    le(worst, 1e-12)
}

fn check_marginal_mc(_: &Ctx) -> Result<(f64, f64, bool)> {
    let cfg = toy_config(Variant::Sdm, -0.4)?;
    let v = cfg.spec().direction().v().to_vec();
    let n = 100_000;
    let mut r = rng::stream(41, 0);
    let (mut par, mut perp) = (0.0, 0.0);
    for _ in 0..n {
        let mut x = vec![0.0; 3];
        for t in 1..=10 {
            x = forward_step(&cfg, &x, t, &mut r)?;
        }
        let p = dot(&x, &v);
        par += p * p;
        perp += (dot(&x, &x) - p * p) / 2.0;
    }
    let m = marginal_params(&cfg, &[0.0; 3], 10)?;
    let err = ((par / n as f64) / m.var_parallel - 1.0).abs().max(((perp / n as f64) / m.var_perp - 1.0).abs());
    le(err, 0.03)
}

fn check_reduction(_: &Ctx) -> Result<(f64, f64, bool)> {
    let cfg = DiffusionConfig::new(build_linear_schedule(100, 1e-4, 0.02)?, SqueezeSpec::isotropic(3)?, 6)?;
    let sched = cfg.schedule();
    let mut mismatches = 0;
    for case in 0..200u64 {
        let x = rng::normal_vec(&mut rng::stream(51, case), 6);
        let t = 1 + (case as usize % 100);
        let mut r = rng::stream(52, case);
        let mut r_ref = r.clone();
        let got = forward_step(&cfg, &x, t, &mut r)?;
        let eps = rng::normal_vec(&mut r_ref, 6);
        let (a, b) = (sched.alpha(t).sqrt(), sched.beta(t).sqrt());
        let want: Vec<f64> = x.iter().zip(&eps).map(|(x, e)| a * x + b * e).collect();
        mismatches += usize::from(got != want);

        let mut r = rng::stream(53, case);
        let mut r_ref = r.clone();
        let (got, _) = marginal_sample(&cfg, &x, t, &mut r)?;
        let eps = rng::normal_vec(&mut r_ref, 6);
        let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
        let want: Vec<f64> = x.iter().zip(&eps).map(|(x, e)| a * x + b * e).collect();
        mismatches += usize::from(got != want);
    }
    let m = mismatches as f64;
    Ok((m, 0.0, mismatches == 0))
}

/// Largest relative error between backprop and central differences
/// (step 1e-5) over every parameter of a random small network. Relative
/// error uses max(|a|, |b|, 1e-6) as denominator.
pub fn gradient_check_error(config: &DenoiserConfig, seed: u64, batch: usize) -> Result<f64> {
    let params = DenoiserParams::init(config.clone(), seed)?;
    let mut r = rng::stream(seed, 1);
    let d = config.input_dim;
    let pairs: Vec<TrainingPair> = (0..batch)
        .map(|i| TrainingPair { x_t_sq: rng::normal_vec(&mut r, d), target: rng::normal_vec(&mut r, d), t: 1 + i * 7 % 50 })
        .collect();
    let (_, grads) = params.live().loss_and_grad(&pairs, 50)?;
    let mut w = params.weights().to_vec();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let orig = w[i];
        w[i] = orig + h;
        let (lp, _) = Mlp::new(config, &w)?.loss_and_grad(&pairs, 50)?;
        w[i] = orig - h;
        let (lm, _) = Mlp::new(config, &w)?.loss_and_grad(&pairs, 50)?;
        w[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let denom = grads[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max((grads[i] - fd).abs() / denom);
    }
    Ok(worst)
}

fn check_gradients(_: &Ctx) -> Result<(f64, f64, bool)> {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let d = 2 + seed as usize % 3;
        let config = DenoiserConfig::new(d, vec![6 + seed as usize, 5])?.with_time_dim(4)?;
        worst = worst.max(gradient_check_error(&config, seed, 3)?);
    }
    Ok((worst, 1e-4, worst < 1e-4))
}

fn check_pca(_: &Ctx) -> Result<(f64, f64, bool)> {
    // axes rotated so the planted direction is (2, 1, 2)/3
    let u = [2.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
    let b = [1.0 / 2f64.sqrt(), 0.0, -1.0 / 2f64.sqrt()];
    let c = [u[1] * b[2] - u[2] * b[1], u[2] * b[0] - u[0] * b[2], u[0] * b[1] - u[1] * b[0]];
    let mut r = rng::stream(61, 0);
    let n = 100_000;
    let mut m = Matrix::zeros(n, 3);
    for i in 0..n {
        let (z0, z1, z2) = (2.0 * rng::normal(&mut r), rng::normal(&mut r), 0.7 * rng::normal(&mut r));
        for (k, x) in m.row_mut(i).iter_mut().enumerate() {
            *x = z0 * u[k] + z1 * b[k] + z2 * c[k];
        }
    }
    let dir = estimate_principal_direction(&m)?;
    let angle = dot(dir.v(), &u).abs().min(1.0).acos();
    Ok((angle, 1e-2, angle < 1e-2))
}

fn check_pr_identical(_: &Ctx) -> Result<(f64, f64, bool)> {
    let a = Matrix::from_vec(300, 2, rng::normal_vec(&mut rng::stream(71, 0), 600))?;
    let pr = precision_recall_knn(&a, &a, 3)?;
    le(2.0 - pr.precision - pr.recall, 0.0)
}

fn check_sw_self(_: &Ctx) -> Result<(f64, f64, bool)> {
    let a = Matrix::from_vec(300, 3, rng::normal_vec(&mut rng::stream(72, 0), 900))?;
    le(sliced_wasserstein2(&a, &a, 32, &mut rng::stream(73, 0))?, 0.0)
}

// Determinant and inverse by Gauss–Jordan elimination with partial pivoting.
fn lu_det_inverse(m: &Matrix) -> (f64, Matrix) {
    let n = m.rows();
    let mut a = m.clone();
    let mut inv = Matrix::identity(n);
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs())).unwrap();
        if pivot != col {
            for k in 0..n {
                let (x, y) = (a[(col, k)], a[(pivot, k)]);
                a[(col, k)] = y;
                a[(pivot, k)] = x;
                let (x, y) = (inv[(col, k)], inv[(pivot, k)]);
                inv[(col, k)] = y;
                inv[(pivot, k)] = x;
            }
            det = -det;
        }
        let p = a[(col, col)];
        det *= p;
        for k in 0..n {
            a[(col, k)] /= p;
            inv[(col, k)] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = a[(i, col)];
                if f != 0.0 {
                    for k in 0..n {
                        a[(i, k)] -= f * a[(col, k)];
                        inv[(i, k)] -= f * inv[(col, k)];
                    }
                }
            }
        }
    }
    (det, inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let out = run_checks(&VerifyOptions::default());
        assert_eq!(out.len(), CHECKS.len());
        for c in &out {
            assert!(c.passed, "{}/{} observed {} threshold {}", c.group, c.name, c.observed, c.threshold);
        }
    }

    #[test]
    fn fault_breaks_determinant() {
        let opts = VerifyOptions { filter: Some("determinant".into()), fault: Some(Fault::FlipApplySign) };
        let out = run_checks(&opts);
        assert_eq!(out.len(), 1);
        assert!(!out[0].passed);
    }

    #[test]
    fn filter_selects_group() {
        let out = run_checks(&VerifyOptions { filter: Some("drift".into()), fault: None });
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|c| c.group == "drift"));
    }
}
