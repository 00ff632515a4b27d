//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use sqdm_core::denoiser::NoisePredictor;
use sqdm_core::{rng, Matrix, NoiseSchedule, Variant};

/// Dense squeeze matrix straight from its definition.
pub fn squeeze_dense(variant: Variant, s: f64, v: &[f64]) -> DMatrix<f64> {
    let n = v.len();
    let v = DVector::from_column_slice(v);
    let p = &v * v.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    match variant {
        Variant::Sdm => &eye + &p * ((-s).exp() - 1.0),
        Variant::Hdm => &p * (-s).exp() + (&eye - &p) * (s / (n as f64 - 1.0)).exp(),
    }
}

pub fn to_dense(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Dense matrix whose columns are `f(e_j)`.
pub fn columns_of(n: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = f(&e);
        for i in 0..n {
            out[(i, j)] = col[i];
        }
    }
    out
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

pub fn random_unit<R: Rng + ?Sized>(n: usize, r: &mut R) -> Vec<f64> {
    let v = rng::normal_vec(r, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut v: Vec<f64> = v.iter().map(|x| x / norm).collect();
    if v[0] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

pub fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

// Plain isotropic DDPM, written from the textbook update rules.

pub fn ddpm_forward<R: Rng + ?Sized>(s: &NoiseSchedule, x: &[f64], t: usize, r: &mut R) -> Vec<f64> {
    let eps = rng::normal_vec(r, x.len());
    let (a, b) = (s.alpha(t).sqrt(), s.beta(t).sqrt());
    x.iter().zip(&eps).map(|(x, e)| a * x + b * e).collect()
}

pub fn ddpm_marginal<R: Rng + ?Sized>(s: &NoiseSchedule, x0: &[f64], t: usize, r: &mut R) -> Vec<f64> {
    let eps = rng::normal_vec(r, x0.len());
    let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
    x0.iter().zip(&eps).map(|(x, e)| a * x + b * e).collect()
}

pub fn ddpm_reverse<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    s: &NoiseSchedule,
    model: &P,
    x: &[f64],
    t: usize,
    r: &mut R,
) -> Vec<f64> {
    let eps = model.predict(x, s.train_timestep(t), s.train_len()).unwrap();
    let coeff = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / s.alpha(t).sqrt();
    let mut out: Vec<f64> = x.iter().zip(&eps).map(|(x, e)| (x - coeff * e) * inv_sqrt_alpha).collect();
    if t > 1 {
        let sd = s.beta_tilde(t).sqrt();
        for o in out.iter_mut() {
            *o += sd * rng::normal(r);
        }
    }
    out
}

pub fn ddpm_sample<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    s: &NoiseSchedule,
    model: &P,
    num: usize,
    dim: usize,
    r: &mut R,
) -> Vec<Vec<f64>> {
    let mut states: Vec<Vec<f64>> = (0..num).map(|_| rng::normal_vec(r, dim)).collect();
    for t in (1..=s.len()).rev() {
        for x in states.iter_mut() {
            *x = ddpm_reverse(s, model, x, t, r);
        }
    }
    states
}
