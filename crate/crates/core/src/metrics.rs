//! Sample-quality metrics for comparing generated and real point clouds.
//!
//! Sliced Wasserstein-2 stands in for FID at toy scale (no feature network),
//! and precision/recall follow the k-NN manifold construction: a point is
//! covered if it lies inside any k-NN ball of the other set. All distances
//! are Euclidean in raw sample space.

use rand::Rng;

use crate::linalg::{dot, mean_and_covariance, Matrix};
use crate::rng;
use crate::squeeze::PrincipalDirection;
use crate::{Error, Result};

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub k: usize,
}

/// Harmonic mean 2PR/(P+R), defined as 0 when P + R = 0.
pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Random unit directions for sliced metrics; draws `count · dim` normals.
pub fn random_directions<R: Rng + ?Sized>(dim: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let mut v = rng::normal_vec(rng, dim);
            let n = dot(&v, &v).sqrt();
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
                break v;
            }
        })
        .collect()
}

/// Sliced Wasserstein-2 distance between the rows of `a` and `b` over
/// `num_projections` random directions.
pub fn sliced_wasserstein2<R: Rng + ?Sized>(a: &Matrix, b: &Matrix, num_projections: usize, rng: &mut R) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch { expected: a.cols(), actual: b.cols() });
    }
    let dirs = random_directions(a.cols(), num_projections, rng);
    sliced_wasserstein2_with(a, b, &dirs)
}

/// Sliced Wasserstein-2 over caller-supplied unit directions.
pub fn sliced_wasserstein2_with(a: &Matrix, b: &Matrix, directions: &[Vec<f64>]) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::InvalidArgument("sliced Wasserstein needs nonempty sample sets".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch { expected: a.cols(), actual: b.cols() });
    }
    if directions.is_empty() {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    let mut total = 0.0;
    for dir in directions {
        if dir.len() != a.cols() {
            return Err(Error::DimensionMismatch { expected: a.cols(), actual: dir.len() });
        }
        let mut pa: Vec<f64> = a.row_iter().map(|r| dot(r, dir)).collect();
        let mut pb: Vec<f64> = b.row_iter().map(|r| dot(r, dir)).collect();
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        total += wasserstein2_sq_sorted(&pa, &pb);
    }
    Ok((total / directions.len() as f64).sqrt())
}

/// Squared W2 between two sorted 1-D empirical samples.
///
/// Equal sizes match order statistics directly. Otherwise both quantile
/// functions are evaluated at the midpoints of max(N, M) equal-mass cells,
/// linearly interpolating between order statistics.
pub fn wasserstein2_sq_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    }
    let m = a.len().max(b.len());
    (0..m)
        .map(|k| {
            let q = (k as f64 + 0.5) / m as f64;
            let d = quantile(a, q) - quantile(b, q);
            d * d
        })
        .sum::<f64>()
        / m as f64
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (q * sorted.len() as f64 - 0.5).clamp(0.0, (sorted.len() - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each row to its k-th nearest other row.
pub fn knn_radii_sq(points: &Matrix, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k >= points.rows() {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..{}", points.rows())));
    }
    let n = points.rows();
    let mut dists = vec![0.0; n - 1];
    Ok((0..n)
        .map(|i| {
            let pi = points.row(i);
            let mut c = 0;
            for j in 0..n {
                if j != i {
                    dists[c] = sq_dist(pi, points.row(j));
                    c += 1;
                }
            }
            *dists.select_nth_unstable_by(k - 1, f64::total_cmp).1
        })
        .collect())
}

// fraction of `queries` inside at least one ball (center, radius²)
fn coverage(centers: &Matrix, radii_sq: &[f64], queries: &Matrix) -> f64 {
    let covered = queries
        .row_iter()
        .filter(|q| centers.row_iter().zip(radii_sq).any(|(c, &r)| sq_dist(q, c) <= r))
        .count();
    covered as f64 / queries.rows() as f64
}

/// k-NN precision (generated points inside the real manifold) and recall
/// (real points inside the generated manifold).
pub fn precision_recall_knn(real: &Matrix, gen: &Matrix, k: usize) -> Result<PrPoint> {
    if real.cols() != gen.cols() {
        return Err(Error::DimensionMismatch { expected: real.cols(), actual: gen.cols() });
    }
    let real_r = knn_radii_sq(real, k)?;
    let gen_r = knn_radii_sq(gen, k)?;
    let precision = coverage(real, &real_r, gen);
    let recall = coverage(gen, &gen_r, real);
    Ok(PrPoint { precision, recall, f_score: f_score(precision, recall), k })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceDiagnostic {
    pub var_parallel: f64,
    /// Mean variance over the n − 1 directions orthogonal to v̂ (0 when n = 1).
    pub var_perp: f64,
    /// n×n covariance pooled over feature groups.
    pub group_covariance: Matrix,
}

/// Empirical covariance of the feature groups of `samples` (N×D, D a multiple
/// of n), each column mean-centered, pooled across groups and projected on v̂.
pub fn covariance_diagnostic(samples: &Matrix, direction: &PrincipalDirection) -> Result<CovarianceDiagnostic> {
    let n = direction.dim();
    let d = samples.cols();
    if d == 0 || !d.is_multiple_of(n) {
        return Err(Error::DimensionMismatch { expected: n, actual: d });
    }
    if samples.rows() < 2 {
        return Err(Error::InvalidArgument("covariance needs at least 2 samples".into()));
    }
    let (_, full) = mean_and_covariance(samples);
    let groups = d / n;
    let mut cov = Matrix::zeros(n, n);
    for g in 0..groups {
        for i in 0..n {
            for j in 0..n {
                cov[(i, j)] += full[(g * n + i, g * n + j)] / groups as f64;
            }
        }
    }
    let v = direction.v();
    let cv = cov.matvec(v)?;
    let var_parallel = dot(v, &cv);
    let var_perp = if n > 1 { (cov.trace() - var_parallel) / (n - 1) as f64 } else { 0.0 };
    Ok(CovarianceDiagnostic { var_parallel, var_perp, group_covariance: cov })
}
