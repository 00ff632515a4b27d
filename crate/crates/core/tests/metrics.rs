use proptest::prelude::*;
use rand::Rng;
use sqdm_core::metrics::{
    f_score, knn_radii_sq, precision_recall_knn, random_directions, sliced_wasserstein2_with, wasserstein2_sq_sorted,
};
use sqdm_core::{rng, Matrix};

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// brute force: a point is covered if it falls inside some other set's k-NN ball
fn coverage(from: &Matrix, balls: &Matrix, k: usize) -> f64 {
    let radii: Vec<f64> = (0..balls.rows())
        .map(|i| {
            let mut d: Vec<f64> = (0..balls.rows()).filter(|&j| j != i).map(|j| d2(balls.row(i), balls.row(j))).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect();
    let hits = from
        .row_iter()
        .filter(|p| (0..balls.rows()).any(|j| d2(p, balls.row(j)) <= radii[j]))
        .count();
    hits as f64 / from.rows() as f64
}

fn cloud<R: Rng>(r: &mut R, n: usize, d: usize, shift: f64, scale: f64) -> Matrix {
    Matrix::from_vec(n, d, rng::normal_vec(r, n * d).iter().map(|z| shift + scale * z).collect()).unwrap()
}

#[test]
fn precision_recall_matches_brute_force() {
    let mut r = rng::stream(1, 0);
    for (k, shift, scale) in [(1, 0.0, 1.0), (3, 0.5, 1.2), (5, 1.5, 0.6), (3, 0.0, 3.0)] {
        let real = cloud(&mut r, 150, 3, 0.0, 1.0);
        let gen = cloud(&mut r, 120, 3, shift, scale);
        let got = precision_recall_knn(&real, &gen, k).unwrap();
        assert_eq!(got.precision, coverage(&gen, &real, k));
        assert_eq!(got.recall, coverage(&real, &gen, k));
        assert_eq!(got.k, k);
        assert_eq!(got.f_score, f_score(got.precision, got.recall));
    }
}

#[test]
fn knn_radii_need_enough_points() {
    let m = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]).unwrap();
    assert_eq!(knn_radii_sq(&m, 1).unwrap(), vec![1.0, 1.0, 4.0]);
    assert_eq!(knn_radii_sq(&m, 2).unwrap(), vec![4.0, 5.0, 5.0]);
    assert!(knn_radii_sq(&m, 3).is_err());
    assert!(knn_radii_sq(&m, 0).is_err());
}

#[test]
fn sliced_w2_detects_pure_translation() {
    // shifting by m gives W2² = (θ·m)² on every slice
    let mut r = rng::stream(2, 0);
    let a = cloud(&mut r, 400, 2, 0.0, 1.0);
    let b = Matrix::from_vec(400, 2, a.as_slice().chunks(2).flat_map(|p| [p[0] + 0.3, p[1] - 0.4]).collect()).unwrap();
    let dirs = random_directions(2, 20, &mut r);
    let want = (dirs.iter().map(|d| (0.3 * d[0] - 0.4 * d[1]).powi(2)).sum::<f64>() / 20.0).sqrt();
    let got = sliced_wasserstein2_with(&a, &b, &dirs).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn unequal_sizes_interpolate_quantiles() {
    // two samples of the same uniform grid at different resolutions are close
    let a: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
    let b: Vec<f64> = (0..37).map(|i| (i as f64 + 0.5) / 37.0).collect();
    assert!(wasserstein2_sq_sorted(&a, &b) < 1e-4);
    assert_eq!(wasserstein2_sq_sorted(&a, &a), 0.0);
    let shifted: Vec<f64> = b.iter().map(|x| x + 1.0).collect();
    assert!((wasserstein2_sq_sorted(&a, &shifted) - 1.0).abs() < 1e-2);
}

#[test]
fn empty_or_mismatched_inputs_are_rejected() {
    let a = Matrix::zeros(5, 2);
    assert!(sliced_wasserstein2_with(&a, &Matrix::zeros(5, 3), &[vec![1.0, 0.0]]).is_err());
    assert!(sliced_wasserstein2_with(&a, &Matrix::zeros(0, 2), &[vec![1.0, 0.0]]).is_err());
    assert!(sliced_wasserstein2_with(&a, &a, &[]).is_err());
    assert!(precision_recall_knn(&a, &Matrix::zeros(5, 3), 1).is_err());
}

proptest! {
    #[test]
    fn metrics_ignore_row_order(seed in 0u64..1000, swaps in prop::collection::vec((0usize..60, 0usize..60), 1..30)) {
        let mut r = rng::stream(seed, 0);
        let a = cloud(&mut r, 60, 3, 0.0, 1.0);
        let b = cloud(&mut r, 60, 3, 0.2, 1.1);
        let mut rows: Vec<usize> = (0..60).collect();
        for (i, j) in swaps {
            rows.swap(i, j);
        }
        let bp = b.select_rows(&rows);
        let dirs = random_directions(3, 8, &mut r);
        prop_assert_eq!(sliced_wasserstein2_with(&a, &b, &dirs).unwrap(), sliced_wasserstein2_with(&a, &bp, &dirs).unwrap());
        prop_assert_eq!(precision_recall_knn(&a, &b, 3).unwrap(), precision_recall_knn(&a, &bp, 3).unwrap());
    }

    #[test]
    fn sliced_w2_is_symmetric(seed in 0u64..1000) {
        let mut r = rng::stream(seed, 1);
        let a = cloud(&mut r, 30, 2, 0.0, 1.0);
        let b = cloud(&mut r, 45, 2, 1.0, 0.5);
        let dirs = random_directions(2, 5, &mut r);
        let ab = sliced_wasserstein2_with(&a, &b, &dirs).unwrap();
        let ba = sliced_wasserstein2_with(&b, &a, &dirs).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
    }
}

#[test]
fn f_score_is_a_harmonic_mean() {
    let mut r = rng::stream(3, 0);
    for _ in 0..1000 {
        let (p, q): (f64, f64) = (r.random(), r.random());
        let f = f_score(p, q);
        assert!(f >= p.min(q) - 1e-15 && f <= p.max(q) + 1e-15);
        assert_eq!(f, f_score(q, p));
        assert!((1.0 / f - 0.5 * (1.0 / p + 1.0 / q)).abs() < 1e-9 * (1.0 / f));
    }
    assert_eq!(f_score(0.0, 0.0), 0.0);
    assert_eq!(f_score(1.0, 1.0), 1.0);
}
