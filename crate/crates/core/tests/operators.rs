use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use sqdm_core::schedule::build_linear_schedule;
use sqdm_core::{PrincipalDirection, SqueezeSpec, Variant};

fn dense(variant: Variant, s: f64, v: &[f64]) -> DMatrix<f64> {
    let n = v.len();
    let v = DVector::from_column_slice(v);
    let p = &v * v.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    match variant {
        Variant::Sdm => &eye + &p * ((-s).exp() - 1.0),
        Variant::Hdm => &p * (-s).exp() + (&eye - &p) * (s / (n as f64 - 1.0)).exp(),
    }
}

fn unit_and_vector() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=8).prop_flat_map(|n| {
        (
            prop::collection::vec(-1.0f64..1.0, n).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3)),
            prop::collection::vec(-10.0f64..10.0, n),
        )
    })
}

fn variant() -> impl Strategy<Value = Variant> {
    prop_oneof![Just(Variant::Sdm), Just(Variant::Hdm)]
}

proptest! {
    #[test]
    fn apply_matches_dense_definition((v, x) in unit_and_vector(), s in -3.0f64..3.0, var in variant()) {
        let spec = SqueezeSpec::new(var, s, PrincipalDirection::new(v).unwrap(), false).unwrap();
        let got = spec.apply(s, &x).unwrap();
        let want = dense(var, s, spec.direction().v()) * DVector::from_column_slice(&x);
        for (g, w) in got.iter().zip(want.iter()) {
            prop_assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn inverse_round_trips((v, x) in unit_and_vector(), s in -3.0f64..3.0, var in variant()) {
        let spec = SqueezeSpec::new(var, s, PrincipalDirection::new(v).unwrap(), false).unwrap();
        let y = spec.apply(s, &x).unwrap();
        let back = spec.apply_inverse(s, &y).unwrap();
        for (b, x) in back.iter().zip(&x) {
            prop_assert!((b - x).abs() <= 1e-11);
        }
    }

    #[test]
    fn hdm_preserves_volume((v, _) in unit_and_vector(), s in -3.0f64..3.0) {
        let spec = SqueezeSpec::new(Variant::Hdm, s, PrincipalDirection::new(v).unwrap(), false).unwrap();
        let m = spec.materialize_matrix(s).unwrap();
        let d = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice()).determinant();
        prop_assert!((d - 1.0).abs() < 1e-10);
    }

    #[test]
    fn operator_is_symmetric_with_expected_spectrum((v, _) in unit_and_vector(), s in -3.0f64..3.0, var in variant()) {
        let spec = SqueezeSpec::new(var, s, PrincipalDirection::new(v).unwrap(), false).unwrap();
        let m = spec.materialize_matrix(s).unwrap();
        prop_assert!(m.is_symmetric(1e-14));
        let (par, perp) = spec.eigenvalues(s);
        let along = spec.apply(s, spec.direction().v()).unwrap();
        for (a, vi) in along.iter().zip(spec.direction().v()) {
            prop_assert!((a - par * vi).abs() < 1e-12);
        }
        let eig = nalgebra::SymmetricEigen::new(DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice()));
        let n = m.rows();
        let near = |x: f64| eig.eigenvalues.iter().filter(|&&e| (e - x).abs() < 1e-10 * (1.0 + x)).count();
        if (par - perp).abs() > 1e-8 {
            prop_assert_eq!(near(par), 1);
            prop_assert_eq!(near(perp), n - 1);
        }
    }

    #[test]
    fn grouped_apply_acts_per_group((v, _) in unit_and_vector(), groups in 1usize..5, s in -2.0f64..2.0, var in variant()) {
        let spec = SqueezeSpec::new(var, s, PrincipalDirection::new(v).unwrap(), false).unwrap();
        let n = spec.dim();
        let x: Vec<f64> = (0..n * groups).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut y = x.clone();
        spec.apply_groups(s, &mut y).unwrap();
        for (chunk_in, chunk_out) in x.chunks(n).zip(y.chunks(n)) {
            prop_assert_eq!(spec.apply(s, chunk_in).unwrap(), chunk_out.to_vec());
        }
    }
}

#[test]
fn drift_deviation_matches_dense_spectral_norm() {
    let sched = build_linear_schedule(200, 1e-4, 0.02).unwrap();
    for var in [Variant::Sdm, Variant::Hdm] {
        for s0 in [-1.0, -0.4, 0.7] {
            let spec = SqueezeSpec::new(var, s0, PrincipalDirection::new(vec![0.2, -0.5, 1.0, 0.1]).unwrap(), true).unwrap();
            for t in [2, 3, 100, 200] {
                let s = |k: usize| dense(var, s0 * sched.beta(k) / 0.02, spec.direction().v());
                let r = s(t).try_inverse().unwrap() * s(t - 1) - DMatrix::<f64>::identity(4, 4);
                let want = r.singular_values().max();
                let got = spec.drift_deviation(&sched, t).unwrap();
                assert!((got - want).abs() < 1e-13, "{var} s0={s0} t={t}: {got} vs {want}");
                let f = spec.drift_factor(&sched, t).unwrap();
                assert_eq!(f.deviation, got);
            }
        }
    }
}

#[test]
fn strength_limits_are_enforced() {
    let v = || PrincipalDirection::new(vec![1.0, 0.0, 0.0]).unwrap();
    assert!(SqueezeSpec::new(Variant::Sdm, 5.0, v(), true).is_ok());
    assert!(SqueezeSpec::new(Variant::Sdm, 5.5, v(), true).is_err());
    assert!(SqueezeSpec::new(Variant::Hdm, 1.0, PrincipalDirection::new(vec![1.0]).unwrap(), true).is_err());
    assert!(SqueezeSpec::new(Variant::Sdm, f64::NAN, v(), true).is_err());
}
