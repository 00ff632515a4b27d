use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use sqdm_core::data::{
    byte_to_pixel, decode_ppm_pixels, decode_tensor, encode_ppm, encode_tensor, generate, load_samples, pixel_to_byte,
    save_tensor, toy_mixture, toy_mixture_axis,
};
use sqdm_core::squeeze::estimate_principal_direction;
use sqdm_core::{rng, Error, Matrix};
use std::path::Path;

fn oracle_top(data: &Matrix) -> (DVector<f64>, f64) {
    let x = DMatrix::from_row_slice(data.rows(), data.cols(), data.as_slice());
    let mean = x.row_mean();
    let c = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mean[j]);
    let eig = SymmetricEigen::new(c.transpose() * &c);
    let top = eig.eigenvalues.imax();
    (eig.eigenvectors.column(top).into_owned(), eig.eigenvalues[top] / eig.eigenvalues.sum())
}

#[test]
fn pca_agrees_with_eigendecomposition_in_several_dimensions() {
    for (seed, d) in [(1u64, 2usize), (2, 3), (3, 5), (4, 8)] {
        let mut r = rng::stream(seed, 0);
        let mix = DMatrix::from_fn(d, d, |_, _| rng::normal(&mut r));
        let n = 5000;
        let z = DMatrix::from_fn(n, d, |_, j| rng::normal(&mut r) * (1.0 + 2.0 * (j == 0) as u8 as f64));
        let x = z * mix.transpose();
        let data = Matrix::from_vec(n, d, x.transpose().as_slice().to_vec()).unwrap();
        let est = estimate_principal_direction(&data).unwrap();
        let (top, evr) = oracle_top(&data);
        let cos = top.dot(&DVector::from_column_slice(est.v())).abs();
        assert!(1.0 - cos < 1e-9, "d={d}: cos {cos}");
        assert!((est.explained_variance_ratio() - evr).abs() < 1e-9);
        assert!(est.v().iter().find(|x| x.abs() > 1e-12).unwrap() > &0.0);
    }
}

#[test]
fn toy_mixture_has_its_planted_axis() {
    let data = generate(&toy_mixture(50_000), 9).unwrap();
    let est = estimate_principal_direction(&data).unwrap();
    let u = toy_mixture_axis();
    let cos: f64 = est.v().iter().zip(u).map(|(a, b)| a * b).sum();
    assert!(cos > 0.999, "{cos}");
}

#[test]
fn pca_rejects_degenerate_inputs() {
    assert!(matches!(
        estimate_principal_direction(&Matrix::from_vec(10, 3, vec![7.0; 30]).unwrap()),
        Err(Error::ZeroVariance)
    ));
    assert!(estimate_principal_direction(&Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).is_err());
}

proptest! {
    #[test]
    fn tensor_round_trip(rows in 1usize..20, cols in 1usize..6, seed in 0u64..100) {
        let mut r = rng::stream(seed, 0);
        let m = Matrix::from_vec(rows, cols, rng::normal_vec(&mut r, rows * cols)).unwrap();
        let back = decode_tensor(&encode_tensor(&m), Path::new("mem")).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn truncated_tensors_are_rejected(cut in 1usize..40) {
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_tensor(&m);
        let cut = cut.min(bytes.len());
        prop_assert!(decode_tensor(&bytes[..bytes.len() - cut], Path::new("mem")).is_err());
    }

    #[test]
    fn ppm_round_trip(w in 1usize..6, h in 1usize..6, seed in 0u64..100) {
        let rgb: Vec<u8> = (0..w * h * 3).map(|i| ((i as u64 * 2654435761 + seed) % 256) as u8).collect();
        let bytes = encode_ppm(w, h, &rgb).unwrap();
        let px = decode_ppm_pixels(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(px.rows(), w * h);
        prop_assert_eq!(px.cols(), 3);
        let back: Vec<u8> = px.as_slice().iter().map(|&x| pixel_to_byte(x)).collect();
        prop_assert_eq!(back, rgb);
    }
}

#[test]
fn pixel_scaling_is_symmetric() {
    assert_eq!(byte_to_pixel(0), -1.0);
    assert_eq!(byte_to_pixel(255), 1.0);
    for b in 0..=255u8 {
        assert_eq!(pixel_to_byte(byte_to_pixel(b)), b);
    }
}

#[test]
fn load_samples_dispatches_on_content() {
    let dir = tempfile::tempdir().unwrap();
    let m = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let tensor = dir.path().join("m.sqt");
    save_tensor(&tensor, &m).unwrap();
    assert_eq!(load_samples(&tensor).unwrap(), m);

    let imgs = dir.path().join("imgs");
    std::fs::create_dir(&imgs).unwrap();
    std::fs::write(imgs.join("a.ppm"), encode_ppm(2, 1, &[0, 128, 255, 10, 20, 30]).unwrap()).unwrap();
    std::fs::write(imgs.join("b.ppm"), encode_ppm(1, 1, &[1, 2, 3]).unwrap()).unwrap();
    std::fs::write(imgs.join("notes.txt"), b"ignored").unwrap();
    let px = load_samples(&imgs).unwrap();
    assert_eq!((px.rows(), px.cols()), (3, 3));
    assert!(matches!(load_samples(&dir.path().join("missing")), Err(Error::Io { .. })));
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"nonsense").unwrap();
    assert!(matches!(load_samples(&junk), Err(Error::Parse { .. })));
}
