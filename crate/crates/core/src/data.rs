//! Synthetic datasets, PPM pixel ingestion and the flat tensor file.
//!
//! # Tensor file layout
//!
//! Little-endian throughout:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "SQTF"
//!      4     4  u32 format version (1)
//!      8     4  u32 dtype tag (1 = f64)
//!     12     8  u64 rows N
//!     20     8  u64 cols D (> 0)
//!     28  8·N·D f64 payload, row-major
//! ```

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::linalg::{dot, Matrix};
use crate::rng;
use crate::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"SQTF";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F64: u32 = 1;
const TENSOR_HEADER_LEN: usize = 28;

pub fn encode_tensor(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(TENSOR_HEADER_LEN + 8 * m.as_slice().len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Parses a tensor file image; `path` only labels errors.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < TENSOR_HEADER_LEN {
        return Err(Error::parse(
            path,
            bytes.len() as u64,
            format!("truncated header: expected {TENSOR_HEADER_LEN} bytes, got {}", bytes.len()),
        ));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::parse(path, 0, "bad magic, not a tensor file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != TENSOR_VERSION {
        return Err(Error::parse(path, 4, format!("unsupported tensor version {version}")));
    }
    let dtype = u32_at(8);
    if dtype != DTYPE_F64 {
        return Err(Error::parse(path, 8, format!("unsupported dtype tag {dtype}")));
    }
    let (rows, cols) = (u64_at(12), u64_at(20));
    if cols == 0 {
        return Err(Error::parse(path, 20, "column count must be positive"));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::parse(path, 12, "shape overflows"))?;
    let actual = (bytes.len() - TENSOR_HEADER_LEN) as u64;
    if actual != expected {
        return Err(Error::parse(
            path,
            TENSOR_HEADER_LEN as u64,
            format!("payload size mismatch: expected {expected} bytes for {rows}x{cols}, found {actual}"),
        ));
    }
    let data = bytes[TENSOR_HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows as usize, cols as usize, data)
}

pub fn save_tensor(path: &Path, m: &Matrix) -> Result<()> {
    std::fs::write(path, encode_tensor(m)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Matrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Maps an 8-bit channel value to [−1, 1].
#[inline]
pub fn byte_to_pixel(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Inverse of [`byte_to_pixel`], rounding and clamping to [0, 255].
#[inline]
pub fn pixel_to_byte(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Binary P6 image with 8-bit channels.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::DimensionMismatch { expected: width * height * 3, actual: rgb.len() });
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

/// Parses a P6 image into a (W·H)×3 matrix of pixels scaled to [−1, 1].
pub fn decode_ppm_pixels(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::parse(path, 0, "bad magic, expected binary PPM (P6)"));
    }
    let mut pos = 2;
    let mut field = |name: &str| -> Result<(u64, usize)> {
        // whitespace and comments before each header field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, start as u64, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        let value = text
            .parse::<u64>()
            .map_err(|_| Error::parse(path, start as u64, format!("{name} out of range")))?;
        Ok((value, start))
    };
    let (width, w_at) = field("width")?;
    let (height, _) = field("height")?;
    let (maxval, m_at) = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::parse(path, w_at as u64, "image dimensions must be positive"));
    }
    if maxval != 255 {
        return Err(Error::parse(path, m_at as u64, format!("unsupported maxval {maxval} (only 255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    let header_end = m_at + maxval.to_string().len();
    match bytes.get(header_end) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(Error::parse(path, header_end as u64, "missing whitespace after maxval")),
    }
    let data_start = header_end + 1;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::parse(path, w_at as u64, "image dimensions overflow"))?;
    let actual = (bytes.len() - data_start) as u64;
    if actual < expected {
        return Err(Error::parse(
            path,
            data_start as u64,
            format!("truncated raster: expected {expected} bytes, found {actual}"),
        ));
    }
    let raster = &bytes[data_start..data_start + expected as usize];
    let data = raster.iter().map(|&b| byte_to_pixel(b)).collect();
    Matrix::from_vec((width * height) as usize, 3, data)
}

pub fn load_ppm_pixels(path: &Path) -> Result<Matrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm_pixels(&bytes, path)
}

/// Loads a sample matrix from a tensor file, a P6 image (one row per pixel),
/// or a directory of `.ppm` images whose pixels are stacked in file-name order.
pub fn load_samples(path: &Path) -> Result<Matrix> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::InvalidArgument(format!("{}: no .ppm files", path.display())));
        }
        let mut all = Matrix::zeros(0, 3);
        for f in files {
            for row in load_ppm_pixels(&f)?.row_iter() {
                all.push_row(row)?;
            }
        }
        return Ok(all);
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        decode_ppm_pixels(&bytes, path)
    } else {
        decode_tensor(&bytes, path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticKind {
    Gaussian { mean: Vec<f64>, covariance: Matrix },
    GaussianMixture(Vec<MixtureComponent>),
    /// Two interleaved half-circles tilted out of the plane, plus isotropic noise.
    TwoMoons3d { noise: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
}

struct Sampler {
    weight: f64,
    mean: Vec<f64>,
    chol: Matrix,
}

fn sampler(weight: f64, mean: &[f64], cov: &Matrix) -> Result<Sampler> {
    if cov.rows() != mean.len() || cov.cols() != mean.len() {
        return Err(Error::DimensionMismatch { expected: mean.len(), actual: cov.rows() });
    }
    if !cov.is_symmetric(1e-12) {
        return Err(Error::NotPositiveDefinite);
    }
    if !(weight.is_finite() && weight > 0.0) {
        return Err(Error::InvalidArgument(format!("mixture weight must be positive, got {weight}")));
    }
    Ok(Sampler { weight, mean: mean.to_vec(), chol: cov.cholesky()? })
}

/// Draws `spec.n` rows. Per Gaussian row: one uniform (mixtures only) then
/// D normals; moons draw one uniform, one fair bit and three normals.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<Matrix> {
    let mut r = rng::stream(seed, 0);
    match &spec.kind {
        SyntheticKind::Gaussian { mean, covariance } => {
            let s = sampler(1.0, mean, covariance)?;
            draw_mixture(&[s], spec.n, &mut r)
        }
        SyntheticKind::GaussianMixture(components) => {
            if components.is_empty() {
                return Err(Error::InvalidArgument("mixture needs at least one component".into()));
            }
            let d = components[0].mean.len();
            let samplers = components
                .iter()
                .map(|c| {
                    if c.mean.len() != d {
                        return Err(Error::DimensionMismatch { expected: d, actual: c.mean.len() });
                    }
                    sampler(c.weight, &c.mean, &c.covariance)
                })
                .collect::<Result<Vec<_>>>()?;
            draw_mixture(&samplers, spec.n, &mut r)
        }
        SyntheticKind::TwoMoons3d { noise } => {
            if !(noise.is_finite() && *noise >= 0.0) {
                return Err(Error::InvalidArgument(format!("noise must be non-negative, got {noise}")));
            }
            let mut m = Matrix::zeros(spec.n, 3);
            for i in 0..spec.n {
                let theta = r.random_range(0.0..std::f64::consts::PI);
                let upper: bool = r.random();
                let (x, y, z) = if upper {
                    (theta.cos(), theta.sin(), 0.5 * theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin(), -0.5 * theta.sin())
                };
                let row = m.row_mut(i);
                row[0] = 0.5 * (x - 0.5) + noise * rng::normal(&mut r);
                row[1] = 0.5 * (y - 0.25) + noise * rng::normal(&mut r);
                row[2] = 0.5 * z + noise * rng::normal(&mut r);
            }
            Ok(m)
        }
    }
}

fn draw_mixture<R: Rng + ?Sized>(components: &[Sampler], n: usize, r: &mut R) -> Result<Matrix> {
    let d = components[0].mean.len();
    let total: f64 = components.iter().map(|c| c.weight).sum();
    let mut m = Matrix::zeros(n, d);
    let mut z = vec![0.0; d];
    for i in 0..n {
        let c = if components.len() == 1 {
            &components[0]
        } else {
            let mut u = r.random::<f64>() * total;
            let mut pick = components.last().unwrap();
            for c in components {
                if u < c.weight {
                    pick = c;
                    break;
                }
                u -= c.weight;
            }
            pick
        };
        rng::fill_normal(r, &mut z);
        let row = m.row_mut(i);
        for (k, out) in row.iter_mut().enumerate() {
            *out = c.mean[k] + dot(&c.chol.row(k)[..=k], &z[..=k]);
        }
    }
    Ok(m)
}

/// Planted top principal axis of [`toy_mixture`]: (1, 1, 1)/√3.
pub fn toy_mixture_axis() -> [f64; 3] {
    let c = 1.0 / 3f64.sqrt();
    [c, c, c]
}

/// Default 3-D sweep dataset: four anisotropic components at ±0.8u and
/// ±0.35w (u the planted axis, w ⟂ u), each with covariance 0.01·I + 0.02·uuᵀ.
/// The population covariance is 0.01·I + 0.34·uuᵀ + 0.06125·wwᵀ, so its top
/// eigenvector is exactly u.
pub fn toy_mixture(n: usize) -> SyntheticSpec {
    let u = toy_mixture_axis();
    let w = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
    let mut cov = Matrix::zeros(3, 3);
    for i in 0..3 {
        for j in 0..3 {
            cov[(i, j)] = 0.02 * u[i] * u[j] + if i == j { 0.01 } else { 0.0 };
        }
    }
    let comp = |axis: [f64; 3], scale: f64| MixtureComponent {
        weight: 1.0,
        mean: axis.iter().map(|a| a * scale).collect(),
        covariance: cov.clone(),
    };
    SyntheticSpec {
        kind: SyntheticKind::GaussianMixture(vec![comp(u, 0.8), comp(u, -0.8), comp(w, 0.35), comp(w, -0.35)]),
        n,
    }
}
