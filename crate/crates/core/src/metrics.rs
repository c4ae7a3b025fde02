//! Image-quality and distributional metrics.
//!
//! MSE/MAE/PSNR, SSIM with a Gaussian window (2D and separable 3D), and the
//! Fréchet distance between Gaussian fits of feature vectors. Features come
//! from pluggable extractors: average-pool-and-flatten, a seeded Gaussian
//! random projection, or precomputed vectors loaded from an XFEA file.

use std::io::{Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Summary of a paired-image evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    /// dB; serialized as null when infinite (identical images).
    pub psnr: f64,
    pub ssim: f64,
    pub fd: Option<f64>,
    pub eval_range: (f64, f64),
    pub n_items: usize,
}

/// Gaussian fit over a set of feature vectors.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn check_shapes<F>(a: &ArrayD<F>, b: &ArrayD<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mse(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.len() as f64;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

pub fn mae(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.len() as f64;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// PSNR in dB; identical images map to `f64::INFINITY`.
pub fn psnr(a: &ArrayD<f64>, b: &ArrayD<f64>, data_range: f64) -> Result<f64> {
    if data_range <= 0.0 {
        return Err(Error::InvalidArgument("data_range must be > 0".into()));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window_n(n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    let c = (n / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

#[cfg(test)]
fn gaussian_window() -> Vec<f64> {
    gaussian_window_n(SSIM_WINDOW)
}

// valid-mode separable Gaussian filtering along one axis of a flat buffer
fn filter_axis(
    data: &[f64],
    shape: &[usize],
    axis: usize,
    win: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape[axis] = shape[axis] - win.len() + 1;
    let strides: Vec<usize> = {
        let mut s = vec![1; shape.len()];
        for i in (0..shape.len() - 1).rev() {
            s[i] = s[i + 1] * shape[i + 1];
        }
        s
    };
    let out_strides: Vec<usize> = {
        let mut s = vec![1; out_shape.len()];
        for i in (0..out_shape.len() - 1).rev() {
            s[i] = s[i + 1] * out_shape[i + 1];
        }
        s
    };
    let n_out: usize = out_shape.iter().product();
    let mut out = vec![0.0; n_out];
    let mut idx = vec![0usize; shape.len()];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        for (d, os) in out_strides.iter().enumerate() {
            idx[d] = rem / os;
            rem %= os;
        }
        let base: usize = idx
            .iter()
            .zip(strides.iter())
            .map(|(i, s)| i * s)
            .sum();
        let mut acc = 0.0;
        for (k, wv) in win.iter().enumerate() {
            acc += wv * data[base + k * strides[axis]];
        }
        *slot = acc;
    }
    (out, out_shape)
}

// per-axis window: the full 11 taps where the axis allows, otherwise the
// largest odd width that fits (keeps thin volumes evaluable)
fn axis_window_len(size: usize) -> usize {
    let n = size.min(SSIM_WINDOW);
    if n % 2 == 0 {
        n - 1
    } else {
        n
    }
}

fn gaussian_filter_valid(img: &ArrayD<f64>) -> (Vec<f64>, Vec<usize>) {
    let mut data: Vec<f64> = img.iter().copied().collect();
    let mut shape = img.shape().to_vec();
    for axis in 0..shape.len() {
        let win = gaussian_window_n(axis_window_len(shape[axis]));
        let (d, s) = filter_axis(&data, &shape, axis, &win);
        data = d;
        shape = s;
    }
    (data, shape)
}

/// SSIM with an 11-tap Gaussian window (sigma 1.5) over every spatial axis.
/// Works for 2D and 3D arrays; local statistics are computed at valid window
/// positions only and averaged.
pub fn ssim(a: &ArrayD<f64>, b: &ArrayD<f64>, data_range: f64) -> Result<f64> {
    check_shapes(a, b)?;
    let nd = a.ndim();
    if nd != 2 && nd != 3 {
        return Err(Error::InvalidArgument(format!("ssim expects 2D or 3D, got {nd}D")));
    }
    if a.shape().iter().any(|&s| s < 3) {
        return Err(Error::InvalidArgument(format!(
            "image {:?} too small for windowed statistics",
            a.shape()
        )));
    }
    if data_range <= 0.0 {
        return Err(Error::InvalidArgument("data_range must be > 0".into()));
    }
    let aa = a.mapv(|v| v * v);
    let bb = b.mapv(|v| v * v);
    let ab = a * b;
    let (mu_a, _) = gaussian_filter_valid(a);
    let (mu_b, _) = gaussian_filter_valid(b);
    let (m_aa, _) = gaussian_filter_valid(&aa);
    let (m_bb, _) = gaussian_filter_valid(&bb);
    let (m_ab, _) = gaussian_filter_valid(&ab);
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cab = m_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Sample mean and unbiased covariance of feature vectors, symmetrized.
pub fn fit_gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 feature vectors".into()));
    }
    let dim = features[0].len();
    for f in features {
        if f.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: vec![dim],
                got: vec![f.len()],
            });
        }
    }
    let n = features.len() as f64;
    let mut mean = DVector::zeros(dim);
    for f in features {
        for (m, v) in mean.iter_mut().zip(f.iter()) {
            *m += v;
        }
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for f in features {
        let d = DVector::from_iterator(dim, f.iter().copied()) - &mean;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov })
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians:
/// d^2 = |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}).
///
/// The cross term is evaluated through the congruent symmetric matrix
/// S1^{1/2} S2 S1^{1/2}, whose eigenvalues equal those of S1 S2, keeping the
/// computation in symmetric-eigen territory. Rounding-induced negative
/// eigenvalues are clamped at zero.
pub fn frechet_distance(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    if p.mean.len() != q.mean.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![p.mean.len()],
            got: vec![q.mean.len()],
        });
    }
    let diff = &p.mean - &q.mean;
    let s1_half = sym_sqrt(&p.cov);
    let inner = &s1_half * &q.cov * &s1_half;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = inner.symmetric_eigen();
    let tr_cross: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d2 = diff.norm_squared() + p.cov.trace() + q.cov.trace() - 2.0 * tr_cross;
    Ok(d2.max(0.0))
}

/// How to turn images into feature vectors for the Fréchet distance.
#[derive(Debug, Clone)]
pub enum FeatureExtractor {
    /// Average-pool each image to 8x8 and flatten (64 dims).
    DownsampleFlatten,
    /// Seeded Gaussian projection of the flattened image to `dim` dims,
    /// scaled by 1/sqrt(dim) so pairwise distances are preserved in
    /// expectation.
    RandomProjection { seed: u64, dim: usize },
    /// Precomputed vectors from an XFEA file (e.g. external network features).
    External(std::path::PathBuf),
}

const POOL: usize = 8;

fn downsample_flatten(img: &Array2<f64>) -> Vec<f64> {
    let (h, w) = img.dim();
    let mut sums = vec![0.0; POOL * POOL];
    let mut counts = vec![0usize; POOL * POOL];
    for r in 0..h {
        let br = r * POOL / h;
        for c in 0..w {
            let bc = c * POOL / w;
            sums[br * POOL + bc] += img[[r, c]];
            counts[br * POOL + bc] += 1;
        }
    }
    sums.iter()
        .zip(counts.iter())
        .map(|(s, n)| if *n > 0 { s / *n as f64 } else { 0.0 })
        .collect()
}

/// Extract one feature vector per image.
pub fn extract_features(images: &[Array2<f64>], extractor: &FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    if let Some(first) = images.first() {
        for img in images {
            if img.dim() != first.dim() {
                return Err(Error::ShapeMismatch {
                    expected: vec![first.dim().0, first.dim().1],
                    got: vec![img.dim().0, img.dim().1],
                });
            }
        }
    }
    match extractor {
        FeatureExtractor::DownsampleFlatten => Ok(images.iter().map(downsample_flatten).collect()),
        FeatureExtractor::RandomProjection { seed, dim } => {
            if *dim == 0 {
                return Err(Error::InvalidArgument("projection dim must be > 0".into()));
            }
            let Some(first) = images.first() else {
                return Ok(Vec::new());
            };
            let npix = first.len();
            let proj = crate::rng::standard_normal(&mut crate::rng::stream(*seed, 0, 0), &[*dim, npix]);
            let scale = 1.0 / (*dim as f64).sqrt();
            Ok(images
                .iter()
                .map(|img| {
                    let flat: Vec<f64> = img.iter().copied().collect();
                    (0..*dim)
                        .map(|j| {
                            let mut acc = 0.0;
                            for (k, v) in flat.iter().enumerate() {
                                acc += proj[[j, k]] * v;
                            }
                            acc * scale
                        })
                        .collect()
                })
                .collect())
        }
        FeatureExtractor::External(path) => read_xfea(path),
    }
}

const XFEA_MAGIC: &[u8; 4] = b"XFEA";
const XFEA_VERSION: u32 = 1;

/// Read a feature file: magic "XFEA", version, count, dim (u32 LE), then
/// count*dim little-endian f32 values.
pub fn read_xfea(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|_| Error::CorruptFeatureFile("truncated header".into()))?;
    if &magic != XFEA_MAGIC {
        return Err(Error::MagicMismatch);
    }
    let version = f.read_u32::<LittleEndian>().map_err(|_| Error::CorruptFeatureFile("truncated header".into()))?;
    if version != XFEA_VERSION {
        return Err(Error::CorruptFeatureFile("unsupported version".into()));
    }
    let count = f.read_u32::<LittleEndian>().map_err(|_| Error::CorruptFeatureFile("truncated header".into()))? as usize;
    let dim = f.read_u32::<LittleEndian>().map_err(|_| Error::CorruptFeatureFile("truncated header".into()))? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            v.push(f.read_f32::<LittleEndian>().map_err(|_| Error::CorruptFeatureFile("truncated data".into()))? as f64);
        }
        out.push(v);
    }
    Ok(out)
}

pub fn write_xfea(path: &Path, features: &[Vec<f64>]) -> Result<()> {
    let dim = features.first().map_or(0, |f| f.len());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(XFEA_MAGIC)?;
    f.write_u32::<LittleEndian>(XFEA_VERSION)?;
    f.write_u32::<LittleEndian>(features.len() as u32)?;
    f.write_u32::<LittleEndian>(dim as u32)?;
    for feat in features {
        for v in feat {
            f.write_f32::<LittleEndian>(*v as f32)?;
        }
    }
    Ok(())
}
