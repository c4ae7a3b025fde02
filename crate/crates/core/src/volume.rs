//! 3D volume pipeline: intensity windowing, transverse slice filtering,
//! slice-wise translation through the sampler, and paired-volume evaluation.
//!
//! Volumes are stored (x, y, z); transverse slices are taken along the last
//! axis. Each slice translation is seeded independently from the base seed
//! and the slice index, so the order of slice processing never matters.

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, FeatureExtractor, MetricReport};
use crate::rng;
use crate::sampler::{self, Denoiser, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::spline;

pub const DEFAULT_WINDOW: (f64, f64) = (-50.0, 350.0);
pub const DEFAULT_WORK_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum IntensityMeta {
    /// Raw scanner intensities (e.g. Hounsfield units), unclipped.
    RawHu,
    /// Clipped to the given window, in original units.
    Windowed(f64, f64),
    /// Affinely mapped from a window to [-1, 1].
    Normalized(f64, f64),
}

#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Array3<f64>,
    /// voxel spacing (dx, dy, dz) in mm
    pub spacing: (f64, f64, f64),
    pub intensity_meta: IntensityMeta,
}

impl Volume {
    pub fn new(data: Array3<f64>, spacing: (f64, f64, f64), meta: IntensityMeta) -> Result<Self> {
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data"));
        }
        Ok(Volume {
            data,
            spacing,
            intensity_meta: meta,
        })
    }

    pub fn n_slices(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    pub fn slice(&self, k: usize) -> Array2<f64> {
        self.data.index_axis(Axis(2), k).to_owned()
    }
}

/// Clip to [low, high] and map affinely to [-1, 1].
pub fn window_and_scale(v: &Volume, low: f64, high: f64) -> Result<Volume> {
    if low >= high {
        return Err(Error::InvalidArgument(format!(
            "window low {low} must be below high {high}"
        )));
    }
    let half = (high - low) / 2.0;
    let mid = (high + low) / 2.0;
    let data = v.data.mapv(|x| (x.clamp(low, high) - mid) / half);
    Ok(Volume {
        data,
        spacing: v.spacing,
        intensity_meta: IntensityMeta::Normalized(low, high),
    })
}

/// Inverse of `window_and_scale`: map [-1, 1] back to [low, high].
pub fn unscale(v: &Volume, low: f64, high: f64) -> Result<Volume> {
    if low >= high {
        return Err(Error::InvalidArgument(format!(
            "window low {low} must be below high {high}"
        )));
    }
    let half = (high - low) / 2.0;
    let mid = (high + low) / 2.0;
    let data = v.data.mapv(|x| x * half + mid);
    Ok(Volume {
        data,
        spacing: v.spacing,
        intensity_meta: IntensityMeta::Windowed(low, high),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SlicePairFilter {
    pub min_foreground_pixels: usize,
    /// minimum foreground intersection-over-union in [0, 1]
    pub min_overlap: f64,
}

impl Default for SlicePairFilter {
    fn default() -> Self {
        SlicePairFilter {
            min_foreground_pixels: 200,
            min_overlap: 0.25,
        }
    }
}

fn foreground_mask(slice: &ndarray::ArrayView2<f64>) -> Vec<bool> {
    let min = slice.iter().cloned().fold(f64::INFINITY, f64::min);
    slice.iter().map(|v| *v > min).collect()
}

/// Keep mask per transverse slice: both slices need enough foreground
/// (pixels strictly above the slice minimum) and sufficient overlap.
pub fn filter_slices(source: &Volume, target: &Volume, f: &SlicePairFilter) -> Result<Vec<bool>> {
    if source.data.shape() != target.data.shape() {
        return Err(Error::ShapeMismatch {
            expected: source.data.shape().to_vec(),
            got: target.data.shape().to_vec(),
        });
    }
    let mut keep = Vec::with_capacity(source.n_slices());
    for k in 0..source.n_slices() {
        let ms = foreground_mask(&source.data.index_axis(Axis(2), k));
        let mt = foreground_mask(&target.data.index_axis(Axis(2), k));
        let ns = ms.iter().filter(|b| **b).count();
        let nt = mt.iter().filter(|b| **b).count();
        let inter = ms.iter().zip(&mt).filter(|(a, b)| **a && **b).count();
        let union = ms.iter().zip(&mt).filter(|(a, b)| **a || **b).count();
        let iou = if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        };
        keep.push(ns >= f.min_foreground_pixels && nt >= f.min_foreground_pixels && iou >= f.min_overlap);
    }
    Ok(keep)
}

/// Slice-wise translation: resample each transverse slice to
/// `work_size x work_size`, sample the model with the slice as condition,
/// resample back, and map [-1, 1] to the target window. Each slice draws
/// from its own seed, derived from the configured seed and the slice index.
pub fn translate_volume(
    model: &dyn Denoiser<f32>,
    source: &Volume,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    work_size: usize,
    window: (f64, f64),
) -> Result<Volume> {
    if work_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "work_size must be >= 2, got {work_size}"
        )));
    }
    let (nx, ny, nz) = source.data.dim();
    let mut out = Array3::zeros((nx, ny, nz));
    for k in 0..nz {
        let translated = translate_slice(model, &source.slice(k), cfg, schedule, work_size, k)
            .map_err(|e| Error::SliceFailure {
                slice: k,
                source: Box::new(e),
            })?;
        out.index_axis_mut(Axis(2), k).assign(&translated);
    }
    let half = (window.1 - window.0) / 2.0;
    let mid = (window.1 + window.0) / 2.0;
    out.mapv_inplace(|v| v * half + mid);
    Ok(Volume {
        data: out,
        spacing: source.spacing,
        intensity_meta: IntensityMeta::Windowed(window.0, window.1),
    })
}

fn translate_slice(
    model: &dyn Denoiser<f32>,
    slice: &Array2<f64>,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    work_size: usize,
    slice_index: usize,
) -> Result<Array2<f64>> {
    let (h, w) = slice.dim();
    let work = spline::resample_slice(slice, work_size, work_size)?;
    let cond_vec: Vec<f32> = work.iter().map(|v| *v as f32).collect();
    let cond = ArrayD::from_shape_vec(IxDyn(&[1, 1, work_size, work_size]), cond_vec)
        .expect("shape/product mismatch");
    let mut slice_cfg = *cfg;
    slice_cfg.seed = rng::derive_seed(cfg.seed, slice_index as u64);
    let sampled = sampler::sample(
        model,
        Some(&cond),
        &[1, 1, work_size, work_size],
        &slice_cfg,
        schedule,
    )?;
    let back = Array2::from_shape_fn((work_size, work_size), |(r, c)| {
        sampled[[0, 0, r, c]] as f64
    });
    spline::resample_slice(&back, h, w)
}

/// Paired-volume evaluation on the clipped window: MSE/MAE/PSNR with
/// data_range = window width, 3D SSIM, and slice-wise Frechet distance
/// (Gaussian fits over per-slice features of each volume).
pub fn evaluate_volumes(
    pred: &Volume,
    target: &Volume,
    extractor: &FeatureExtractor,
    window: (f64, f64),
) -> Result<MetricReport> {
    if pred.data.shape() != target.data.shape() {
        return Err(Error::ShapeMismatch {
            expected: pred.data.shape().to_vec(),
            got: target.data.shape().to_vec(),
        });
    }
    let (low, high) = window;
    let range = high - low;
    let a = pred.data.mapv(|v| v.clamp(low, high)).into_dyn();
    let b = target.data.mapv(|v| v.clamp(low, high)).into_dyn();
    let mse = metrics::mse(&a, &b)?;
    let mae = metrics::mae(&a, &b)?;
    let psnr = metrics::psnr(&a, &b, range)?;
    let ssim = metrics::ssim(&a, &b, range)?;

    let a3 = a.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let b3 = b.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let n = a3.len_of(Axis(2));
    let pred_slices: Vec<Array2<f64>> = (0..n).map(|k| a3.index_axis(Axis(2), k).to_owned()).collect();
    let tgt_slices: Vec<Array2<f64>> = (0..n).map(|k| b3.index_axis(Axis(2), k).to_owned()).collect();
    let fd = slice_fd(&pred_slices, &tgt_slices, extractor)?;

    Ok(MetricReport {
        mse,
        mae,
        psnr,
        ssim,
        fd,
        eval_range: window,
        n_items: n,
    })
}

/// Frechet distance between Gaussian fits of per-slice features. Returns
/// None when there are too few slices for a covariance estimate.
pub fn slice_fd(
    pred_slices: &[Array2<f64>],
    target_slices: &[Array2<f64>],
    extractor: &FeatureExtractor,
) -> Result<Option<f64>> {
    if pred_slices.len() < 2 || target_slices.len() < 2 {
        return Ok(None);
    }
    let fp = metrics::extract_features(pred_slices, extractor)?;
    let ft = metrics::extract_features(target_slices, extractor)?;
    let gp = metrics::fit_gaussian_stats(&fp)?;
    let gt = metrics::fit_gaussian_stats(&ft)?;
    Ok(Some(metrics::frechet_distance(&gp, &gt)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::SamplerKind;

    fn vol_from_fn(
        dims: (usize, usize, usize),
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Volume {
        let data = Array3::from_shape_fn(dims, |(x, y, z)| f(x, y, z));
        Volume::new(data, (1.0, 1.0, 1.0), IntensityMeta::RawHu).unwrap()
    }

    #[test]
    fn window_endpoints_and_midpoint() {
        let v = vol_from_fn((3, 1, 1), |x, _, _| [-50.0, 150.0, 350.0][x]);
        let w = window_and_scale(&v, -50.0, 350.0).unwrap();
        assert_eq!(w.data[[0, 0, 0]], -1.0);
        assert_eq!(w.data[[1, 0, 0]], 0.0);
        assert_eq!(w.data[[2, 0, 0]], 1.0);
        assert_eq!(w.intensity_meta, IntensityMeta::Normalized(-50.0, 350.0));
    }

    #[test]
    fn window_round_trip_is_clip() {
        let v = vol_from_fn((8, 8, 2), |x, y, z| (x * 16 + y * 2 + z) as f64 * 8.0 - 200.0);
        let w = window_and_scale(&v, -50.0, 350.0).unwrap();
        let back = unscale(&w, -50.0, 350.0).unwrap();
        for (orig, got) in v.data.iter().zip(back.data.iter()) {
            assert!((orig.clamp(-50.0, 350.0) - got).abs() <= 1e-6);
        }
        // idempotence: windowing the unscaled volume again changes nothing
        let w2 = window_and_scale(&back, -50.0, 350.0).unwrap();
        for (a, b) in w.data.iter().zip(w2.data.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn bad_window_rejected() {
        let v = vol_from_fn((2, 2, 1), |_, _, _| 0.0);
        assert!(window_and_scale(&v, 350.0, -50.0).is_err());
    }

    #[test]
    fn filter_drops_background_and_disjoint() {
        // slice 0: all background; slice 1: dense identical foreground;
        // slice 2: disjoint halves (IoU = 0)
        let n = 32; // 32*32 = 1024 pixels, half = 512 >= 200
        let src = vol_from_fn((n, n, 3), |x, _, z| match z {
            0 => 0.0,
            1 => {
                if x == 0 {
                    0.0
                } else {
                    1.0
                }
            }
            _ => {
                if x < n / 2 {
                    1.0
                } else {
                    0.0
                }
            }
        });
        let tgt = vol_from_fn((n, n, 3), |x, _, z| match z {
            0 => 0.0,
            1 => {
                if x == 0 {
                    0.0
                } else {
                    2.0
                }
            }
            _ => {
                if x >= n / 2 {
                    1.0
                } else {
                    0.0
                }
            }
        });
        let keep = filter_slices(&src, &tgt, &SlicePairFilter::default()).unwrap();
        assert_eq!(keep, vec![false, true, false]);
    }

    #[test]
    fn filter_known_iou_threshold() {
        // overlap of exactly 1/3: A = left 2/4 columns, B = middle 2/4; IoU = 1/3
        let n = 40;
        let src = vol_from_fn((n, n, 1), |x, _, _| if x < n / 2 { 1.0 } else { 0.0 });
        let tgt = vol_from_fn((n, n, 1), |x, _, _| {
            if (n / 4..3 * n / 4).contains(&x) {
                1.0
            } else {
                0.0
            }
        });
        let mut f = SlicePairFilter {
            min_foreground_pixels: 10,
            min_overlap: 0.30,
        };
        assert_eq!(filter_slices(&src, &tgt, &f).unwrap(), vec![true]);
        f.min_overlap = 0.40;
        assert_eq!(filter_slices(&src, &tgt, &f).unwrap(), vec![false]);
    }

    /// Oracle that returns the v consistent with x-hat = condition.
    struct IdentityOracle {
        schedule: NoiseSchedule,
    }

    impl Denoiser<f32> for IdentityOracle {
        fn predict_v(
            &self,
            z: &ArrayD<f32>,
            t: f64,
            condition: Option<&ArrayD<f32>>,
            _step: usize,
        ) -> crate::error::Result<ArrayD<f32>> {
            let x = condition.unwrap();
            // v = (alpha z - x) / sigma from x = alpha z - sigma v
            let (a, s) = self.schedule.alpha_sigma(t)?;
            Ok((z.mapv(|v| v * a as f32) - x).mapv(|v| v / s as f32))
        }
    }

    fn smooth_phantom(n: usize, nz: usize) -> Volume {
        vol_from_fn((n, n, nz), |x, y, z| {
            let fx = x as f64 / (n - 1) as f64;
            let fy = y as f64 / (n - 1) as f64;
            let fz = (z as f64 + 1.0) / nz as f64;
            0.8 * (std::f64::consts::PI * fx).sin() * (std::f64::consts::PI * fy).sin() * fz
        })
    }

    #[test]
    fn identity_oracle_translation_matches_window_mapping() {
        let schedule = NoiseSchedule::cosine();
        let model = IdentityOracle {
            schedule: schedule.clone(),
        };
        let src = smooth_phantom(24, 2);
        let cfg = SamplerConfig::new(SamplerKind::Ddim, 4, 7);
        let out = translate_volume(&model, &src, &cfg, &schedule, 32, DEFAULT_WINDOW).unwrap();
        assert_eq!(out.intensity_meta, IntensityMeta::Windowed(-50.0, 350.0));
        // direct window mapping of the source
        let direct = unscale(&src, -50.0, 350.0).unwrap();
        let mse = metrics::mse(&out.data.clone().into_dyn(), &direct.data.clone().into_dyn()).unwrap();
        let psnr = 10.0 * (400.0f64 * 400.0 / mse).log10();
        assert!(psnr > 35.0, "psnr {psnr}");
    }

    #[test]
    fn translation_deterministic_and_single_slice() {
        let schedule = NoiseSchedule::cosine();
        let model = IdentityOracle {
            schedule: schedule.clone(),
        };
        let src = smooth_phantom(16, 1);
        let cfg = SamplerConfig::new(SamplerKind::Ddpm, 3, 11);
        let a = translate_volume(&model, &src, &cfg, &schedule, 16, DEFAULT_WINDOW).unwrap();
        let b = translate_volume(&model, &src, &cfg, &schedule, 16, DEFAULT_WINDOW).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.n_slices(), 1);
    }

    #[test]
    fn evaluate_identical_and_offset() {
        let v = smooth_phantom(16, 4);
        let hu = unscale(&v, -50.0, 350.0).unwrap();
        let ex = FeatureExtractor::DownsampleFlatten;
        let r = evaluate_volumes(&hu, &hu, &ex, DEFAULT_WINDOW).unwrap();
        assert_eq!(r.mse, 0.0);
        assert!((r.ssim - 1.0).abs() <= 1e-12);
        assert_eq!(r.fd.map(|f| f.abs() <= 1e-8), Some(true));
        assert_eq!(r.eval_range, (-50.0, 350.0));
        assert_eq!(r.n_items, 4);

        let shifted = Volume {
            data: hu.data.mapv(|x| (x + 10.0).min(350.0)),
            spacing: hu.spacing,
            intensity_meta: hu.intensity_meta,
        };
        // keep values clear of the clip limits for exact arithmetic
        let lo = Volume {
            data: hu.data.mapv(|x| x.clamp(0.0, 300.0)),
            spacing: hu.spacing,
            intensity_meta: hu.intensity_meta,
        };
        let lo_shift = Volume {
            data: lo.data.mapv(|x| x + 10.0),
            spacing: hu.spacing,
            intensity_meta: hu.intensity_meta,
        };
        let r2 = evaluate_volumes(&lo_shift, &lo, &ex, DEFAULT_WINDOW).unwrap();
        assert!((r2.mse - 100.0).abs() <= 1e-9, "mse {}", r2.mse);
        assert!((r2.mae - 10.0).abs() <= 1e-9);
        let _ = shifted;
    }

    #[test]
    fn evaluate_shape_mismatch() {
        let a = smooth_phantom(8, 2);
        let b = smooth_phantom(8, 3);
        assert!(evaluate_volumes(&a, &b, &FeatureExtractor::DownsampleFlatten, DEFAULT_WINDOW).is_err());
    }
}
