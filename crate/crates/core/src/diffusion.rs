//! Forward/transition/posterior Gaussian algebra and the x/eps/v
//! prediction conversions, plus loss weightings including Min-SNR.
//!
//! All scalar schedule arithmetic is done in f64; tensor arithmetic is
//! generic over the element type.

use ndarray::{ArrayD, NdFloat};
use num_traits::NumCast;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Noisy state `z` at diffusion time `t`.
#[derive(Debug, Clone)]
pub struct DiffusionState<F> {
    pub z: ArrayD<F>,
    pub t: f64,
}

/// The (x, eps, v) target algebra at a fixed (z_t, t).
#[derive(Debug, Clone)]
pub struct PredictionTriple<F> {
    pub x: ArrayD<F>,
    pub eps: ArrayD<F>,
    pub v: ArrayD<F>,
}

/// Parameters of the forward transition q(z_t | z_s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionParams {
    pub alpha_ts: f64,
    pub sigma_ts_sq: f64,
}

/// Parameters of the denoising posterior q(z_s | z_t, x).
#[derive(Debug, Clone)]
pub struct PosteriorParams<F> {
    pub mean: ArrayD<F>,
    pub var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionTarget {
    V,
    Eps,
    X,
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeightConfig {
    pub target: PredictionTarget,
    /// Min-SNR gamma.
    pub gamma: f64,
    pub enabled: bool,
}

impl Default for LossWeightConfig {
    fn default() -> Self {
        Self {
            target: PredictionTarget::V,
            gamma: 5.0,
            enabled: true,
        }
    }
}

fn cast<F: NdFloat>(x: f64) -> F {
    <F as NumCast>::from(x).expect("f64 -> float cast")
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

/// z_t = alpha(t) x + sigma(t) eps.
pub fn forward_marginal<F: NdFloat>(
    x: &ArrayD<F>,
    t: f64,
    eps: &ArrayD<F>,
    schedule: &NoiseSchedule,
) -> Result<DiffusionState<F>> {
    check_shapes(x, eps)?;
    let (a, s) = schedule.alpha_sigma(t)?;
    let z = x.mapv(|v| v * cast::<F>(a)) + eps.mapv(|v| v * cast::<F>(s));
    Ok(DiffusionState { z, t })
}

/// alpha_ts = alpha_t / alpha_s, sigma_ts^2 = sigma_t^2 - alpha_ts^2 sigma_s^2.
pub fn transition_params(s: f64, t: f64, schedule: &NoiseSchedule) -> Result<TransitionParams> {
    if !(s < t) {
        return Err(Error::BadTimeOrder { s, t });
    }
    let (a_s, s_s) = schedule.alpha_sigma(s)?;
    let (a_t, s_t) = schedule.alpha_sigma(t)?;
    let alpha_ts = a_t / a_s;
    // tiny negatives from rounding are clamped at zero
    let sigma_ts_sq = (s_t * s_t - alpha_ts * alpha_ts * s_s * s_s).max(0.0);
    Ok(TransitionParams {
        alpha_ts,
        sigma_ts_sq,
    })
}

/// Posterior mean/variance of q(z_s | z_t, x).
pub fn posterior_params<F: NdFloat>(
    z: &ArrayD<F>,
    x_hat: &ArrayD<F>,
    s: f64,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<PosteriorParams<F>> {
    check_shapes(z, x_hat)?;
    let tr = transition_params(s, t, schedule)?;
    let (a_s, s_s) = schedule.alpha_sigma(s)?;
    let (_, s_t) = schedule.alpha_sigma(t)?;
    let st2 = s_t * s_t;
    let cz = tr.alpha_ts * s_s * s_s / st2;
    let cx = a_s * tr.sigma_ts_sq / st2;
    let mean = z.mapv(|v| v * cast::<F>(cz)) + x_hat.mapv(|v| v * cast::<F>(cx));
    let var = (tr.sigma_ts_sq * s_s * s_s / st2).max(0.0);
    Ok(PosteriorParams { mean, var })
}

/// v = alpha eps - sigma x.
pub fn to_v<F: NdFloat>(
    x: &ArrayD<F>,
    eps: &ArrayD<F>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<F>> {
    check_shapes(x, eps)?;
    let (a, s) = schedule.alpha_sigma(t)?;
    Ok(eps.mapv(|v| v * cast::<F>(a)) - x.mapv(|v| v * cast::<F>(s)))
}

/// x = alpha z - sigma v.
pub fn x_from_v<F: NdFloat>(
    z: &ArrayD<F>,
    v: &ArrayD<F>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<F>> {
    check_shapes(z, v)?;
    let (a, s) = schedule.alpha_sigma(t)?;
    Ok(z.mapv(|w| w * cast::<F>(a)) - v.mapv(|w| w * cast::<F>(s)))
}

/// x = (z - sigma eps) / alpha.
pub fn x_from_eps<F: NdFloat>(
    z: &ArrayD<F>,
    eps: &ArrayD<F>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<F>> {
    check_shapes(z, eps)?;
    let (a, s) = schedule.alpha_sigma(t)?;
    Ok((z - &eps.mapv(|w| w * cast::<F>(s))).mapv(|w| w / cast::<F>(a)))
}

/// eps = (z - alpha x) / sigma.
pub fn eps_from_x<F: NdFloat>(
    z: &ArrayD<F>,
    x: &ArrayD<F>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<F>> {
    check_shapes(z, x)?;
    let (a, s) = schedule.alpha_sigma(t)?;
    Ok((z - &x.mapv(|w| w * cast::<F>(a))).mapv(|w| w / cast::<F>(s)))
}

/// Build the full (x, eps, v) triple at time t.
pub fn prediction_triple<F: NdFloat>(
    x: &ArrayD<F>,
    eps: &ArrayD<F>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<PredictionTriple<F>> {
    Ok(PredictionTriple {
        x: x.clone(),
        eps: eps.clone(),
        v: to_v(x, eps, t, schedule)?,
    })
}

/// Loss weight at time t.
///
/// With Min-SNR enabled the v-target weight is `min(SNR, gamma) / (SNR + 1)`.
/// The documented variants for the other targets follow the same clamped-SNR
/// construction divided by that target's implicit weighting: eps-prediction
/// carries an implicit `SNR` weight and x-prediction a weight of one.
pub fn loss_weight(cfg: &LossWeightConfig, t: f64, schedule: &NoiseSchedule) -> Result<f64> {
    if !cfg.enabled {
        return Ok(1.0);
    }
    let snr = schedule.snr(t)?;
    let clamped = snr.min(cfg.gamma);
    Ok(match cfg.target {
        PredictionTarget::V => clamped / (snr + 1.0),
        PredictionTarget::Eps => clamped / snr,
        PredictionTarget::X => clamped,
    })
}
