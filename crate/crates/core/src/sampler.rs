//! Ancestral DDPM and deterministic DDIM sampling with per-step clipping,
//! plus closed-form Gaussian oracle denoisers used for verification.

use ndarray::{ArrayD, NdFloat};
use num_traits::NumCast;

use crate::diffusion::{posterior_params, x_from_v};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    /// Clip applied to every intermediate x-hat. `None` disables clipping
    /// (used by the Gaussian-oracle diagnostics, which operate on
    /// unbounded data).
    pub clip: Option<(f64, f64)>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, steps: usize, seed: u64) -> Self {
        Self {
            kind,
            steps,
            clip: Some((-1.0, 1.0)),
            seed,
        }
    }
}

/// Descending time grid t_0 = 1 > ... > t_N = 0.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    pub ts: Vec<f64>,
}

pub fn make_time_grid(steps: usize) -> TimeGrid {
    assert!(steps >= 1, "need at least one step");
    let ts = (0..=steps)
        .map(|i| (steps - i) as f64 / steps as f64)
        .collect();
    TimeGrid { ts }
}

/// A denoiser evaluated during sampling. The model output is interpreted
/// as a v prediction. `step` identifies the sampling step so stochastic
/// oracles can key their draws deterministically; trained models ignore it.
pub trait Denoiser<F: NdFloat> {
    fn predict_v(
        &self,
        z: &ArrayD<F>,
        t: f64,
        condition: Option<&ArrayD<F>>,
        step: usize,
    ) -> Result<ArrayD<F>>;
}

fn cast<F: NdFloat>(x: f64) -> F {
    <F as NumCast>::from(x).expect("f64 -> float cast")
}

/// Deterministic DDIM update z_s = alpha_s x + (sigma_s/sigma_t)(z_t - alpha_t x).
pub fn ddim_step<F: NdFloat>(
    z_t: &ArrayD<F>,
    x_hat: &ArrayD<F>,
    s: f64,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<F>> {
    if !(s < t) {
        return Err(Error::BadTimeOrder { s, t });
    }
    let (a_s, s_s) = schedule.alpha_sigma(s)?;
    let (a_t, s_t) = schedule.alpha_sigma(t)?;
    let ratio = s_s / s_t;
    Ok(x_hat.mapv(|v| v * cast::<F>(a_s))
        + (z_t - &x_hat.mapv(|v| v * cast::<F>(a_t))).mapv(|v| v * cast::<F>(ratio)))
}

/// Ancestral step z_s = posterior_mean + posterior_std * noise.
pub fn ddpm_step<F: NdFloat>(
    z_t: &ArrayD<F>,
    x_hat: &ArrayD<F>,
    s: f64,
    t: f64,
    schedule: &NoiseSchedule,
    noise: &ArrayD<F>,
) -> Result<ArrayD<F>> {
    if s == 0.0 {
        // posterior variance vanishes at s = 0
        return Ok(x_hat.clone());
    }
    let p = posterior_params(z_t, x_hat, s, t, schedule)?;
    let std = p.var.sqrt();
    Ok(p.mean + noise.mapv(|v| v * cast::<F>(std)))
}

/// Run the full sampling loop. The initial latent is drawn from N(0, I)
/// with the configured seed; the returned tensor is the clipped x-hat of
/// the final step.
pub fn sample<F: NdFloat>(
    model: &dyn Denoiser<F>,
    condition: Option<&ArrayD<F>>,
    shape: &[usize],
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<F>> {
    let grid = make_time_grid(cfg.steps);
    let mut z = rng::standard_normal(&mut rng::stream(cfg.seed, 0, 0), shape)
        .mapv(|v| cast::<F>(v));
    let mut x_hat = z.clone();
    for i in 0..cfg.steps {
        let t = grid.ts[i];
        let s = grid.ts[i + 1];
        let v_hat = model.predict_v(&z, t, condition, i)?;
        x_hat = x_from_v(&z, &v_hat, t, schedule)?;
        if let Some((lo, hi)) = cfg.clip {
            x_hat.mapv_inplace(|v| v.max(cast::<F>(lo)).min(cast::<F>(hi)));
        }
        if x_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample { step: i });
        }
        if s == 0.0 {
            break;
        }
        z = match cfg.kind {
            SamplerKind::Ddim => ddim_step(&z, &x_hat, s, t, schedule)?,
            SamplerKind::Ddpm => {
                let noise =
                    rng::standard_normal(&mut rng::stream(cfg.seed, (i + 1) as u64, 1), shape)
                        .mapv(|v| cast::<F>(v));
                ddpm_step(&z, &x_hat, s, t, schedule, &noise)?
            }
        };
    }
    Ok(x_hat)
}

/// Closed-form denoiser for elementwise Gaussian data N(mu0, diag(var0)):
/// x-hat(z, t) is the exact posterior mean, emitted as the equivalent v.
#[derive(Debug, Clone)]
pub struct GaussianOracleDenoiser<F> {
    pub mu0: ArrayD<F>,
    pub var0: ArrayD<F>,
}

impl<F: NdFloat> GaussianOracleDenoiser<F> {
    pub fn new(mu0: ArrayD<F>, var0: ArrayD<F>) -> Result<Self> {
        if mu0.shape() != var0.shape() {
            return Err(Error::ShapeMismatch {
                expected: mu0.shape().to_vec(),
                got: var0.shape().to_vec(),
            });
        }
        if var0.iter().any(|v| *v < F::zero()) {
            return Err(Error::InvalidArgument("var0 must be non-negative".into()));
        }
        Ok(Self { mu0, var0 })
    }

    pub fn posterior_mean(&self, z: &ArrayD<F>, t: f64, schedule: &NoiseSchedule) -> Result<ArrayD<F>> {
        let (a, s) = schedule.alpha_sigma(t)?;
        let (a, s2) = (cast::<F>(a), cast::<F>(s * s));
        let num = &self.var0.mapv(|v| v * a) * z + self.mu0.mapv(|v| v * s2);
        let den = self.var0.mapv(|v| v * a * a + s2);
        Ok(num / den)
    }

    /// Posterior variance of x given z_t, elementwise.
    pub fn posterior_var(&self, t: f64, schedule: &NoiseSchedule) -> Result<ArrayD<F>> {
        let (a, s) = schedule.alpha_sigma(t)?;
        let (a, s2) = (cast::<F>(a), cast::<F>(s * s));
        Ok(self.var0.mapv(|v| v * s2 / (v * a * a + s2)))
    }
}

fn v_from_x<F: NdFloat>(
    z: &ArrayD<F>,
    x: &ArrayD<F>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<F>> {
    // invert x = alpha z - sigma v
    let (a, s) = schedule.alpha_sigma(t)?;
    Ok((z.mapv(|v| v * cast::<F>(a)) - x).mapv(|v| v / cast::<F>(s)))
}

/// The oracle needs the schedule to convert between x and v; bind it here.
pub struct OracleWithSchedule<'a, F> {
    pub oracle: &'a GaussianOracleDenoiser<F>,
    pub schedule: NoiseSchedule,
}

impl<F: NdFloat> Denoiser<F> for OracleWithSchedule<'_, F> {
    fn predict_v(
        &self,
        z: &ArrayD<F>,
        t: f64,
        _condition: Option<&ArrayD<F>>,
        _step: usize,
    ) -> Result<ArrayD<F>> {
        let x_hat = self.oracle.posterior_mean(z, t, &self.schedule)?;
        v_from_x(z, &x_hat, t, &self.schedule)
    }
}

/// Stochastic variant: draws x-hat from the exact Gaussian posterior
/// p(x | z_t) instead of returning its mean. With this oracle the ancestral
/// DDPM chain is exact at any step count; the deterministic mean oracle is
/// provably undervariant for coarse grids.
pub struct PosteriorSamplingOracle<'a, F> {
    pub oracle: &'a GaussianOracleDenoiser<F>,
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

impl<F: NdFloat> Denoiser<F> for PosteriorSamplingOracle<'_, F> {
    fn predict_v(
        &self,
        z: &ArrayD<F>,
        t: f64,
        _condition: Option<&ArrayD<F>>,
        step: usize,
    ) -> Result<ArrayD<F>> {
        let mean = self.oracle.posterior_mean(z, t, &self.schedule)?;
        let var = self.oracle.posterior_var(t, &self.schedule)?;
        let xi = rng::standard_normal(&mut rng::stream(self.seed, step as u64, 2), z.shape())
            .mapv(|v| cast::<F>(v));
        let x_hat = mean + var.mapv(|v| v.sqrt()) * xi;
        v_from_x(z, &x_hat, t, &self.schedule)
    }
}

/// Oracle that always predicts a fixed clean target x*.
pub struct FixedTargetDenoiser<F> {
    pub x_star: ArrayD<F>,
    pub schedule: NoiseSchedule,
}

impl<F: NdFloat> Denoiser<F> for FixedTargetDenoiser<F> {
    fn predict_v(
        &self,
        z: &ArrayD<F>,
        t: f64,
        _condition: Option<&ArrayD<F>>,
        _step: usize,
    ) -> Result<ArrayD<F>> {
        v_from_x(z, &self.x_star, t, &self.schedule)
    }
}

/// Measured end-to-end linear scale of DDIM with the unit-Gaussian mean
/// oracle: the output is `scale * z_init` elementwise; we report the ratio.
pub fn ddim_oracle_scale(steps: usize, schedule: &NoiseSchedule) -> Result<f64> {
    let dim = 4;
    let oracle = GaussianOracleDenoiser::new(
        ArrayD::<f64>::zeros(vec![dim]),
        ArrayD::<f64>::ones(vec![dim]),
    )?;
    let model = OracleWithSchedule {
        oracle: &oracle,
        schedule: *schedule,
    };
    let cfg = SamplerConfig {
        kind: SamplerKind::Ddim,
        steps,
        clip: None,
        seed: 42,
    };
    let out = sample(&model, None, &[dim], &cfg, schedule)?;
    let z0 = rng::standard_normal(&mut rng::stream(cfg.seed, 0, 0), &[dim]);
    Ok(out[[0]] / z0[[0]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::ArrayD;

    fn cos() -> NoiseSchedule {
        NoiseSchedule::cosine()
    }

    fn scalar(v: f64) -> ArrayD<f64> {
        ArrayD::from_elem(vec![1], v)
    }

    #[test]
    fn time_grid() {
        assert_eq!(make_time_grid(1).ts, vec![1.0, 0.0]);
        assert_eq!(make_time_grid(4).ts, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        let g = make_time_grid(1000);
        assert_eq!(g.ts.len(), 1001);
        assert_abs_diff_eq!(g.ts[1] - g.ts[2], 0.001, epsilon = 1e-15);
        assert_eq!(g.ts[0], 1.0);
        assert_eq!(g.ts[1000], 0.0);
    }

    #[test]
    fn ddim_scalar_oracle() {
        // z_t=1, x_hat=1, t=0.5, s=0.25
        let z = ddim_step(&scalar(1.0), &scalar(1.0), 0.25, 0.5, &cos()).unwrap();
        assert_abs_diff_eq!(z[[0]], 1.0823922002923938, epsilon = 1e-9);
        // x_hat = 0 reduces to pure rescale
        let z = ddim_step(&scalar(2.0), &scalar(0.0), 0.25, 0.5, &cos()).unwrap();
        let (_, s_s) = cos().alpha_sigma(0.25).unwrap();
        let (_, s_t) = cos().alpha_sigma(0.5).unwrap();
        assert_abs_diff_eq!(z[[0]], 2.0 * s_s / s_t, epsilon = 1e-12);
        assert!(ddim_step(&scalar(1.0), &scalar(1.0), 0.5, 0.5, &cos()).is_err());
    }

    #[test]
    fn ddim_true_x_consistency() {
        // with x_hat equal to the true x, z_s = alpha_s x + sigma_s eps
        let (x, eps) = (0.3, -0.8);
        let t = 0.6;
        let s = 0.2;
        let (a_t, s_t) = cos().alpha_sigma(t).unwrap();
        let (a_s, s_s) = cos().alpha_sigma(s).unwrap();
        let z_t = scalar(a_t * x + s_t * eps);
        let z_s = ddim_step(&z_t, &scalar(x), s, t, &cos()).unwrap();
        assert_abs_diff_eq!(z_s[[0]], a_s * x + s_s * eps, epsilon = 1e-12);
    }

    #[test]
    fn ddpm_step_cases() {
        // s=0 returns x_hat exactly
        let z = ddpm_step(&scalar(1.0), &scalar(0.4), 0.0, 0.5, &cos(), &scalar(9.0)).unwrap();
        assert_eq!(z[[0]], 0.4);
        // noise=0 returns the posterior mean
        let z = ddpm_step(&scalar(1.0), &scalar(1.0), 0.25, 0.5, &cos(), &scalar(0.0)).unwrap();
        assert_abs_diff_eq!(z[[0]], 0.9895376293141622, epsilon = 1e-7);
        // variance over draws matches the posterior variance
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let n = 20_000;
        let mut r = crate::rng::stream(5, 0, 0);
        for _ in 0..n {
            let noise = crate::rng::standard_normal(&mut r, &[1]);
            let z = ddpm_step(&scalar(1.0), &scalar(1.0), 0.25, 0.5, &cos(), &noise).unwrap();
            sum += z[[0]];
            sumsq += z[[0]] * z[[0]];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let want = 0.12132034355964261;
        assert!((var - want).abs() <= 4.0 * want * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn gaussian_oracle_cases() {
        let sch = cos();
        // var0 = 0 -> x_hat = mu0 always
        let o = GaussianOracleDenoiser::new(scalar(0.7), scalar(0.0)).unwrap();
        let xh = o.posterior_mean(&scalar(3.0), 0.4, &sch).unwrap();
        assert_abs_diff_eq!(xh[[0]], 0.7, epsilon = 1e-12);
        // mu0=0, var0=1 -> x_hat = alpha z
        let o = GaussianOracleDenoiser::new(scalar(0.0), scalar(1.0)).unwrap();
        let (a, _) = sch.alpha_sigma(0.3).unwrap();
        let xh = o.posterior_mean(&scalar(2.0), 0.3, &sch).unwrap();
        assert_abs_diff_eq!(xh[[0]], 2.0 * a, epsilon = 1e-12);
        // scalar oracle: mu0=1, var0=0.25, alpha=sigma=sqrt(1/2), z=1
        let o = GaussianOracleDenoiser::new(scalar(1.0), scalar(0.25)).unwrap();
        let xh = o.posterior_mean(&scalar(1.0), 0.5, &sch).unwrap();
        assert_abs_diff_eq!(xh[[0]], 1.0828427124746192, epsilon = 1e-9);
        assert!(GaussianOracleDenoiser::new(scalar(0.0), scalar(-1.0)).is_err());
    }

    #[test]
    fn perfect_prediction_fixed_point() {
        let sch = cos();
        let x_star = ArrayD::from_shape_vec(vec![4], vec![0.5, -0.25, 0.0, 0.9]).unwrap();
        for kind in [SamplerKind::Ddim, SamplerKind::Ddpm] {
            for steps in [1, 4, 16] {
                let model = FixedTargetDenoiser {
                    x_star: x_star.clone(),
                    schedule: sch,
                };
                let cfg = SamplerConfig::new(kind, steps, 7);
                let out = sample(&model, None, &[4], &cfg, &sch).unwrap();
                for (a, b) in out.iter().zip(x_star.iter()) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn ddim_deterministic() {
        let sch = cos();
        let oracle = GaussianOracleDenoiser::<f64>::new(
            ArrayD::zeros(vec![8]),
            ArrayD::ones(vec![8]),
        )
        .unwrap();
        let model = OracleWithSchedule {
            oracle: &oracle,
            schedule: sch,
        };
        let cfg = SamplerConfig {
            kind: SamplerKind::Ddim,
            steps: 16,
            clip: None,
            seed: 123,
        };
        let a = sample(&model, None, &[8], &cfg, &sch).unwrap();
        let b = sample(&model, None, &[8], &cfg, &sch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ddim_scale_law() {
        // wide lambda clamp so the endpoint clamp error stays below 1e-9
        let sch = NoiseSchedule::cosine().with_lambda_clamp(-80.0, 80.0).unwrap();
        let mut gaps = Vec::new();
        for steps in [4usize, 16, 64, 256] {
            let measured = ddim_oracle_scale(steps, &sch).unwrap();
            let expected = (std::f64::consts::PI / (2.0 * steps as f64))
                .cos()
                .powi(steps as i32);
            assert!(
                (measured - expected).abs() <= 1e-9,
                "N={steps}: {measured} vs {expected}"
            );
            gaps.push(1.0 - measured);
        }
        assert_abs_diff_eq!(gaps[0], 1.0 - 0.7285533905932737, epsilon = 1e-9);
        // 1 - scale = Theta(1/N): successive ratios near 4 within 10%
        for w in gaps.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 4.0).abs() / 4.0 <= 0.10, "ratio {ratio}");
        }
    }

    #[test]
    fn clipping_applies() {
        let sch = cos();
        let x_star = ArrayD::from_elem(vec![4], 5.0);
        let model = FixedTargetDenoiser {
            x_star,
            schedule: sch,
        };
        let cfg = SamplerConfig::new(SamplerKind::Ddim, 8, 3);
        let out = sample(&model, None, &[4], &cfg, &sch).unwrap();
        assert!(out.iter().all(|v| *v <= 1.0));
    }
}
