//! Continuous-time noise schedules.
//!
//! A schedule is a log-SNR function `lambda(t)` on `t in [0, 1]`. Under the
//! variance-preserving constraint the signal/noise scales follow from
//! `alpha^2 = sigmoid(lambda)` and `sigma^2 = sigmoid(-lambda)`, so
//! `alpha^2 + sigma^2 = 1` holds for every schedule by construction.

use crate::error::{Error, Result};

/// Default log-SNR clamp. The cosine schedule diverges at the endpoints;
/// clamping keeps alpha and sigma strictly inside (0, 1) in floating point.
pub const DEFAULT_LAMBDA_CLAMP: (f64, f64) = (-20.0, 20.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    Cosine,
    /// Cosine shifted by `2 ln(d / 256)` for a reference resolution `d`.
    ShiftedCosine { d: f64 },
    /// Endpoint-normalized sigmoid schedule with parameters (s, e, tau).
    Sigmoid { s: f64, e: f64, tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub lambda_clamp: (f64, f64),
}

impl NoiseSchedule {
    pub fn cosine() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            lambda_clamp: DEFAULT_LAMBDA_CLAMP,
        }
    }

    pub fn shifted_cosine(d: f64) -> Result<Self> {
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "shift reference d must be positive, got {d}"
            )));
        }
        Ok(Self {
            kind: ScheduleKind::ShiftedCosine { d },
            lambda_clamp: DEFAULT_LAMBDA_CLAMP,
        })
    }

    pub fn sigmoid(s: f64, e: f64, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() || !s.is_finite() || !e.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "bad sigmoid parameters s={s}, e={e}, tau={tau}"
            )));
        }
        Ok(Self {
            kind: ScheduleKind::Sigmoid { s, e, tau },
            lambda_clamp: DEFAULT_LAMBDA_CLAMP,
        })
    }

    /// Default sigmoid schedule, (s, e, tau) = (0, 3, 0.9).
    pub fn sigmoid_default() -> Self {
        Self::sigmoid(0.0, 3.0, 0.9).unwrap()
    }

    pub fn with_lambda_clamp(mut self, lambda_min: f64, lambda_max: f64) -> Result<Self> {
        if !(lambda_min < lambda_max) {
            return Err(Error::InvalidArgument(format!(
                "lambda clamp requires min < max, got ({lambda_min}, {lambda_max})"
            )));
        }
        self.lambda_clamp = (lambda_min, lambda_max);
        Ok(self)
    }

    /// log-SNR before clamping; +/- infinity at endpoints is expected.
    fn log_snr_raw(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => cosine_log_snr(t),
            ScheduleKind::ShiftedCosine { d } => cosine_log_snr(t) + 2.0 * (d / 256.0).ln(),
            ScheduleKind::Sigmoid { s, e, tau } => {
                let raw = |u: f64| sigmoid(-((e - s) * u + s) / tau);
                let (r0, r1) = (raw(0.0), raw(1.0));
                let alpha_sq = (raw(t) - r1) / (r0 - r1);
                // logit of alpha^2; endpoints map to +/- infinity
                (alpha_sq / (1.0 - alpha_sq)).ln()
            }
        }
    }

    pub fn log_snr(&self, t: f64) -> Result<f64> {
        if !t.is_finite() {
            return Err(Error::NonFinite("t"));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        let (lo, hi) = self.lambda_clamp;
        Ok(self.log_snr_raw(t).clamp(lo, hi))
    }

    pub fn snr(&self, t: f64) -> Result<f64> {
        Ok(self.log_snr(t)?.exp())
    }

    /// (alpha, sigma) at time t.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        Ok(alpha_sigma(self.log_snr(t)?))
    }

    /// Parse a textual descriptor: `cosine`, `shifted-cosine:d=<int>`,
    /// `sigmoid:s=<f>,e=<f>,tau=<f>`.
    pub fn parse(desc: &str) -> Result<Self> {
        let bad = || Error::BadScheduleDescriptor(desc.to_string());
        let (name, args) = match desc.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (desc, None),
        };
        match (name, args) {
            ("cosine", None) => Ok(Self::cosine()),
            ("shifted-cosine", Some(a)) => {
                let d = a.strip_prefix("d=").ok_or_else(bad)?;
                let d: f64 = d.parse().map_err(|_| bad())?;
                Self::shifted_cosine(d)
            }
            ("sigmoid", Some(a)) => {
                let mut s = None;
                let mut e = None;
                let mut tau = None;
                for part in a.split(',') {
                    let (k, v) = part.split_once('=').ok_or_else(bad)?;
                    let v: f64 = v.parse().map_err(|_| bad())?;
                    match k {
                        "s" => s = Some(v),
                        "e" => e = Some(v),
                        "tau" => tau = Some(v),
                        _ => return Err(bad()),
                    }
                }
                Self::sigmoid(
                    s.ok_or_else(bad)?,
                    e.ok_or_else(bad)?,
                    tau.ok_or_else(bad)?,
                )
            }
            _ => Err(bad()),
        }
    }

    /// Textual descriptor, round-trips through [`NoiseSchedule::parse`].
    pub fn descriptor(&self) -> String {
        match self.kind {
            ScheduleKind::Cosine => "cosine".into(),
            ScheduleKind::ShiftedCosine { d } => format!("shifted-cosine:d={d}"),
            ScheduleKind::Sigmoid { s, e, tau } => format!("sigmoid:s={s},e={e},tau={tau}"),
        }
    }
}

fn cosine_log_snr(t: f64) -> f64 {
    if t <= 0.0 {
        f64::INFINITY
    } else if t >= 1.0 {
        f64::NEG_INFINITY
    } else {
        -2.0 * (std::f64::consts::FRAC_PI_2 * t).tan().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// (alpha, sigma) from a log-SNR value: alpha = sqrt(sigmoid(lambda)),
/// sigma = sqrt(sigmoid(-lambda)).
pub fn alpha_sigma(lambda: f64) -> (f64, f64) {
    (sigmoid(lambda).sqrt(), sigmoid(-lambda).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_midpoint_is_zero() {
        let s = NoiseSchedule::cosine();
        assert_abs_diff_eq!(s.log_snr(0.5).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.snr(0.5).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cosine_endpoints_clamp() {
        let s = NoiseSchedule::cosine();
        assert_eq!(s.log_snr(0.0).unwrap(), 20.0);
        assert_eq!(s.log_snr(1.0).unwrap(), -20.0);
        assert_abs_diff_eq!(s.snr(1.0).unwrap(), (-20.0f64).exp(), epsilon = 1e-24);
    }

    #[test]
    fn shifted_cosine_identity_at_reference() {
        let base = NoiseSchedule::cosine();
        let shifted = NoiseSchedule::shifted_cosine(256.0).unwrap();
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            assert_eq!(base.log_snr(t).unwrap(), shifted.log_snr(t).unwrap());
        }
    }

    #[test]
    fn shifted_cosine_offset() {
        // 2 ln(64/256) evaluated with a high-precision scalar oracle
        let shifted = NoiseSchedule::shifted_cosine(64.0).unwrap();
        let expect = 0.0 + 2.0 * (64.0f64 / 256.0).ln();
        assert_abs_diff_eq!(expect, -2.772588722239781, epsilon = 1e-12);
        assert_abs_diff_eq!(shifted.log_snr(0.5).unwrap(), expect, epsilon = 1e-12);
        // exact pre-clamp offset at interior points
        let base = NoiseSchedule::cosine();
        for i in 1..100 {
            let t = i as f64 / 100.0;
            let lb = base.log_snr_raw(t);
            let ls = shifted.log_snr_raw(t);
            assert_abs_diff_eq!(ls - lb, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn alpha_sigma_values() {
        let (a, s) = alpha_sigma(0.0);
        assert_abs_diff_eq!(a, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_abs_diff_eq!(s, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);

        // sqrt(sigmoid(-20)) via scalar oracle
        let (a, s) = alpha_sigma(20.0);
        assert_abs_diff_eq!(s, 4.539992971569673e-5, epsilon = 1e-12);
        assert!(a < 1.0 && a > 0.999_999_99);

        // sigmoid(ln 3) = 3/4
        let (a, s) = alpha_sigma(3.0f64.ln());
        assert_abs_diff_eq!(a, 0.8660254037844386, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn cosine_snr_quarter() {
        // tan(pi/8)^-2 via scalar oracle
        let s = NoiseSchedule::cosine();
        assert_abs_diff_eq!(s.snr(0.25).unwrap(), 5.82842712474619, epsilon = 1e-10);
    }

    #[test]
    fn variance_preservation_all_kinds() {
        let schedules = [
            NoiseSchedule::cosine(),
            NoiseSchedule::shifted_cosine(32.0).unwrap(),
            NoiseSchedule::shifted_cosine(64.0).unwrap(),
            NoiseSchedule::sigmoid_default(),
        ];
        for sch in &schedules {
            for i in 0..=10_000 {
                let t = i as f64 / 10_000.0;
                let (a, s) = sch.alpha_sigma(t).unwrap();
                assert!((a * a + s * s - 1.0).abs() <= 1e-12, "{sch:?} t={t}");
                assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&s));
            }
        }
    }

    #[test]
    fn monotone_non_increasing() {
        let schedules = [
            NoiseSchedule::cosine(),
            NoiseSchedule::shifted_cosine(32.0).unwrap(),
            NoiseSchedule::sigmoid_default(),
            NoiseSchedule::sigmoid(0.5, 4.0, 1.3).unwrap(),
        ];
        for sch in &schedules {
            let mut prev = f64::INFINITY;
            for i in 0..=10_000 {
                let t = i as f64 / 10_000.0;
                let l = sch.log_snr(t).unwrap();
                assert!(l <= prev + 1e-12, "{sch:?} t={t}");
                prev = l;
            }
        }
    }

    #[test]
    fn snr_round_trip() {
        let sch = NoiseSchedule::sigmoid_default();
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let rel = (sch.snr(t).unwrap() - sch.log_snr(t).unwrap().exp()).abs()
                / sch.snr(t).unwrap();
            assert!(rel <= 1e-12);
        }
    }

    #[test]
    fn rejects_bad_time() {
        let s = NoiseSchedule::cosine();
        assert!(s.log_snr(-0.1).is_err());
        assert!(s.log_snr(1.1).is_err());
        assert!(s.log_snr(f64::NAN).is_err());
    }

    #[test]
    fn descriptor_round_trip() {
        for d in ["cosine", "shifted-cosine:d=64", "sigmoid:s=0,e=3,tau=0.9"] {
            let s = NoiseSchedule::parse(d).unwrap();
            assert_eq!(NoiseSchedule::parse(&s.descriptor()).unwrap(), s);
        }
        assert!(NoiseSchedule::parse("linear").is_err());
        assert!(NoiseSchedule::parse("shifted-cosine:d=x").is_err());
    }
}
