//! Diffusion-based cross-modality image translation.
//!
//! The crate is organized around a continuous-time variance-preserving
//! diffusion process: [`schedule`] maps diffusion time to log-SNR,
//! [`diffusion`] holds the forward/posterior Gaussian algebra and the
//! x/eps/v prediction conversions, [`sampler`] implements DDPM and DDIM
//! sampling loops, [`nets`] provides a minimal reverse-mode autodiff
//! engine together with the four denoiser architectures, and [`volume`]
//! ties everything into a slice-wise 3D translation pipeline.

pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod spline;
pub mod train;
pub mod volume;
pub mod wavelet;

pub use error::{Error, Result};
pub use schedule::NoiseSchedule;
