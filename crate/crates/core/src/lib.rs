//! Desk-scale diffusion laboratory.
//!
//! A small pixel-space denoising diffusion model over a synthetic 32x32
//! image domain whose layout / content / material factors have exact
//! oracles, together with per-stage prompt conditioning, embedding
//! inversion, stage-band attribute transfer, and Fourier trajectory
//! analysis.

pub mod error;
pub mod eval;
pub mod fileio;
pub mod invert;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod spectrum;
pub mod train;
pub mod spectral;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
