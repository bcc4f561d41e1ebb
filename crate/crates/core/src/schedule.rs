//! Noise schedule and the closed-form forward process.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-step noise tables, 1-indexed by timestep (index 0 is unused padding
/// except `alpha_bar[0] = 1`, the clean-image endpoint used by the sampler).
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_steps: usize,
    pub beta_min: f32,
    pub beta_max: f32,
    beta: Vec<f32>,
    alpha: Vec<f32>,
    alpha_bar: Vec<f32>,
}

impl NoiseSchedule {
    pub fn beta(&self, t: usize) -> f32 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f32 {
        self.alpha[t]
    }

    /// Cumulative product of alphas up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f32 {
        self.alpha_bar[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_steps {
            return Err(Error::TimestepOutOfRange { t, max: self.t_steps });
        }
        Ok(())
    }
}

/// Linear beta schedule from `beta_min` to `beta_max` inclusive, with the
/// cumulative products accumulated in f64.
pub fn make_schedule(t_steps: usize, beta_min: f32, beta_max: f32) -> Result<NoiseSchedule> {
    if t_steps < 2 {
        return Err(Error::invalid("schedule needs at least 2 steps"));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::invalid("need 0 < beta_min < beta_max < 1"));
    }
    let mut beta = vec![0.0f32; t_steps + 1];
    let mut alpha = vec![0.0f32; t_steps + 1];
    let mut alpha_bar = vec![0.0f32; t_steps + 1];
    alpha_bar[0] = 1.0;
    let mut prod = 1.0f64;
    for t in 1..=t_steps {
        let frac = (t - 1) as f64 / (t_steps - 1) as f64;
        let b = beta_min as f64 + (beta_max as f64 - beta_min as f64) * frac;
        beta[t] = b as f32;
        alpha[t] = (1.0 - b) as f32;
        prod *= 1.0 - b;
        alpha_bar[t] = prod as f32;
    }
    Ok(NoiseSchedule { t_steps, beta_min, beta_max, beta, alpha, alpha_bar })
}

/// Closed-form forward sample: sqrt(abar_t) x0 + sqrt(1 - abar_t) z.
pub fn q_sample(x0: &Tensor, t: usize, z: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    x0.expect_same_shape(z)?;
    let ab = sched.alpha_bar(t);
    x0.scale_add(ab.sqrt(), z, (1.0 - ab).sqrt())
}

/// Raw clean-image estimate: (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t).
pub fn predict_x0(x_t: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    x_t.expect_same_shape(eps)?;
    let ab = sched.alpha_bar(t);
    x_t.scale_add(1.0 / ab.sqrt(), eps, -(1.0 - ab).sqrt() / ab.sqrt())
}

/// `predict_x0` clamped to [-1,1] for visualization and spectra.
pub fn predict_x0_clamped(
    x_t: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    Ok(predict_x0(x_t, t, eps, sched)?.clamped(-1.0, 1.0))
}
