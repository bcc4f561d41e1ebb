//! Image fidelity metrics.

use crate::error::Result;
use crate::tensor::Tensor;

/// PSNR is capped here instead of going to infinity at zero error.
pub const PSNR_CAP_DB: f32 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    pub mse: f32,
    pub psnr: f32,
}

/// Mean squared elementwise difference, accumulated in f64.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f32> {
    a.expect_same_shape(b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok((s / a.len() as f64) as f32)
}

/// PSNR in dB for images ranged [-1, 1] (peak-to-peak 2, so peak^2 = 4).
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f32> {
    let e = mse(a, b)?;
    Ok(psnr_from_mse(e))
}

pub fn psnr_from_mse(mse: f32) -> f32 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    let db = 10.0 * (4.0 / mse as f64).log10();
    (db as f32).min(PSNR_CAP_DB)
}

pub fn image_metrics(a: &Tensor, b: &Tensor) -> Result<ImageMetrics> {
    let e = mse(a, b)?;
    Ok(ImageMetrics { mse: e, psnr: psnr_from_mse(e) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f32>) -> Tensor {
        Tensor::new(vec![v.len()], v).unwrap()
    }

    #[test]
    fn mse_identity_is_zero() {
        let x = t(vec![0.3, -0.7, 0.1]);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn mse_constant_offset() {
        let a = t(vec![0.0; 8]);
        let b = t(vec![1.0; 8]);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn mse_hand_case() {
        let a = t(vec![0.0, 2.0]);
        let b = t(vec![1.0, 0.0]);
        assert_eq!(mse(&a, &b).unwrap(), 2.5);
    }

    #[test]
    fn mse_shape_mismatch() {
        let a = t(vec![0.0; 2]);
        let b = t(vec![0.0; 3]);
        assert!(mse(&a, &b).is_err());
    }

    #[test]
    fn psnr_cases() {
        assert_eq!(psnr_from_mse(0.0), 99.0);
        assert!((psnr_from_mse(4.0) - 0.0).abs() < 1e-6);
        assert!((psnr_from_mse(1.0) - 6.0206).abs() < 1e-3);
    }
}
