use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Sampled, renormalized 1-D Gaussian with support `ceil(4 sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    sigma: f64,
    radius: usize,
    taps: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("kernel sigma must be positive, got {sigma}")));
        }
        let radius = (4.0 * sigma).ceil() as usize;
        let raw: Vec<f64> = (0..=2 * radius)
            .map(|i| gaussian_density(i as f64 - radius as f64, sigma))
            .collect();
        // Sum symmetric pairs from the outside in so the two halves round alike.
        let mut total = raw[radius];
        for k in (1..=radius).rev() {
            total += raw[radius - k] + raw[radius + k];
        }
        let mut taps: Vec<f64> = raw.iter().map(|v| v / total).collect();
        for k in 1..=radius {
            taps[radius + k] = taps[radius - k];
        }
        Ok(Self { sigma, radius, taps })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Tap at signed offset `x`; zero outside the support.
    pub fn tap(&self, x: isize) -> f64 {
        let i = x + self.radius as isize;
        if i < 0 {
            0.0
        } else {
            self.taps.get(i as usize).copied().unwrap_or(0.0)
        }
    }

    /// Sum of squared 2-D taps: the variance gain of white noise through the
    /// separable filter.
    pub fn white_noise_gain(&self) -> f64 {
        let s: f64 = self.taps.iter().map(|t| t * t).sum();
        s * s
    }
}

/// Continuous Gaussian density `exp(-x^2 / 2 sigma^2) / (sigma sqrt(2 pi))`.
#[inline]
pub fn gaussian_density(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt())
}

pub fn make_kernel(sigma: f64) -> Result<GaussianKernel> {
    GaussianKernel::new(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::MdlConfig;

    #[test]
    fn taps_normalized_and_symmetric_on_default_grid() {
        for &s in MdlConfig::default().sigma_grid() {
            let k = make_kernel(s).unwrap();
            let sum: f64 = k.taps().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sigma {s}: sum {sum}");
            assert_eq!(k.radius(), (4.0 * s).ceil() as usize);
            assert_eq!(k.taps().len(), 2 * k.radius() + 1);
            for i in 0..=k.radius() as isize {
                assert_eq!(k.tap(i), k.tap(-i));
                assert!(k.tap(i) > 0.0);
            }
        }
    }

    #[test]
    fn unit_sigma_center_density() {
        assert!((gaussian_density(0.0, 1.0) - 0.398942280401).abs() < 1e-11);
    }

    #[test]
    fn narrow_kernel_is_nearly_a_delta() {
        // Renormalized samples at sigma = 0.3: 1 / (1 + 2 e^{-1/0.18} + 2 e^{-4/0.18})
        let expected = 1.0 / (1.0 + 2.0 * (-1.0f64 / 0.18).exp() + 2.0 * (-4.0f64 / 0.18).exp());
        let k = make_kernel(0.3).unwrap();
        assert!((k.tap(0) - expected).abs() < 1e-15);
        assert!(k.tap(0) > 0.99);
    }

    #[test]
    fn rejects_non_positive_sigma() {
        assert!(make_kernel(0.0).is_err());
        assert!(make_kernel(-1.0).is_err());
        assert!(make_kernel(f64::NAN).is_err());
    }
}
