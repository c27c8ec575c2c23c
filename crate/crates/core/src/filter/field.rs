//! Per-pixel Gaussian widths: MDL in the core, a smooth radial ramp through
//! the ring and a single calibrated width outside.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::convolve::convolve_with_kernel;
use super::kernel::GaussianKernel;
use super::mdl::{MdlConfig, MdlStack};
use super::segment::Segmentation;
use crate::error::{Error, Result};
use crate::image::{region_stats, ImageGrid, RegionStats};

/// Acceptance limits on the filtered background region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundThresholds {
    /// Largest admissible background mean.
    pub mk_max: f64,
    /// Largest admissible background standard deviation.
    pub sk_max: f64,
    /// Required reduction of white background noise, as a ratio of standard
    /// deviations. `None` disables the check.
    #[serde(default)]
    pub min_suppression: Option<f64>,
}

impl Default for BackgroundThresholds {
    fn default() -> Self {
        Self {
            mk_max: 0.1,
            sk_max: 0.05,
            min_suppression: Some(6.0),
        }
    }
}

impl BackgroundThresholds {
    /// Only the mean and deviation limits.
    pub fn stats_only(mk_max: f64, sk_max: f64) -> Self {
        Self {
            mk_max,
            sk_max,
            min_suppression: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mk_max.is_finite() && self.sk_max >= 0.0 && self.sk_max.is_finite()) {
            return Err(Error::invalid("background thresholds must be finite, sk_max >= 0"));
        }
        if let Some(f) = self.min_suppression {
            if !(f >= 1.0) || !f.is_finite() {
                return Err(Error::invalid(format!(
                    "noise suppression factor must be >= 1, got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of the background width search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub sigma_e: f64,
    /// False when some limit is not met at `sigma_e`.
    pub satisfied: bool,
    pub mean: f64,
    pub stddev: f64,
    /// Robust estimate of the pixel noise in the unfiltered background.
    pub noise_estimate: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Pixel noise from horizontal neighbour differences inside `mask`,
/// `1.4826 * MAD / sqrt(2)`; insensitive to slow background gradients.
pub fn robust_noise(image: &ImageGrid, mask: &[usize]) -> f64 {
    let w = image.width();
    let mut member = vec![false; image.len()];
    mask.iter().for_each(|&i| member[i] = true);
    let px = image.pixels();
    let mut diffs: Vec<f64> = mask
        .iter()
        .filter(|&&i| i % w + 1 < w && member[i + 1])
        .map(|&i| px[i + 1] - px[i])
        .collect();
    let med = median(&mut diffs);
    let mut dev: Vec<f64> = diffs.iter().map(|d| (d - med).abs()).collect();
    1.4826 * median(&mut dev) / std::f64::consts::SQRT_2
}

/// Smallest grid width whose uniform smoothing brings the background region
/// `K` within `thresholds`.
///
/// A normalized kernel leaves the region mean unchanged, so when the mean
/// limit fails at every width the smallest width meeting the deviation
/// limits is kept and `satisfied` is false. When the deviation limits fail
/// at every width the largest grid width is returned, also unsatisfied.
pub fn calibrate_sigma_e(
    image: &ImageGrid,
    seg: &Segmentation,
    thresholds: &BackgroundThresholds,
    cfg: &MdlConfig,
) -> Result<Calibration> {
    thresholds.validate()?;
    if seg.mask_k.is_empty() {
        return Err(Error::Segmentation("background region K is empty".into()));
    }
    let noise_estimate = robust_noise(image, &seg.mask_k);
    let result = |s: f64, stats: RegionStats, satisfied: bool| Calibration {
        sigma_e: s,
        satisfied,
        mean: stats.mean,
        stddev: stats.stddev,
        noise_estimate,
    };
    let mut spread_ok = None;
    for &s in cfg.sigma_grid() {
        let kernel = GaussianKernel::new(s)?;
        if let Some(f) = thresholds.min_suppression {
            if kernel.white_noise_gain().sqrt() * f > 1.0 {
                continue;
            }
        }
        let stats = region_stats(&convolve_with_kernel(image, &kernel)?, &seg.mask_k)?;
        if stats.stddev <= thresholds.sk_max {
            if stats.mean <= thresholds.mk_max {
                return Ok(result(s, stats, true));
            }
            spread_ok.get_or_insert((s, stats));
        }
    }
    if let Some((s, stats)) = spread_ok {
        log::debug!(
            "background mean {:.4} exceeds {} at every width; using sigma_e = {s}",
            stats.mean,
            thresholds.mk_max
        );
        return Ok(result(s, stats, false));
    }
    let s = cfg.largest_sigma();
    let stats = region_stats(&convolve_with_kernel(image, &GaussianKernel::new(s)?)?, &seg.mask_k)?;
    log::debug!("no grid sigma meets the background limits; using sigma_e = {s}");
    Ok(result(s, stats, false))
}

/// The radial part of the sigma field, for `r > r_s`.
///
/// On `(r_m, r_e]` the width follows a circular arc (in a sigma axis rescaled
/// by `lambda`) that passes through `(r_m, sigma_m)` and lands on `sigma_e`
/// with zero slope at `r_e`. On `(r_s, r_m]` it is
/// `sigma_s + a (r - r_s)^p`, with `p` matching the arc slope at `r_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialProfile {
    pub r_s: f64,
    pub r_m: f64,
    pub r_e: f64,
    pub sigma_s: f64,
    pub sigma_m: f64,
    pub sigma_e: f64,
    /// Power-branch coefficient, signed with the direction of the ramp.
    pub a: f64,
    pub p: f64,
    /// Arc radius and center height, in rescaled sigma units.
    pub arc_radius: f64,
    pub arc_center: f64,
    pub lambda: f64,
}

/// Upper bound on the power exponent.
pub const MAX_EXPONENT: f64 = 8.0;

impl RadialProfile {
    pub fn new(r_s: f64, r_e: f64, sigma_s: f64, sigma_e: f64) -> Result<Self> {
        if !(r_s > 0.0 && r_e > r_s && r_e.is_finite()) {
            return Err(Error::invalid(format!(
                "radii must satisfy 0 < r_s < r_e, got {r_s}, {r_e}"
            )));
        }
        if !(sigma_s > 0.0 && sigma_e > 0.0 && sigma_s.is_finite() && sigma_e.is_finite()) {
            return Err(Error::invalid("sigma_s and sigma_e must be positive"));
        }
        let r_m = 0.5 * (r_s + r_e);
        let sigma_m = 0.5 * (sigma_s + sigma_e);
        let d = r_e - r_m;
        let delta = (sigma_e - sigma_m).abs();
        // Keep the arc a graph over the ring and p within its bound.
        let max_rise = d * (1.0 - 1.0 / (MAX_EXPONENT / 2.0)).sqrt();
        let lambda = if delta > max_rise { delta / max_rise } else { 1.0 };
        let dp = delta / lambda;
        let (p, a, arc_radius) = if delta == 0.0 {
            (1.0, 0.0, 0.0)
        } else {
            let p = (2.0 * d * d / (d * d - dp * dp)).clamp(1.0, MAX_EXPONENT);
            let a = (sigma_m - sigma_s) / d.powf(p);
            (p, a, (dp * dp + d * d) / (2.0 * dp))
        };
        Ok(Self {
            r_s,
            r_m,
            r_e,
            sigma_s,
            sigma_m,
            sigma_e,
            a,
            p,
            arc_radius,
            arc_center: sigma_e / lambda - (sigma_e - sigma_m).signum() * arc_radius,
            lambda,
        })
    }

    fn direction(&self) -> f64 {
        (self.sigma_e - self.sigma_s).signum()
    }

    /// Width at radius `r`; `sigma_s` inside the core.
    pub fn value(&self, r: f64) -> f64 {
        if r <= self.r_s {
            self.sigma_s
        } else if r >= self.r_e {
            self.sigma_e
        } else if r == self.r_m {
            self.sigma_m
        } else if self.a == 0.0 {
            self.sigma_s
        } else if r < self.r_m {
            self.sigma_s + self.a * (r - self.r_s).powf(self.p)
        } else {
            let u = r - self.r_e;
            let drop = self.arc_radius - (self.arc_radius * self.arc_radius - u * u).sqrt();
            self.sigma_e - self.direction() * self.lambda * drop
        }
    }

    /// Analytic derivative of [`value`](Self::value).
    pub fn slope(&self, r: f64) -> f64 {
        if r <= self.r_s || r >= self.r_e || self.a == 0.0 {
            0.0
        } else if r <= self.r_m {
            self.a * self.p * (r - self.r_s).powf(self.p - 1.0)
        } else {
            let u = r - self.r_e;
            -self.direction() * self.lambda * u / (self.arc_radius * self.arc_radius - u * u).sqrt()
        }
    }
}

/// Per-pixel kernel widths over a crop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SigmaField {
    #[serde(skip)]
    pub sigmas: ImageGrid,
    pub sigma_s: f64,
    pub sigma_m: f64,
    pub sigma_e: f64,
    pub profile: RadialProfile,
}

impl SigmaField {
    /// Field with MDL widths on the core pixels of `seg` and the radial
    /// profile elsewhere.
    pub fn assemble(seg: &Segmentation, core_sigmas: &[f64], profile: RadialProfile) -> Result<Self> {
        if core_sigmas.len() != seg.mask_j.len() {
            return Err(Error::Internal("core widths do not match the core mask".into()));
        }
        let mut px: Vec<f64> = (0..seg.width * seg.height)
            .map(|i| profile.value(seg.radius_of(i)))
            .collect();
        for (&i, &s) in seg.mask_j.iter().zip(core_sigmas) {
            px[i] = s;
        }
        Ok(Self {
            sigmas: ImageGrid::new(seg.width, seg.height, px)?,
            sigma_s: profile.sigma_s,
            sigma_m: profile.sigma_m,
            sigma_e: profile.sigma_e,
            profile,
        })
    }
}

/// MDL widths on the core pixels, in mask order.
pub fn core_sigmas(image: &ImageGrid, seg: &Segmentation, cfg: &MdlConfig) -> Result<Vec<f64>> {
    if seg.mask_j.is_empty() {
        return Err(Error::Segmentation("cloud core region is empty".into()));
    }
    let stack = MdlStack::new(image, cfg)?;
    seg.mask_j
        .par_iter()
        .map(|&i| stack.best_sigma(image.coords(i)))
        .collect()
}

/// Sigma field for a normalized crop with a known background width.
pub fn build_sigma_field_with(
    image: &ImageGrid,
    seg: &Segmentation,
    sigma_e: f64,
    cfg: &MdlConfig,
) -> Result<SigmaField> {
    if image.width() != seg.width || image.height() != seg.height {
        return Err(Error::DimensionMismatch {
            what: "image vs segmentation",
            left_w: image.width(),
            left_h: image.height(),
            right_w: seg.width,
            right_h: seg.height,
        });
    }
    let core = core_sigmas(image, seg, cfg)?;
    let sigma_s = core.iter().copied().fold(f64::INFINITY, f64::min);
    if sigma_s > sigma_e {
        log::warn!("core width {sigma_s} exceeds background width {sigma_e}; ramp runs downward");
    }
    let profile = RadialProfile::new(seg.r_s, seg.r_e, sigma_s, sigma_e)?;
    SigmaField::assemble(seg, &core, profile)
}

/// Calibrates the background width, then builds the sigma field.
pub fn build_sigma_field(
    image: &ImageGrid,
    seg: &Segmentation,
    thresholds: &BackgroundThresholds,
    cfg: &MdlConfig,
) -> Result<(SigmaField, Calibration)> {
    let cal = calibrate_sigma_e(image, seg, thresholds, cfg)?;
    Ok((build_sigma_field_with(image, seg, cal.sigma_e, cfg)?, cal))
}
