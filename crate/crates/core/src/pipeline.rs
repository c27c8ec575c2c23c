//! One shot from optical density to enhanced image and metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageContext, StageTimings};
use crate::filter::{adaptive_filter, adaptive_filter_at, detect_components, AdaptiveOutput, FilterConfig};
use crate::gray::{apply_gray_transform, detect_knees, solve_gray_params, GrayParams, Knees, DEFAULT_KAPPA};
use crate::image::{normalize_unit, region_stats, ImageGrid, NormMap, RegionStats};
use crate::metrics::{fit_gaussian_1d, particle_number, temperature_from_fwhm, GaussFit1D, Length, PhysicalContext};

/// Settings for [`enhance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhanceConfig {
    pub filter: FilterConfig,
    /// Output level at the low knee as a fraction of the knee.
    pub kappa: f64,
    /// Upper bound on the number of clouds processed in one image.
    pub max_components: usize,
    /// Smoothing width used when looking for separate clouds.
    pub component_sigma: f64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            kappa: DEFAULT_KAPPA,
            max_components: 4,
            component_sigma: 3.0,
        }
    }
}

/// Background statistics over region `K` at each stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundStats {
    /// Unfiltered crop, input units.
    pub raw: RegionStats,
    /// Filtered crop, input units.
    pub filtered: RegionStats,
    /// Enhanced image, gray levels in [0, 1].
    pub enhanced: RegionStats,
}

impl BackgroundStats {
    /// Ratio of raw to filtered background deviation.
    pub fn suppression(&self) -> f64 {
        self.raw.stddev / self.filtered.stddev
    }
}

/// Result of enhancing one cloud.
#[derive(Debug, Clone)]
pub struct Enhancement {
    pub adaptive: AdaptiveOutput,
    /// Gray-transformed image on [0, 1].
    pub enhanced: ImageGrid,
    /// Map from filtered units to the gray levels the transform saw.
    pub gray_norm: NormMap,
    pub knees: Knees,
    pub gray: GrayParams,
    pub gray_out_of_range: usize,
    pub background: BackgroundStats,
    pub warnings: Vec<String>,
    /// Every stage from normalization to the gray transform.
    pub timings: StageTimings,
}

/// Adaptive filter followed by the gray transform on a single-cloud image.
pub fn enhance(od: &ImageGrid, cfg: &EnhanceConfig) -> Result<Enhancement> {
    let adaptive = adaptive_filter(od, &cfg.filter)?;
    finish(adaptive, cfg)
}

/// [`enhance`] for the cloud at `center`.
pub fn enhance_at(od: &ImageGrid, center: (f64, f64), cfg: &EnhanceConfig) -> Result<Enhancement> {
    let adaptive = adaptive_filter_at(od, center, &cfg.filter)?;
    finish(adaptive, cfg)
}

/// Enhances every separate cloud in `od`, brightest first. An image with a
/// single cloud goes through [`enhance`] unchanged.
pub fn enhance_components(od: &ImageGrid, cfg: &EnhanceConfig) -> Result<Vec<Result<Enhancement>>> {
    let (normalized, _) = normalize_unit(od).stage("normalize")?;
    let centers = detect_components(&normalized, cfg.component_sigma, cfg.max_components).stage("components")?;
    if centers.len() <= 1 {
        return Ok(vec![enhance(od, cfg)]);
    }
    Ok(centers.into_iter().map(|c| enhance_at(od, c, cfg)).collect())
}

fn finish(adaptive: AdaptiveOutput, cfg: &EnhanceConfig) -> Result<Enhancement> {
    let seg = &adaptive.segmentation;
    let mut clock = adaptive.timings.clone();
    let mut warnings = Vec::new();
    let cal = &adaptive.calibration;
    if !cal.satisfied {
        warnings.push(format!(
            "background limits not met at sigma_e = {} (mean {:.4}, stddev {:.4})",
            cal.sigma_e, cal.mean, cal.stddev
        ));
    }
    let (gray_in, gray_norm) = clock.time("gray_normalize", || normalize_unit(&adaptive.filtered))?;
    let mut knees = clock.time("knees", || detect_knees(&gray_in, seg))?;
    if knees.fallback {
        warnings.push(format!("knee ordering failed; g_l set to g_h / 2 = {}", knees.g_l));
    }
    let gray = clock.time("gray_params", || {
        match solve_gray_params(knees.g_l, knees.g_h, cfg.kappa) {
            Ok(g) => Ok(g),
            Err(e) if !knees.fallback => {
                warnings.push(format!("{e}; g_l set to g_h / 2 = {}", 0.5 * knees.g_h));
                knees.g_l = 0.5 * knees.g_h;
                knees.fallback = true;
                solve_gray_params(knees.g_l, knees.g_h, cfg.kappa)
            }
            Err(e) => Err(e),
        }
    })?;
    let out = clock.time("gray_transform", || apply_gray_transform(&gray_in, &gray))?;
    if out.out_of_range > 0 {
        warnings.push(format!(
            "{} pixels outside [0, 1] passed through the gray transform",
            out.out_of_range
        ));
    }
    let background = BackgroundStats {
        raw: region_stats(&adaptive.raw_crop, &seg.mask_k)?,
        filtered: region_stats(&adaptive.filtered, &seg.mask_k)?,
        enhanced: region_stats(&out.image, &seg.mask_k)?,
    };
    Ok(Enhancement {
        adaptive,
        enhanced: out.image,
        gray_norm,
        knees,
        gray,
        gray_out_of_range: out.out_of_range,
        background,
        warnings,
        timings: clock,
    })
}

/// Fit of the crop row through the cloud center.
pub fn center_row_fit(image: &ImageGrid, center_y: f64) -> Result<GaussFit1D> {
    if image.height() == 0 {
        return Err(Error::invalid("empty image"));
    }
    let y = (center_y.round().max(0.0) as usize).min(image.height() - 1);
    let profile: Vec<(f64, f64)> = image.row(y).iter().enumerate().map(|(x, &v)| (x as f64, v)).collect();
    fit_gaussian_1d(&profile)
}

/// Widths and atom numbers of one shot, before and after enhancement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotAnalysis {
    pub fwhm_raw_px: f64,
    pub fwhm_enhanced_px: f64,
    /// Sum over the whole unfiltered frame.
    pub atom_number_raw: Option<f64>,
    /// Sum of the filtered image over the disk `r <= r_e`.
    pub atom_number_enhanced: Option<f64>,
    pub temperature_raw_k: Option<f64>,
    pub temperature_enhanced_k: Option<f64>,
}

/// FWHM from fits of the center row of the raw and filtered crops; atom
/// numbers and temperatures when `ctx` has the units for them.
pub fn analyze(od: &ImageGrid, e: &Enhancement, ctx: Option<&PhysicalContext>) -> Result<ShotAnalysis> {
    let seg = &e.adaptive.segmentation;
    let raw = center_row_fit(&e.adaptive.raw_crop, seg.center_y).stage("raw_fit")?;
    let enh = center_row_fit(&e.adaptive.filtered, seg.center_y).stage("enhanced_fit")?;
    let (fwhm_raw_px, fwhm_enhanced_px) = (raw.fwhm(), enh.fwhm());
    let mut a = ShotAnalysis {
        fwhm_raw_px,
        fwhm_enhanced_px,
        atom_number_raw: None,
        atom_number_enhanced: None,
        temperature_raw_k: None,
        temperature_enhanced_k: None,
    };
    if let Some(ctx) = ctx {
        if ctx.pixel_pitch_m.is_some() && ctx.cross_section_m2.is_some() {
            a.atom_number_raw = Some(particle_number(od, ctx, None)?);
            a.atom_number_enhanced = Some(particle_number(&e.adaptive.filtered, ctx, Some(&seg.cloud_mask()))?);
        }
        if ctx.pixel_pitch_m.is_some() {
            a.temperature_raw_k = Some(temperature_from_fwhm(Length::Pixels(fwhm_raw_px), ctx)?);
            a.temperature_enhanced_k = Some(temperature_from_fwhm(Length::Pixels(fwhm_enhanced_px), ctx)?);
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::compute_optical_density;
    use crate::sensorsim::{simulate_triplet, CloudModel, Seed, SensorModel};

    fn cloud() -> CloudModel {
        CloudModel {
            amplitude: 1.0,
            center_x: 150.0,
            center_y: 150.0,
            sigma_x: 8.5,
            sigma_y: 8.5,
            baseline_light: 2000.0,
        }
    }

    #[test]
    fn noiseless_cloud_keeps_its_width() {
        let wide = CloudModel {
            sigma_x: 24.0,
            sigma_y: 24.0,
            ..cloud()
        };
        let od = wide.od_field(301, 301).unwrap();
        let mut cfg = EnhanceConfig::default();
        cfg.filter.crop_width = 161;
        let e = enhance(&od, &cfg).unwrap();
        let a = analyze(&od, &e, None).unwrap();
        let truth = 24.0 * crate::metrics::FWHM_PER_SIGMA;
        assert!(
            ((a.fwhm_enhanced_px - truth) / truth).abs() < 0.01,
            "{}",
            a.fwhm_enhanced_px
        );
    }

    #[test]
    fn constant_image_is_rejected() {
        let img = ImageGrid::filled(301, 301, 0.3);
        assert!(enhance(&img, &EnhanceConfig::default()).is_err());
    }

    #[test]
    fn cloud_core_above_knee_is_untouched() {
        let tri = simulate_triplet(&cloud(), 301, 301, &SensorModel::default(), Seed(5)).unwrap();
        let od = compute_optical_density(&tri, 1e-6).unwrap().image;
        let e = enhance(&od, &EnhanceConfig::default()).unwrap();
        let (gray_in, _) = normalize_unit(&e.adaptive.filtered).unwrap();
        for &i in &e.adaptive.segmentation.mask_j {
            let g = gray_in.pixels()[i];
            if g >= e.gray.g_h {
                assert_eq!(e.enhanced.pixels()[i].to_bits(), g.to_bits());
            }
        }
    }
}
