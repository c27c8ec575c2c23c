//! Adaptive Gaussian filtering of an optical-density image.
//!
//! The cloud is located and cropped, its profile fitted to split the crop
//! into core (`J`), ring (`L`) and background (`K`), and each pixel is then
//! smoothed with its own Gaussian width: the MDL optimum in the core, a
//! smooth radial ramp across the ring and a calibrated constant outside.

mod convolve;
mod field;
mod kernel;
mod mdl;
mod segment;

use serde::{Deserialize, Serialize};

pub use convolve::{
    convolve_separable, convolve_varying, convolve_with_kernel, convolve_with_sigma_map, reflect, separable_at,
};
pub use field::{
    build_sigma_field, build_sigma_field_with, calibrate_sigma_e, core_sigmas, robust_noise, BackgroundThresholds,
    Calibration, RadialProfile, SigmaField, MAX_EXPONENT,
};
pub use kernel::{gaussian_density, make_kernel, GaussianKernel};
pub use mdl::{geometric_grid, mdl_best_sigma, mdl_objective, MdlConfig, MdlStack, MDL_COEFFICIENT_PER_L2};
pub use segment::{
    crop_centered, crop_origin, detect_components, find_center, level_radius, segment, Region, Segmentation,
    CORE_LEVEL, DEFAULT_CROP_WIDTH, DEFAULT_LOG_SIGMA, EDGE_LEVEL,
};

use crate::error::{Result, StageTimings};
use crate::image::{normalize_unit, ImageGrid, NormMap};

/// Settings for [`adaptive_filter`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub mdl: MdlConfig,
    pub thresholds: BackgroundThresholds,
    pub crop_width: usize,
    pub log_sigma: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            mdl: MdlConfig::default(),
            thresholds: BackgroundThresholds::default(),
            crop_width: DEFAULT_CROP_WIDTH,
            log_sigma: DEFAULT_LOG_SIGMA,
        }
    }
}

/// Filtered crop and everything needed to interpret it.
#[derive(Debug, Clone)]
pub struct AdaptiveOutput {
    /// Filtered crop, in the units of the input.
    pub filtered: ImageGrid,
    /// Unfiltered crop, in the units of the input.
    pub raw_crop: ImageGrid,
    /// Normalized unfiltered crop the filter operated on.
    pub normalized_crop: ImageGrid,
    /// Normalized filtered crop.
    pub filtered_normalized: ImageGrid,
    pub norm: NormMap,
    /// Cloud center in input-image coordinates.
    pub center: (f64, f64),
    /// Input coordinates of the crop's top-left pixel.
    pub crop_origin: (isize, isize),
    pub segmentation: Segmentation,
    pub field: SigmaField,
    pub calibration: Calibration,
    pub timings: StageTimings,
}

/// Normalize, locate, crop, segment, build the sigma field, filter and map
/// back to input units.
pub fn adaptive_filter(image: &ImageGrid, cfg: &FilterConfig) -> Result<AdaptiveOutput> {
    let mut clock = StageTimings::default();
    let (normalized, norm) = clock.time("normalize", || normalize_unit(image))?;
    let center = clock.time("find_center", || find_center(&normalized, cfg.log_sigma))?;
    filter_normalized(image, &normalized, norm, center, cfg, clock)
}

/// [`adaptive_filter`] around a given center instead of a detected one.
pub fn adaptive_filter_at(image: &ImageGrid, center: (f64, f64), cfg: &FilterConfig) -> Result<AdaptiveOutput> {
    let mut clock = StageTimings::default();
    let (normalized, norm) = clock.time("normalize", || normalize_unit(image))?;
    filter_normalized(image, &normalized, norm, center, cfg, clock)
}

fn filter_normalized(
    image: &ImageGrid,
    normalized: &ImageGrid,
    norm: NormMap,
    center: (f64, f64),
    cfg: &FilterConfig,
    mut clock: StageTimings,
) -> Result<AdaptiveOutput> {
    let (crop, raw_crop) = clock.time("crop", || {
        Ok((
            crop_centered(normalized, center, cfg.crop_width)?,
            crop_centered(image, center, cfg.crop_width)?,
        ))
    })?;
    let seg = clock.time("segment", || segment(&crop))?;
    let (field, calibration) = clock.time("sigma_field", || {
        build_sigma_field(&crop, &seg, &cfg.thresholds, &cfg.mdl)
    })?;
    let filtered_normalized = clock.time("convolve", || convolve_varying(&crop, &field))?;
    let filtered = clock.time("denormalize", || norm.invert_image(&filtered_normalized))?;
    Ok(AdaptiveOutput {
        filtered,
        raw_crop,
        normalized_crop: crop,
        filtered_normalized,
        norm,
        center,
        crop_origin: crop_origin(center, cfg.crop_width),
        segmentation: seg,
        field,
        calibration,
        timings: clock,
    })
}
