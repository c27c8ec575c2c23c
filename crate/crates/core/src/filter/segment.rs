//! Locating the cloud and splitting the crop into core, ring and background.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::convolve::{convolve_separable, reflect, separable_pass};
use super::kernel::gaussian_density;
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::metrics::{fit_gaussian_1d, GaussFit1D};

/// Default width of the Laplacian-of-Gaussian used to find the cloud.
pub const DEFAULT_LOG_SIGMA: f64 = 3.0;
/// Default side of the square crop around the cloud.
pub const DEFAULT_CROP_WIDTH: usize = 101;

/// Level (fraction of the fitted peak above offset) that defines `r_s`.
pub const CORE_LEVEL: f64 = 0.15;
/// Level that defines `r_e`.
pub const EDGE_LEVEL: f64 = 0.01;

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn log_response(image: &ImageGrid, sigma: f64) -> Result<ImageGrid> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("LoG sigma must be positive, got {sigma}")));
    }
    let r = (4.0 * sigma).ceil() as isize;
    let g: Vec<f64> = (-r..=r).map(|x| gaussian_density(x as f64, sigma)).collect();
    let total: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / total).collect();
    let s2 = sigma * sigma;
    let mut d2: Vec<f64> = (-r..=r)
        .zip(&g)
        .map(|(x, gx)| ((x * x) as f64 - s2) / (s2 * s2) * gx)
        .collect();
    // Zero DC response: flat regions give exactly no signal.
    let mean = d2.iter().sum::<f64>() / d2.len() as f64;
    d2.iter_mut().for_each(|v| *v -= mean);

    let lxx = separable_pass(image, &d2, &g)?;
    let lyy = separable_pass(image, &g, &d2)?;
    let sum = lxx.pixels().iter().zip(lyy.pixels()).map(|(a, b)| a + b).collect();
    image.with_pixels(sum)
}

fn weighted_centroid(image: &ImageGrid, indices: impl Iterator<Item = usize>, floor: f64) -> Option<(f64, f64)> {
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for i in indices {
        let w = image.pixels()[i] - floor;
        if w > 0.0 {
            let (x, y) = image.coords(i);
            sw += w;
            sx += w * x as f64;
            sy += w * y as f64;
        }
    }
    (sw > 0.0).then(|| (sx / sw, sy / sw))
}

/// Cloud center of mass.
///
/// The Laplacian-of-Gaussian response is thresholded at three times its
/// median absolute deviation; the centroid of the image over that support is
/// returned, weighting each pixel by its height above the image median. When
/// the support carries no weight the whole image is used instead.
pub fn find_center(image: &ImageGrid, log_sigma: f64) -> Result<(f64, f64)> {
    let (lo, hi) = image.min_max();
    if hi <= lo {
        return Err(Error::Degenerate("cannot locate a cloud in a constant image".into()));
    }
    let resp = log_response(image, log_sigma)?;
    let mut r: Vec<f64> = resp.pixels().to_vec();
    let med = median(&mut r);
    let mut dev: Vec<f64> = resp.pixels().iter().map(|v| (v - med).abs()).collect();
    let threshold = 3.0 * median(&mut dev);

    let floor = median(&mut image.pixels().to_vec());
    let support = resp
        .pixels()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > threshold)
        .map(|(i, _)| i);
    weighted_centroid(image, support, floor)
        .or_else(|| weighted_centroid(image, 0..image.len(), floor))
        .or_else(|| weighted_centroid(image, 0..image.len(), lo))
        .ok_or_else(|| Error::Degenerate("image has no positive weight for a centroid".into()))
}

/// Top-left corner, in source coordinates, of a `width`-wide crop centered on
/// the rounded `center`.
pub fn crop_origin(center: (f64, f64), width: usize) -> (isize, isize) {
    let half = (width / 2) as isize;
    (center.0.round() as isize - half, center.1.round() as isize - half)
}

/// Square `width x width` window centered at the rounded `center`; rows and
/// columns beyond the image are mirrored back in.
pub fn crop_centered(image: &ImageGrid, center: (f64, f64), width: usize) -> Result<ImageGrid> {
    if width.is_multiple_of(2) {
        return Err(Error::invalid(format!("crop width must be odd, got {width}")));
    }
    let limit = 2 * image.width().min(image.height());
    if width > limit {
        return Err(Error::invalid(format!(
            "crop width {width} exceeds twice the smaller image dimension ({limit})"
        )));
    }
    if !(center.0.is_finite() && center.1.is_finite()) {
        return Err(Error::invalid("crop center must be finite"));
    }
    let (ox, oy) = crop_origin(center, width);
    let (w, h) = (image.width(), image.height());
    let crop = ImageGrid::from_fn(width, width, |x, y| {
        image.get(reflect(ox + x as isize, w), reflect(oy + y as isize, h))
    });
    Ok(crop.with_pixel_pitch(image.pixel_pitch_um()))
}

/// Radius at which a Gaussian of width `sigma` falls to `level` of its peak.
pub fn level_radius(sigma: f64, level: f64) -> f64 {
    sigma * (2.0 * (1.0 / level).ln()).sqrt()
}

/// Cloud geometry on a crop: fitted profile, radii and the three regions.
///
/// `J` is the disk `r <= r_s`, `L` the ring `r_s < r <= r_e` and `K` the
/// background `r > r_e`, with `r` measured from the sub-pixel center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub width: usize,
    pub height: usize,
    pub center_x: f64,
    pub center_y: f64,
    pub fit: GaussFit1D,
    pub r_s: f64,
    pub r_m: f64,
    pub r_e: f64,
    #[serde(skip)]
    pub mask_j: Vec<usize>,
    #[serde(skip)]
    pub mask_l: Vec<usize>,
    #[serde(skip)]
    pub mask_k: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Core,
    Ring,
    Background,
}

impl Segmentation {
    /// Builds masks for explicit geometry. `r_s < r_e` is required.
    pub fn from_geometry(
        width: usize,
        height: usize,
        center: (f64, f64),
        fit: GaussFit1D,
        r_s: f64,
        r_e: f64,
    ) -> Result<Self> {
        if !(r_s > 0.0 && r_e > r_s) {
            return Err(Error::Segmentation(format!("invalid radii r_s = {r_s}, r_e = {r_e}")));
        }
        let mut seg = Self {
            width,
            height,
            center_x: center.0,
            center_y: center.1,
            fit,
            r_s,
            r_m: 0.5 * (r_s + r_e),
            r_e,
            mask_j: Vec::new(),
            mask_l: Vec::new(),
            mask_k: Vec::new(),
        };
        for i in 0..width * height {
            match seg.region_of(i) {
                Region::Core => seg.mask_j.push(i),
                Region::Ring => seg.mask_l.push(i),
                Region::Background => seg.mask_k.push(i),
            }
        }
        Ok(seg)
    }

    pub fn radius_of(&self, index: usize) -> f64 {
        let x = (index % self.width) as f64 - self.center_x;
        let y = (index / self.width) as f64 - self.center_y;
        x.hypot(y)
    }

    pub fn region_of(&self, index: usize) -> Region {
        let r = self.radius_of(index);
        if r <= self.r_s {
            Region::Core
        } else if r <= self.r_e {
            Region::Ring
        } else {
            Region::Background
        }
    }

    /// Pixels with `r <= r_e`.
    pub fn cloud_mask(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self.mask_j.iter().chain(&self.mask_l).copied().collect();
        m.sort_unstable();
        m
    }

    /// Region labels as an image: 0 for J, 1 for L, 2 for K.
    pub fn label_image(&self) -> Result<ImageGrid> {
        let labels = (0..self.width * self.height)
            .map(|i| match self.region_of(i) {
                Region::Core => 0.0,
                Region::Ring => 1.0,
                Region::Background => 2.0,
            })
            .collect();
        ImageGrid::new(self.width, self.height, labels)
    }
}

fn row_profile(image: &ImageGrid, y: usize) -> Vec<(f64, f64)> {
    image.row(y).iter().enumerate().map(|(x, &v)| (x as f64, v)).collect()
}

fn column_profile(image: &ImageGrid, x: usize) -> Vec<(f64, f64)> {
    (0..image.height()).map(|y| (y as f64, image.get(x, y))).collect()
}

fn checked_fit(profile: &[(f64, f64)], axis: &str) -> Result<GaussFit1D> {
    let fit = fit_gaussian_1d(profile).map_err(|e| Error::Segmentation(format!("{axis} cross-section fit: {e}")))?;
    if !(fit.sigma > 0.0) {
        return Err(Error::Segmentation(format!("{axis} fit has non-positive width")));
    }
    if !(fit.amplitude > 3.0 * fit.residual_rms) {
        return Err(Error::Segmentation(format!(
            "{axis} fit amplitude {:.4} is not above 3x the residual RMS {:.4}",
            fit.amplitude, fit.residual_rms
        )));
    }
    Ok(fit)
}

/// Segments a centered, normalized crop.
///
/// A Gaussian is fitted to the row through the crop center; `r_s` and `r_e`
/// are where that profile falls to 15 % and 1 % of its peak above offset,
/// `r_m` is their midpoint. The vertical center comes from a second fit of
/// the column through the fitted horizontal center.
pub fn segment(cropped: &ImageGrid) -> Result<Segmentation> {
    let (w, h) = (cropped.width(), cropped.height());
    if w < 5 || h < 5 {
        return Err(Error::Segmentation(format!("crop {w}x{h} is too small to fit")));
    }
    let fit = checked_fit(&row_profile(cropped, h / 2), "horizontal")?;
    let in_range = |c: f64, n: usize| c >= 0.0 && c <= (n - 1) as f64;
    if !in_range(fit.center, w) {
        return Err(Error::Segmentation(format!(
            "fitted center {:.2} lies outside the crop",
            fit.center
        )));
    }
    let column = fit.center.round() as usize;
    let center_y = match checked_fit(&column_profile(cropped, column), "vertical") {
        Ok(v) if in_range(v.center, h) => v.center,
        _ => (h / 2) as f64,
    };
    let r_s = level_radius(fit.sigma, CORE_LEVEL);
    let r_e = level_radius(fit.sigma, EDGE_LEVEL);
    let seg = Segmentation::from_geometry(w, h, (fit.center, center_y), fit, r_s, r_e)?;
    if seg.mask_j.is_empty() {
        return Err(Error::Segmentation("cloud core region is empty".into()));
    }
    Ok(seg)
}

/// Centers of separate clouds, brightest first.
///
/// The image is smoothed at `smooth_sigma` and thresholded well above the
/// background; each 4-connected blob whose background-subtracted mass is at
/// least a tenth of the largest one yields its intensity-weighted centroid.
pub fn detect_components(image: &ImageGrid, smooth_sigma: f64, max_components: usize) -> Result<Vec<(f64, f64)>> {
    let (lo, hi) = image.min_max();
    if hi <= lo {
        return Err(Error::Degenerate("cannot detect clouds in a constant image".into()));
    }
    let sm = convolve_separable(image, smooth_sigma)?;
    let med = median(&mut sm.pixels().to_vec());
    let mut dev: Vec<f64> = sm.pixels().iter().map(|v| (v - med).abs()).collect();
    let mad = 1.4826 * median(&mut dev);
    let peak = sm.min_max().1;
    let threshold = med + (5.0 * mad).max(0.2 * (peak - med));

    let (w, h) = (sm.width(), sm.height());
    let mut label = vec![usize::MAX; w * h];
    let mut blobs: Vec<(f64, (f64, f64))> = Vec::new();
    for start in 0..w * h {
        if label[start] != usize::MAX || sm.pixels()[start] <= threshold {
            continue;
        }
        let id = blobs.len();
        let mut members = Vec::new();
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(i) = queue.pop_front() {
            members.push(i);
            let (x, y) = (i % w, i / w);
            let neighbours = [
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
            ];
            for n in neighbours.into_iter().flatten() {
                if label[n] == usize::MAX && sm.pixels()[n] > threshold {
                    label[n] = id;
                    queue.push_back(n);
                }
            }
        }
        let mass: f64 = members.iter().map(|&i| (image.pixels()[i] - med).max(0.0)).sum();
        let centroid = weighted_centroid(image, members.into_iter(), med).unwrap_or((0.0, 0.0));
        blobs.push((mass, centroid));
    }
    let biggest = blobs.iter().map(|b| b.0).fold(0.0, f64::max);
    let mut kept: Vec<(f64, (f64, f64))> = blobs
        .into_iter()
        .filter(|b| b.0 > 0.0 && b.0 >= 0.1 * biggest)
        .collect();
    kept.sort_by(|a, b| b.0.total_cmp(&a.0));
    kept.truncate(max_components);
    Ok(kept.into_iter().map(|b| b.1).collect())
}
