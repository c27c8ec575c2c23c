//! Camera noise model and synthetic atom-cloud scenes.
//!
//! A frame is formed as `D = K (I + N_p + N_d) + N_read + N_q`: Poisson
//! photo- and dark electrons scaled by the system gain, Gaussian readout
//! noise, then rounding to the ADC step `q` and clipping at saturation.
//!
//! Every row draws from its own ChaCha stream keyed by (frame seed, row), so
//! generation is parallel over rows yet bit-identical to a sequential run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageGrid, RawTriplet};

/// Seed for every stochastic routine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    /// Sub-seed for the n-th frame of a triplet.
    pub fn frame(self, n: u64) -> Seed {
        Seed(self.0 ^ n)
    }

    /// Reproducible seed for shot `shot` of series `series`.
    pub fn shot(self, series: u64, shot: u64) -> Seed {
        // splitmix64 finalizer spreads neighbouring indices across the space
        let mut z = self.0 ^ (series << 32 | shot).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Seed(z ^ (z >> 31))
    }

    fn row_rng(self, row: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(row as u64);
        rng
    }
}

/// Quantization error convention recorded in manifests.
pub const QUANTIZATION_CONVENTION: &str = "round-to-nearest, error uniform on [-q/2, +q/2]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorModel {
    /// Overall system gain K (counts per electron).
    pub gain_k: f64,
    /// Mean dark electrons per pixel and exposure, added before the Poisson draw.
    pub dark_mean: f64,
    /// Standard deviation of a fixed per-pixel dark offset map, in electrons.
    /// Zero disables the map.
    pub dark_std: f64,
    /// Mean of the Gaussian readout aggregate, in counts.
    pub read_mu: f64,
    /// Standard deviation of the readout aggregate, in counts.
    pub read_sigma: f64,
    /// ADC step in counts.
    pub quant_step_q: f64,
    /// Saturation level in counts.
    pub clip_max: f64,
    /// Draw Poisson photo- and dark electrons. When false the expected
    /// electron count is used directly.
    #[serde(default = "default_true")]
    pub shot_noise: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SensorModel {
    /// A 16-bit camera at unit gain with a few counts of read noise.
    fn default() -> Self {
        Self {
            gain_k: 1.0,
            dark_mean: 1.0,
            dark_std: 0.0,
            read_mu: 100.0,
            read_sigma: 4.0,
            quant_step_q: 1.0,
            clip_max: 65535.0,
            shot_noise: true,
        }
    }
}

impl SensorModel {
    /// Every noise source off and a negligible ADC step, so frames equal
    /// `K * I` to within 1e-9 counts.
    pub fn noiseless() -> Self {
        Self {
            gain_k: 1.0,
            dark_mean: 0.0,
            dark_std: 0.0,
            read_mu: 0.0,
            read_sigma: 0.0,
            quant_step_q: 1e-9,
            clip_max: f64::MAX,
            shot_noise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.gain_k,
            self.dark_mean,
            self.dark_std,
            self.read_mu,
            self.read_sigma,
            self.quant_step_q,
            self.clip_max,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("sensor parameters must be finite"));
        }
        if self.gain_k <= 0.0 {
            return Err(Error::invalid(format!("gain K must be positive, got {}", self.gain_k)));
        }
        if self.quant_step_q <= 0.0 {
            return Err(Error::invalid(format!(
                "quantization step must be positive, got {}",
                self.quant_step_q
            )));
        }
        if self.read_sigma < 0.0 || self.dark_std < 0.0 || self.dark_mean < 0.0 {
            return Err(Error::invalid("noise widths and dark current must be non-negative"));
        }
        if self.clip_max <= 0.0 {
            return Err(Error::invalid("saturation level must be positive"));
        }
        Ok(())
    }

    /// Expected count `K (I + dark) + mu` before quantization and clipping.
    pub fn expected_count(&self, irradiation: f64) -> f64 {
        self.gain_k * (irradiation + self.dark_mean) + self.read_mu
    }

    /// Variance `K^2 (I + dark) + sigma^2 + q^2 / 12` away from clipping.
    pub fn count_variance(&self, irradiation: f64) -> f64 {
        self.gain_k * self.gain_k * (irradiation + self.dark_mean)
            + self.read_sigma * self.read_sigma
            + self.quant_step_q * self.quant_step_q / 12.0
    }

    fn dark_pattern(&self, width: usize, height: usize) -> Option<Vec<f64>> {
        if self.dark_std == 0.0 {
            return None;
        }
        // The pattern belongs to the sensor, not the exposure: fixed seed.
        let normal = Normal::new(0.0, self.dark_std).ok()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0xDA4C_F1E1_D000_0000);
        Some((0..width * height).map(|_| normal.sample(&mut rng)).collect())
    }
}

/// Simulates one camera frame from expected photoelectrons per pixel.
pub fn simulate_frame(irradiation: &ImageGrid, model: &SensorModel, seed: Seed) -> Result<ImageGrid> {
    model.validate()?;
    if let Some(i) = irradiation.pixels().iter().position(|&v| v < 0.0) {
        let (x, y) = irradiation.coords(i);
        return Err(Error::invalid(format!(
            "negative irradiation {} at ({x}, {y})",
            irradiation.pixels()[i]
        )));
    }
    let (w, h) = (irradiation.width(), irradiation.height());
    let pattern = model.dark_pattern(w, h);
    let read = Normal::new(model.read_mu, model.read_sigma)
        .map_err(|e| Error::invalid(format!("readout distribution: {e}")))?;
    let q = model.quant_step_q;

    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let mut rng = seed.row_rng(y);
        for (x, px) in row.iter_mut().enumerate() {
            let i = y * w + x;
            let offset = pattern.as_ref().map_or(0.0, |p| p[i]);
            let lambda = (irradiation.pixels()[i] + model.dark_mean + offset).max(0.0);
            let electrons = if lambda > 0.0 && model.shot_noise {
                Poisson::new(lambda).map_or(lambda, |p| p.sample(&mut rng))
            } else {
                lambda
            };
            let analog = model.gain_k * electrons + read.sample(&mut rng);
            let digital = (analog / q).round() * q;
            *px = digital.clamp(0.0, model.clip_max);
        }
    });
    irradiation.with_pixels(out)
}

/// Gaussian absorption profile of a thermal cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudModel {
    /// Peak optical density.
    pub amplitude: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Probe-light photoelectrons per pixel without atoms.
    pub baseline_light: f64,
}

impl CloudModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_x > 0.0 && self.sigma_y > 0.0) {
            return Err(Error::invalid(format!(
                "cloud widths must be positive, got ({}, {})",
                self.sigma_x, self.sigma_y
            )));
        }
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::invalid(format!(
                "cloud amplitude must be a non-negative number, got {}",
                self.amplitude
            )));
        }
        if !(self.baseline_light > 0.0) || !self.baseline_light.is_finite() {
            return Err(Error::invalid("baseline light must be positive"));
        }
        if !(self.center_x.is_finite() && self.center_y.is_finite()) {
            return Err(Error::invalid("cloud center must be finite"));
        }
        Ok(())
    }

    /// Optical density at pixel `(x, y)`.
    #[inline]
    pub fn od_at(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.center_x;
        let dy = y - self.center_y;
        self.amplitude
            * (-(dx * dx) / (2.0 * self.sigma_x * self.sigma_x) - (dy * dy) / (2.0 * self.sigma_y * self.sigma_y)).exp()
    }

    /// Ground-truth optical-density map.
    pub fn od_field(&self, width: usize, height: usize) -> Result<ImageGrid> {
        self.validate()?;
        Ok(ImageGrid::from_fn(width, height, |x, y| self.od_at(x as f64, y as f64)))
    }

    /// Analytic integral of the OD profile over the whole plane.
    pub fn integrated_od(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.amplitude * self.sigma_x * self.sigma_y
    }

    /// True when center +/- 4 sigma lies inside a `width` x `height` frame.
    pub fn fits_inside(&self, width: usize, height: usize) -> bool {
        self.center_x - 4.0 * self.sigma_x >= 0.0
            && self.center_x + 4.0 * self.sigma_x <= (width - 1) as f64
            && self.center_y - 4.0 * self.sigma_y >= 0.0
            && self.center_y + 4.0 * self.sigma_y <= (height - 1) as f64
    }
}

/// Transmitted light through an arbitrary OD map: `(baseline e^-OD, baseline)`.
pub fn render_od_scene(od: &ImageGrid, baseline_light: f64) -> Result<(ImageGrid, ImageGrid)> {
    if !(baseline_light > 0.0) || !baseline_light.is_finite() {
        return Err(Error::invalid("baseline light must be positive"));
    }
    let with_atoms = od.map(|a| baseline_light * (-a).exp())?;
    let light_only = od.map(|_| baseline_light)?;
    Ok((with_atoms, light_only))
}

/// Expected photoelectrons with and without the cloud.
pub fn render_cloud_scene(cloud: &CloudModel, width: usize, height: usize) -> Result<(ImageGrid, ImageGrid)> {
    let od = cloud.od_field(width, height)?;
    if !cloud.fits_inside(width, height) {
        log::warn!("cloud footprint (center +/- 4 sigma) extends past the {width}x{height} frame");
    }
    render_od_scene(&od, cloud.baseline_light)
}

/// Simulates the (atoms, light, dark) frames for an OD map.
pub fn simulate_triplet_from_od(
    od: &ImageGrid,
    baseline_light: f64,
    model: &SensorModel,
    seed: Seed,
) -> Result<RawTriplet> {
    let (with_atoms, light_only) = render_od_scene(od, baseline_light)?;
    let dark = od.map(|_| 0.0)?;
    RawTriplet::new(
        simulate_frame(&with_atoms, model, seed.frame(1))?,
        simulate_frame(&light_only, model, seed.frame(2))?,
        simulate_frame(&dark, model, seed.frame(3))?,
    )
}

pub fn simulate_triplet(
    cloud: &CloudModel,
    width: usize,
    height: usize,
    model: &SensorModel,
    seed: Seed,
) -> Result<RawTriplet> {
    let od = cloud.od_field(width, height)?;
    if !cloud.fits_inside(width, height) {
        log::warn!("cloud footprint (center +/- 4 sigma) extends past the {width}x{height} frame");
    }
    simulate_triplet_from_od(&od, cloud.baseline_light, model, seed)
}

/// Straight interference fringes: `amplitude * sin(2 pi (x cos t + y sin t) / period + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fringe {
    pub amplitude: f64,
    pub period: f64,
    pub angle_rad: f64,
    pub phase: f64,
}

impl Fringe {
    pub fn add_to(&self, od: &ImageGrid) -> Result<ImageGrid> {
        if !(self.period > 0.0) {
            return Err(Error::invalid("fringe period must be positive"));
        }
        let (s, c) = self.angle_rad.sin_cos();
        let k = 2.0 * std::f64::consts::PI / self.period;
        let w = od.width();
        let px: Vec<f64> = od
            .pixels()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                v + self.amplitude * (k * (x * c + y * s) + self.phase).sin()
            })
            .collect();
        od.with_pixels(px)
    }
}
