//! Gaussian profile fitting and the physical quantities derived from it.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// `2 sqrt(2 ln 2)`: FWHM of a unit-sigma Gaussian.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;
pub const BOLTZMANN_K: f64 = 1.380_649e-23;
pub const RB87_MASS_KG: f64 = 1.443_160_6e-25;
/// Resonant cross-section `3 lambda^2 / 2 pi` on the Rb-87 D2 line.
pub const RB87_CROSS_SECTION_M2: f64 = 2.907e-13;

const MAX_ITERATIONS: usize = 200;
const STEP_TOLERANCE: f64 = 1e-10;

/// Least-squares fit of `amplitude * exp(-(x - center)^2 / 2 sigma^2) + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussFit1D {
    pub amplitude: f64,
    pub center: f64,
    pub sigma: f64,
    pub offset: f64,
    pub residual_rms: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl GaussFit1D {
    pub fn eval(&self, x: f64) -> f64 {
        let u = (x - self.center) / self.sigma;
        self.amplitude * (-0.5 * u * u).exp() + self.offset
    }

    pub fn fwhm(&self) -> f64 {
        FWHM_PER_SIGMA * self.sigma
    }
}

fn cost(profile: &[(f64, f64)], p: &Vector4<f64>) -> f64 {
    profile
        .iter()
        .map(|&(x, y)| {
            let u = (x - p[1]) / p[2];
            let r = p[0] * (-0.5 * u * u).exp() + p[3] - y;
            r * r
        })
        .sum()
}

fn initial_guess(profile: &[(f64, f64)]) -> Vector4<f64> {
    let (mut lo, mut hi, mut at) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &(x, y) in profile {
        lo = lo.min(y);
        if y > hi {
            hi = y;
            at = x;
        }
    }
    let half = lo + 0.5 * (hi - lo);
    let (mut left, mut right) = (at, at);
    for &(x, y) in profile {
        if y >= half {
            left = left.min(x);
            right = right.max(x);
        }
    }
    let spacing = profile
        .windows(2)
        .map(|w| (w[1].0 - w[0].0).abs())
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let sigma = (0.5 * (right - left)).max(if spacing.is_finite() { spacing } else { 1.0 });
    Vector4::new(hi - lo, at, sigma, lo)
}

/// Levenberg-Marquardt fit of a Gaussian plus offset.
///
/// Starts from offset = min, amplitude = max - min, center = position of the
/// maximum and sigma = half the width at half amplitude. Stops when the
/// relative parameter step drops below 1e-10, or after 200 iterations.
pub fn fit_gaussian_1d(profile: &[(f64, f64)]) -> Result<GaussFit1D> {
    if profile.len() < 5 {
        return Err(Error::invalid(format!(
            "a Gaussian fit needs at least 5 points, got {}",
            profile.len()
        )));
    }
    if profile.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::invalid("profile contains non-finite values"));
    }
    let mut p = initial_guess(profile);
    let first = profile[0].1;
    if profile.iter().all(|&(_, y)| y == first) {
        let partial = GaussFit1D {
            amplitude: 0.0,
            center: p[1],
            sigma: p[2],
            offset: first,
            residual_rms: 0.0,
            converged: false,
            iterations: 0,
        };
        return Err(Error::Fit {
            reason: "flat profile".into(),
            partial: Box::new(partial),
        });
    }

    let mut lambda = 1e-3;
    let mut current = cost(profile, &p);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for &(x, y) in profile {
            let d = x - p[1];
            let e = (-0.5 * d * d / (p[2] * p[2])).exp();
            let r = p[0] * e + p[3] - y;
            let j = Vector4::new(
                e,
                p[0] * e * d / (p[2] * p[2]),
                p[0] * e * d * d / (p[2] * p[2] * p[2]),
                1.0,
            );
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = jtj;
            for k in 0..4 {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = damped.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = p + step;
            let trial_cost = cost(profile, &trial);
            if trial_cost.is_finite() && trial_cost <= current {
                let rel = step.norm() / p.norm().max(f64::MIN_POSITIVE);
                p = trial;
                current = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel < STEP_TOLERANCE {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        // No downhill step at any damping: already at the minimum.
        if !accepted {
            converged = true;
        }
        if converged {
            break;
        }
    }

    let fit = GaussFit1D {
        amplitude: p[0],
        center: p[1],
        sigma: p[2].abs(),
        offset: p[3],
        residual_rms: (current / profile.len() as f64).sqrt(),
        converged,
        iterations,
    };
    if !converged {
        return Err(Error::Fit {
            reason: format!("no convergence after {MAX_ITERATIONS} iterations"),
            partial: Box::new(fit),
        });
    }
    if !(fit.sigma > 0.0) || !fit.sigma.is_finite() {
        return Err(Error::Fit {
            reason: "fitted sigma is not positive".into(),
            partial: Box::new(GaussFit1D {
                converged: false,
                ..fit
            }),
        });
    }
    Ok(fit)
}

pub fn fwhm_from_sigma(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(FWHM_PER_SIGMA * sigma)
}

pub fn sigma_from_fwhm(fwhm: f64) -> Result<f64> {
    if !(fwhm > 0.0) || !fwhm.is_finite() {
        return Err(Error::invalid(format!("FWHM must be positive, got {fwhm}")));
    }
    Ok(fwhm / FWHM_PER_SIGMA)
}

/// A length measured either on the sensor or in object space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Length {
    Pixels(f64),
    Meters(f64),
}

/// Physical constants of an imaging setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalContext {
    pub atom_mass_kg: f64,
    pub boltzmann_k: f64,
    pub tof_time_s: f64,
    /// Object-space size of one pixel.
    pub pixel_pitch_m: Option<f64>,
    pub cross_section_m2: Option<f64>,
}

impl Default for PhysicalContext {
    fn default() -> Self {
        Self::rb87(0.02, None)
    }
}

impl PhysicalContext {
    pub fn rb87(tof_time_s: f64, pixel_pitch_m: Option<f64>) -> Self {
        Self {
            atom_mass_kg: RB87_MASS_KG,
            boltzmann_k: BOLTZMANN_K,
            tof_time_s,
            pixel_pitch_m,
            cross_section_m2: Some(RB87_CROSS_SECTION_M2),
        }
    }

    pub fn with_tof(self, tof_time_s: f64) -> Self {
        Self { tof_time_s, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(positive(self.atom_mass_kg) && positive(self.boltzmann_k) && positive(self.tof_time_s)) {
            return Err(Error::invalid(
                "mass, Boltzmann constant and time of flight must be positive",
            ));
        }
        if self.pixel_pitch_m.is_some_and(|v| !positive(v)) || self.cross_section_m2.is_some_and(|v| !positive(v)) {
            return Err(Error::invalid("pixel pitch and cross-section must be positive"));
        }
        Ok(())
    }

    pub fn to_meters(&self, length: Length) -> Result<f64> {
        match length {
            Length::Meters(m) => Ok(m),
            Length::Pixels(px) => self
                .pixel_pitch_m
                .map(|p| px * p)
                .ok_or_else(|| Error::Unit("length given in pixels but no pixel pitch is known".into())),
        }
    }
}

/// `T = m sigma^2 / (2 k_B t^2)` for a cloud of width `sigma` after free
/// expansion for `t`.
pub fn temperature_from_sigma(sigma: Length, ctx: &PhysicalContext) -> Result<f64> {
    ctx.validate()?;
    let s = ctx.to_meters(sigma)?;
    if !(s > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {s}")));
    }
    Ok(ctx.atom_mass_kg * s * s / (2.0 * ctx.boltzmann_k * ctx.tof_time_s * ctx.tof_time_s))
}

/// `T = m FWHM^2 / (16 ln 2 k_B t^2)`.
pub fn temperature_from_fwhm(fwhm: Length, ctx: &PhysicalContext) -> Result<f64> {
    ctx.validate()?;
    let f = ctx.to_meters(fwhm)?;
    if !(f > 0.0) {
        return Err(Error::invalid(format!("FWHM must be positive, got {f}")));
    }
    let t = ctx.tof_time_s;
    Ok(ctx.atom_mass_kg * f * f / (16.0 * std::f64::consts::LN_2 * ctx.boltzmann_k * t * t))
}

/// Atom number `pitch^2 / cross_section * sum(A)` over `mask` (all pixels
/// when `None`). Negative pixels count as they are.
pub fn particle_number(od: &ImageGrid, ctx: &PhysicalContext, mask: Option<&[usize]>) -> Result<f64> {
    let pitch = ctx
        .pixel_pitch_m
        .ok_or_else(|| Error::Unit("atom number needs a pixel pitch".into()))?;
    let cross = ctx
        .cross_section_m2
        .ok_or_else(|| Error::Unit("atom number needs an absorption cross-section".into()))?;
    let px = od.pixels();
    let sum = match mask {
        None => px.iter().sum::<f64>(),
        Some(m) => {
            let mut s = 0.0;
            for &i in m {
                s += *px
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("mask index {i} outside a {}-pixel image", px.len())))?;
            }
            s
        }
    };
    Ok(pitch * pitch / cross * sum)
}

/// One analyzed shot, as written to the per-shot CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotMetrics {
    pub shot_id: String,
    pub fwhm_px: f64,
    pub fwhm_um: Option<f64>,
    #[serde(rename = "temperature_nK")]
    pub temperature_nk: Option<f64>,
    pub atom_number_raw: f64,
    pub atom_number_enhanced: f64,
}

/// Sample mean and sample (n - 1) standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub stddev: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "series statistics need at least 2 values, got {}",
                values.len()
            )));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        Ok(Self {
            mean,
            stddev: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub fwhm_px: MeanStd,
    pub fwhm_um: Option<MeanStd>,
    pub temperature_nk: Option<MeanStd>,
    pub atom_number_raw: MeanStd,
    pub atom_number_enhanced: MeanStd,
}

fn optional_stats(values: Vec<Option<f64>>) -> Result<Option<MeanStd>> {
    values
        .into_iter()
        .collect::<Option<Vec<f64>>>()
        .map(|v| MeanStd::of(&v))
        .transpose()
}

pub fn shot_series_stats(shots: &[ShotMetrics]) -> Result<SeriesStats> {
    if shots.len() < 2 {
        return Err(Error::invalid(format!(
            "series statistics need at least 2 shots, got {}",
            shots.len()
        )));
    }
    let col = |f: fn(&ShotMetrics) -> f64| shots.iter().map(f).collect::<Vec<_>>();
    Ok(SeriesStats {
        fwhm_px: MeanStd::of(&col(|s| s.fwhm_px))?,
        fwhm_um: optional_stats(shots.iter().map(|s| s.fwhm_um).collect())?,
        temperature_nk: optional_stats(shots.iter().map(|s| s.temperature_nk).collect())?,
        atom_number_raw: MeanStd::of(&col(|s| s.atom_number_raw))?,
        atom_number_enhanced: MeanStd::of(&col(|s| s.atom_number_enhanced))?,
    })
}

/// Ballistic expansion `FWHM^2(t) = FWHM_0^2 + 8 ln 2 (k_B T / m) t^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionFit {
    pub temperature_k: f64,
    /// Slope of `FWHM^2` against `t^2`, in m^2/s^2.
    pub slope: f64,
    pub fwhm0_sq: f64,
}

/// Temperature from the least-squares line of `FWHM^2` (meters) on `t^2`.
pub fn temperature_from_expansion(
    delays_s: &[f64],
    fwhm_m: &[f64],
    atom_mass_kg: f64,
    boltzmann_k: f64,
) -> Result<ExpansionFit> {
    if delays_s.len() != fwhm_m.len() {
        return Err(Error::invalid("delay and FWHM series differ in length"));
    }
    let xs: Vec<f64> = delays_s.iter().map(|t| t * t).collect();
    let ys: Vec<f64> = fwhm_m.iter().map(|f| f * f).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if xs.len() < 2 || !(sxx > 0.0) {
        return Err(Error::invalid("temperature fit needs at least two distinct delays"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok(ExpansionFit {
        temperature_k: atom_mass_kg * slope / (8.0 * std::f64::consts::LN_2 * boltzmann_k),
        slope,
        fwhm0_sq: my - slope * mx,
    })
}
