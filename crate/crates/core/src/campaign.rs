//! Synthetic time-of-flight campaigns: many noisy shots per delay, analyzed
//! with and without enhancement.
//!
//! Clouds expand ballistically, `sigma^2(t) = sigma_0^2 + (k_B T / m) t^2`,
//! with the atom number held fixed so the peak OD falls as the cloud grows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::compute_optical_density;
use crate::metrics::{
    temperature_from_expansion, MeanStd, PhysicalContext, ShotMetrics, BOLTZMANN_K, FWHM_PER_SIGMA,
    RB87_CROSS_SECTION_M2, RB87_MASS_KG,
};
use crate::pipeline::{analyze, enhance, EnhanceConfig, ShotAnalysis};
use crate::sensorsim::{simulate_triplet, CloudModel, Seed, SensorModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignConfig {
    /// Side of the square camera frame, in pixels.
    pub frame_size: usize,
    pub delays_ms: Vec<f64>,
    pub shots_per_delay: usize,
    pub temperature_nk: f64,
    /// Cloud width at release.
    pub sigma0_um: f64,
    /// Object-space size of one pixel.
    pub pixel_pitch_um: f64,
    /// Integrated optical density of every cloud, in OD x pixel^2.
    pub integrated_od: f64,
    /// Probe photoelectrons per pixel.
    pub baseline_light: f64,
    pub atom_mass_kg: f64,
    pub cross_section_m2: f64,
    pub sensor: SensorModel,
    pub seed: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            frame_size: 301,
            delays_ms: vec![6.0, 8.0, 10.0, 12.0, 14.0],
            shots_per_delay: 10,
            temperature_nk: 400.0,
            sigma0_um: 50.0,
            pixel_pitch_um: 16.0,
            integrated_od: 150.0,
            baseline_light: 2000.0,
            atom_mass_kg: RB87_MASS_KG,
            cross_section_m2: RB87_CROSS_SECTION_M2,
            sensor: SensorModel::default(),
            seed: 0,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.shots_per_delay < 2 {
            return Err(Error::invalid("a campaign needs at least 2 shots per delay"));
        }
        if self.delays_ms.is_empty() || self.delays_ms.iter().any(|d| !positive(*d)) {
            return Err(Error::invalid("delays must be a non-empty list of positive times"));
        }
        let all = [
            self.temperature_nk,
            self.sigma0_um,
            self.pixel_pitch_um,
            self.integrated_od,
            self.baseline_light,
            self.atom_mass_kg,
            self.cross_section_m2,
        ];
        if !all.iter().all(|v| positive(*v)) {
            return Err(Error::invalid("campaign physical parameters must be positive"));
        }
        if self.frame_size < 16 {
            return Err(Error::invalid("campaign frame is too small"));
        }
        self.sensor.validate()
    }

    /// Cloud width in pixels after `delay_ms` of free expansion.
    pub fn sigma_px(&self, delay_ms: f64) -> f64 {
        let t = delay_ms * 1e-3;
        let s0 = self.sigma0_um * 1e-6;
        let v2 = BOLTZMANN_K * self.temperature_nk * 1e-9 / self.atom_mass_kg;
        (s0 * s0 + v2 * t * t).sqrt() / (self.pixel_pitch_um * 1e-6)
    }

    pub fn cloud(&self, delay_ms: f64) -> CloudModel {
        let s = self.sigma_px(delay_ms);
        let c = ((self.frame_size - 1) / 2) as f64;
        CloudModel {
            amplitude: self.integrated_od / (2.0 * std::f64::consts::PI * s * s),
            center_x: c,
            center_y: c,
            sigma_x: s,
            sigma_y: s,
            baseline_light: self.baseline_light,
        }
    }

    pub fn context(&self, delay_ms: f64) -> PhysicalContext {
        PhysicalContext {
            atom_mass_kg: self.atom_mass_kg,
            boltzmann_k: BOLTZMANN_K,
            tof_time_s: delay_ms * 1e-3,
            pixel_pitch_m: Some(self.pixel_pitch_um * 1e-6),
            cross_section_m2: Some(self.cross_section_m2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub delay_index: usize,
    pub delay_ms: f64,
    pub shot: usize,
    pub seed: u64,
    pub truth_fwhm_px: f64,
    pub analysis: Option<ShotAnalysis>,
    pub error: Option<String>,
    pub warnings: Vec<String>,
}

impl ShotRecord {
    pub fn shot_id(&self) -> String {
        format!("d{:02}_s{:03}", self.delay_index, self.shot)
    }

    /// CSV row for a successful shot.
    pub fn metrics(&self, pixel_pitch_um: f64) -> Option<ShotMetrics> {
        let a = self.analysis?;
        Some(ShotMetrics {
            shot_id: self.shot_id(),
            fwhm_px: a.fwhm_enhanced_px,
            fwhm_um: Some(a.fwhm_enhanced_px * pixel_pitch_um),
            temperature_nk: a.temperature_enhanced_k.map(|t| t * 1e9),
            atom_number_raw: a.atom_number_raw.unwrap_or(f64::NAN),
            atom_number_enhanced: a.atom_number_enhanced.unwrap_or(f64::NAN),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelaySummary {
    pub delay_ms: f64,
    pub shots_ok: usize,
    pub truth_fwhm_px: f64,
    pub fwhm_raw_px: MeanStd,
    pub fwhm_enhanced_px: MeanStd,
    pub atom_number_raw: MeanStd,
    pub atom_number_enhanced: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub shots: Vec<ShotRecord>,
    pub delays: Vec<DelaySummary>,
    pub temperature_injected_nk: f64,
    pub temperature_raw_nk: f64,
    pub temperature_enhanced_nk: f64,
}

fn run_shot(cfg: &CampaignConfig, enh: &EnhanceConfig, delay_index: usize, shot: usize) -> ShotRecord {
    let delay_ms = cfg.delays_ms[delay_index];
    let seed = Seed(cfg.seed).shot(delay_index as u64, shot as u64);
    let cloud = cfg.cloud(delay_ms);
    let mut record = ShotRecord {
        delay_index,
        delay_ms,
        shot,
        seed: seed.0,
        truth_fwhm_px: FWHM_PER_SIGMA * cloud.sigma_x,
        analysis: None,
        error: None,
        warnings: Vec::new(),
    };
    let outcome = (|| -> Result<(ShotAnalysis, Vec<String>)> {
        let tri = simulate_triplet(&cloud, cfg.frame_size, cfg.frame_size, &cfg.sensor, seed)?;
        let od = compute_optical_density(&tri, crate::image::DEFAULT_CLAMP_FLOOR)?.image;
        let e = enhance(&od, enh)?;
        let a = analyze(&od, &e, Some(&cfg.context(delay_ms)))?;
        Ok((a, e.warnings))
    })();
    match outcome {
        Ok((a, w)) => {
            record.analysis = Some(a);
            record.warnings = w;
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

fn summarize(cfg: &CampaignConfig, shots: &[ShotRecord]) -> Result<Vec<DelaySummary>> {
    cfg.delays_ms
        .iter()
        .enumerate()
        .map(|(d, &delay_ms)| {
            let ok: Vec<ShotAnalysis> = shots
                .iter()
                .filter(|s| s.delay_index == d)
                .filter_map(|s| s.analysis)
                .collect();
            let col = |f: fn(&ShotAnalysis) -> Option<f64>| -> Result<MeanStd> {
                let v: Vec<f64> = ok.iter().filter_map(f).collect();
                MeanStd::of(&v)
                    .map_err(|_| Error::invalid(format!("fewer than 2 successful shots at delay {delay_ms} ms")))
            };
            Ok(DelaySummary {
                delay_ms,
                shots_ok: ok.len(),
                truth_fwhm_px: FWHM_PER_SIGMA * cfg.sigma_px(delay_ms),
                fwhm_raw_px: col(|a| Some(a.fwhm_raw_px))?,
                fwhm_enhanced_px: col(|a| Some(a.fwhm_enhanced_px))?,
                atom_number_raw: col(|a| a.atom_number_raw)?,
                atom_number_enhanced: col(|a| a.atom_number_enhanced)?,
            })
        })
        .collect()
}

/// Runs every shot with at most `jobs` worker threads. Records come back
/// ordered by (delay, shot) whatever the completion order.
pub fn run_campaign(cfg: &CampaignConfig, enh: &EnhanceConfig, jobs: usize) -> Result<CampaignResult> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    let tasks: Vec<(usize, usize)> = (0..cfg.delays_ms.len())
        .flat_map(|d| (0..cfg.shots_per_delay).map(move |s| (d, s)))
        .collect();
    let shots: Vec<ShotRecord> = pool.install(|| tasks.par_iter().map(|&(d, s)| run_shot(cfg, enh, d, s)).collect());

    let delays = summarize(cfg, &shots)?;
    let pitch_m = cfg.pixel_pitch_um * 1e-6;
    let times: Vec<f64> = delays.iter().map(|d| d.delay_ms * 1e-3).collect();
    let fit = |f: fn(&DelaySummary) -> f64| -> Result<f64> {
        let fwhm: Vec<f64> = delays.iter().map(|d| f(d) * pitch_m).collect();
        Ok(temperature_from_expansion(&times, &fwhm, cfg.atom_mass_kg, BOLTZMANN_K)?.temperature_k * 1e9)
    };
    let (temperature_raw_nk, temperature_enhanced_nk) = if times.len() >= 2 {
        (fit(|d| d.fwhm_raw_px.mean)?, fit(|d| d.fwhm_enhanced_px.mean)?)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(CampaignResult {
        shots,
        delays,
        temperature_injected_nk: cfg.temperature_nk,
        temperature_raw_nk,
        temperature_enhanced_nk,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_law() {
        let cfg = CampaignConfig::default();
        let (s6, s12) = (cfg.sigma_px(6.0), cfg.sigma_px(12.0));
        let s0 = cfg.sigma0_um / cfg.pixel_pitch_um;
        // sigma^2 - sigma_0^2 grows as t^2
        assert!(((s12 * s12 - s0 * s0) / (s6 * s6 - s0 * s0) - 4.0).abs() < 1e-9);
        let c = cfg.cloud(10.0);
        assert!((c.integrated_od() - cfg.integrated_od).abs() < 1e-9);
    }

    #[test]
    fn validation() {
        let cfg = CampaignConfig {
            shots_per_delay: 1,
            ..CampaignConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = CampaignConfig::default();
        cfg.delays_ms.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn noiseless_campaign_agrees_raw_and_enhanced() {
        let cfg = CampaignConfig {
            frame_size: 401,
            delays_ms: vec![8.0, 12.0],
            shots_per_delay: 2,
            pixel_pitch_um: 3.0,
            sensor: SensorModel::noiseless(),
            ..CampaignConfig::default()
        };
        let mut enh = EnhanceConfig::default();
        enh.filter.crop_width = 241;
        let r = run_campaign(&cfg, &enh, 1).unwrap();
        assert_eq!(r.shots.len(), 4);
        for d in &r.delays {
            let rel = (d.fwhm_enhanced_px.mean - d.fwhm_raw_px.mean).abs() / d.fwhm_raw_px.mean;
            assert!(rel < 0.01, "{d:?}");
        }
        let order: Vec<(usize, usize)> = r.shots.iter().map(|s| (s.delay_index, s.shot)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }
}
