//! The five subcommands. Each writes its files and a `report.json` into the
//! configured output directory and returns the report path.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use atomshadow_core::campaign::run_campaign;
use atomshadow_core::filter::find_center;
use atomshadow_core::image::{
    compute_optical_density, load_image, normalize_unit, ImageFormat, ImageGrid, OdCounters, RawTriplet,
};
use atomshadow_core::metrics::{
    particle_number, temperature_from_fwhm, GaussFit1D, Length, PhysicalContext, ShotMetrics,
};
use atomshadow_core::pipeline::{analyze, center_row_fit, enhance_components, Enhancement};
use atomshadow_core::sensorsim::{simulate_triplet_from_od, Seed, QUANTIZATION_CONVENTION};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::report::{sha256_file, RunWriter};

fn format_of(cfg: &RunConfig, path: &Path) -> Result<ImageFormat> {
    Ok(match cfg.input.format {
        Some(f) => f,
        None => ImageFormat::from_path(path)?,
    })
}

fn read(cfg: &RunConfig, path: &Path, w: &mut RunWriter) -> Result<ImageGrid> {
    let image = load_image(path, format_of(cfg, path)?).with_context(|| format!("loading {}", path.display()))?;
    w.input(path)?;
    Ok(image)
}

fn read_triplet(cfg: &RunConfig, w: &mut RunWriter) -> Result<RawTriplet> {
    let i = &cfg.input;
    let (Some(atoms), Some(light), Some(dark)) = (&i.atoms, &i.light, &i.dark) else {
        bail!("input.atoms, input.light and input.dark are all required");
    };
    let triplet = RawTriplet::new(read(cfg, atoms, w)?, read(cfg, light, w)?, read(cfg, dark, w)?)?;
    Ok(triplet)
}

fn od_from_triplet(cfg: &RunConfig, w: &mut RunWriter) -> Result<(ImageGrid, OdCounters)> {
    let triplet = read_triplet(cfg, w)?;
    let od = compute_optical_density(&triplet, cfg.clamp_floor)?;
    let c = od.counters;
    if c.clamped_pixels > 0 {
        w.warn(format!("{} pixels had their transmission clamped", c.clamped_pixels));
    }
    if c.unlit_pixels > 0 {
        w.warn(format!(
            "{} pixels had no probe light and were set to zero",
            c.unlit_pixels
        ));
    }
    Ok((od.image.with_pixel_pitch(triplet.atoms.pixel_pitch_um()), c))
}

/// The configured OD image, or one computed from the configured triplet.
fn input_od(cfg: &RunConfig, w: &mut RunWriter) -> Result<(ImageGrid, Option<OdCounters>)> {
    match &cfg.input.od {
        Some(path) => Ok((read(cfg, path, w)?, None)),
        None => od_from_triplet(cfg, w).map(|(od, c)| (od, Some(c))),
    }
}

fn context(cfg: &RunConfig, image: &ImageGrid) -> Result<PhysicalContext> {
    cfg.physics.context(image.pixel_pitch_um())
}

fn pitch_um(ctx: &PhysicalContext) -> Option<f64> {
    ctx.pixel_pitch_m.map(|p| p * 1e6)
}

pub fn od(command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let mut w = RunWriter::new(command, cfg)?;
    let (od, counters) = od_from_triplet(cfg, &mut w)?;
    w.image("od", &od, cfg.output_format)?;
    let (min, max) = od.min_max();
    w.results(json!({
        "width": od.width(),
        "height": od.height(),
        "pixel_pitch_um": od.pixel_pitch_um(),
        "clamp_floor": cfg.clamp_floor,
        "clamped_pixels": counters.clamped_pixels,
        "unlit_pixels": counters.unlit_pixels,
        "od_min": min,
        "od_max": max,
    }))?;
    w.finish()
}

#[derive(Serialize)]
struct CrossSectionRow {
    axis: &'static str,
    position: usize,
    raw: f64,
    filtered: f64,
    enhanced: f64,
}

fn cross_sections(e: &Enhancement) -> Vec<CrossSectionRow> {
    let a = &e.adaptive;
    let seg = &a.segmentation;
    let cx = (seg.center_x.round().max(0.0) as usize).min(seg.width - 1);
    let cy = (seg.center_y.round().max(0.0) as usize).min(seg.height - 1);
    let row = (0..seg.width).map(|x| CrossSectionRow {
        axis: "x",
        position: x,
        raw: a.raw_crop.get(x, cy),
        filtered: a.filtered.get(x, cy),
        enhanced: e.enhanced.get(x, cy),
    });
    let col = (0..seg.height).map(|y| CrossSectionRow {
        axis: "y",
        position: y,
        raw: a.raw_crop.get(cx, y),
        filtered: a.filtered.get(cx, y),
        enhanced: e.enhanced.get(cx, y),
    });
    row.chain(col).collect()
}

#[derive(Serialize)]
struct HistogramRow {
    bin_low: f64,
    bin_high: f64,
    count: usize,
}

/// Counts of `values` in `bins` equal bins over `[lo, hi]`.
fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<HistogramRow> {
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramRow {
            bin_low: lo + i as f64 * width,
            bin_high: lo + (i + 1) as f64 * width,
            count,
        })
        .collect()
}

fn write_histograms(w: &mut RunWriter, e: &Enhancement, suffix: &str, bins: usize) -> Result<()> {
    let mask = &e.adaptive.segmentation.mask_k;
    let stages = [
        ("raw", &e.adaptive.raw_crop),
        ("filtered", &e.adaptive.filtered),
        ("enhanced", &e.enhanced),
    ];
    let values: Vec<Vec<f64>> = stages
        .iter()
        .map(|(_, img)| mask.iter().map(|&i| img.pixels()[i]).collect())
        .collect();
    let lo = values.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    for ((name, _), v) in stages.iter().zip(&values) {
        w.csv(
            &format!("background_histogram_{name}{suffix}.csv"),
            &histogram(v, lo, hi, bins),
        )?;
    }
    Ok(())
}

fn to_nk(kelvin: Option<f64>) -> Option<f64> {
    kelvin.map(|t| t * 1e9)
}

fn component_results(
    od: &ImageGrid,
    e: &Enhancement,
    ctx: &PhysicalContext,
    with_temperature: bool,
) -> Result<serde_json::Value> {
    let a = &e.adaptive;
    let seg = &a.segmentation;
    let m = analyze(od, e, Some(ctx))?;
    let keep = |t: Option<f64>| if with_temperature { to_nk(t) } else { None };
    let pitch = pitch_um(ctx);
    Ok(json!({
        "center": a.center,
        "crop_origin": a.crop_origin,
        "segmentation": {
            "center_x": seg.center_x,
            "center_y": seg.center_y,
            "r_s": seg.r_s,
            "r_m": seg.r_m,
            "r_e": seg.r_e,
            "core_pixels": seg.mask_j.len(),
            "ring_pixels": seg.mask_l.len(),
            "background_pixels": seg.mask_k.len(),
            "fit": seg.fit,
        },
        "sigma": {
            "sigma_s": a.field.sigma_s,
            "sigma_m": a.field.sigma_m,
            "sigma_e": a.field.sigma_e,
            "profile": a.field.profile,
        },
        "calibration": a.calibration,
        "knees": e.knees,
        "gray": e.gray,
        "gray_out_of_range": e.gray_out_of_range,
        "background": {
            "raw": e.background.raw,
            "filtered": e.background.filtered,
            "enhanced": e.background.enhanced,
            "suppression": e.background.suppression(),
            "stddev_convention": "population",
        },
        "metrics": {
            "fwhm_raw_px": m.fwhm_raw_px,
            "fwhm_enhanced_px": m.fwhm_enhanced_px,
            "fwhm_raw_um": pitch.map(|p| p * m.fwhm_raw_px),
            "fwhm_enhanced_um": pitch.map(|p| p * m.fwhm_enhanced_px),
            "atom_number_raw": m.atom_number_raw,
            "atom_number_enhanced": m.atom_number_enhanced,
            "temperature_raw_nK": keep(m.temperature_raw_k),
            "temperature_enhanced_nK": keep(m.temperature_enhanced_k),
        },
    }))
}

pub fn enhance(command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let enh = cfg.enhance_config()?;
    let mut w = RunWriter::new(command, cfg)?;
    let (od, counters) = input_od(cfg, &mut w)?;
    let ctx = context(cfg, &od)?;
    let with_temperature = cfg.physics.tof_ms.is_some();
    if !with_temperature {
        log::info!("no physics.tof_ms configured; temperatures are not reported");
    }

    let outcomes = enhance_components(&od, &enh)?;
    let many = outcomes.len() > 1;
    if outcomes.iter().all(|o| o.is_err()) {
        let first = outcomes
            .into_iter()
            .find_map(|o| o.err())
            .expect("at least one component");
        return Err(first.into());
    }
    let mut components = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let suffix = if many { format!("_c{i}") } else { String::new() };
        let e = match outcome {
            Ok(e) => e,
            Err(err) => {
                w.warn(format!("component {i} skipped: {err}"));
                components.push(json!({ "component": i, "error": err.to_string() }));
                continue;
            }
        };
        for msg in &e.warnings {
            w.warn(if many {
                format!("component {i}: {msg}")
            } else {
                msg.clone()
            });
        }
        for (stage, secs) in &e.timings.0 {
            w.time(format!("{stage}{suffix}"), *secs);
        }
        w.image(&format!("filtered{suffix}"), &e.adaptive.filtered, cfg.output_format)?;
        w.image(&format!("enhanced{suffix}"), &e.enhanced, cfg.output_format)?;
        w.image(
            &format!("sigma_field{suffix}"),
            &e.adaptive.field.sigmas,
            cfg.output_format,
        )?;
        w.csv(&format!("cross_section{suffix}.csv"), &cross_sections(&e))?;
        write_histograms(&mut w, &e, &suffix, cfg.histogram_bins)?;
        let mut result = component_results(&od, &e, &ctx, with_temperature)?;
        result["component"] = json!(i);
        components.push(result);
    }
    w.results(json!({
        "width": od.width(),
        "height": od.height(),
        "pixel_pitch_um": pitch_um(&ctx),
        "od_counters": counters,
        "components": components,
    }))?;
    w.finish()
}

pub fn simulate(command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let s = &cfg.simulate;
    s.sensor.validate()?;
    let mut w = RunWriter::new(command, cfg)?;
    let mut od = ImageGrid::filled(s.width, s.height, 0.0);
    for cs in &s.clouds {
        let cloud = cs.model(s.baseline_light);
        cloud.validate()?;
        if !cloud.fits_inside(s.width, s.height) {
            w.warn(format!(
                "cloud at ({}, {}) extends past the {}x{} frame",
                cs.center_x, cs.center_y, s.width, s.height
            ));
        }
        let field = cloud.od_field(s.width, s.height)?;
        let sum = od.pixels().iter().zip(field.pixels()).map(|(a, b)| a + b).collect();
        od = od.with_pixels(sum)?;
    }
    if let Some(fringe) = &s.fringe {
        od = fringe.add_to(&od)?;
    }
    let seed = Seed(cfg.seed);
    let tri = simulate_triplet_from_od(&od, s.baseline_light, &s.sensor, seed)?;
    let fmt = cfg.output_format;
    let mut files = serde_json::Map::new();
    for (name, image) in [
        ("atoms", &tri.atoms),
        ("light", &tri.light),
        ("dark", &tri.dark),
        ("od_truth", &od),
    ] {
        let path = w.image(name, &image.clone().with_pixel_pitch(s.pixel_pitch_um), fmt)?;
        files.insert(
            name.to_string(),
            json!({ "path": path.file_name().map(|n| n.to_string_lossy()), "sha256": sha256_file(&path)? }),
        );
    }
    let manifest = json!({
        "width": s.width,
        "height": s.height,
        "baseline_light": s.baseline_light,
        "clouds": s.clouds,
        "fringe": s.fringe,
        "sensor": s.sensor,
        "pixel_pitch_um": s.pixel_pitch_um,
        "format": fmt,
        "seed": cfg.seed,
        "frame_seeds": { "atoms": seed.frame(1).0, "light": seed.frame(2).0, "dark": seed.frame(3).0 },
        "quantization_convention": QUANTIZATION_CONVENTION,
        "files": files,
    });
    w.json("manifest.json", &manifest)?;
    w.results(&manifest)?;
    w.finish()
}

#[derive(Serialize)]
struct DelayRow {
    delay_ms: f64,
    shots_ok: usize,
    truth_fwhm_px: f64,
    fwhm_raw_px_mean: f64,
    fwhm_raw_px_std: f64,
    fwhm_enhanced_px_mean: f64,
    fwhm_enhanced_px_std: f64,
    atom_number_raw_mean: f64,
    atom_number_raw_std: f64,
    atom_number_enhanced_mean: f64,
    atom_number_enhanced_std: f64,
}

pub fn campaign(command: &str, cfg: &RunConfig, jobs: usize) -> Result<PathBuf> {
    let enh = cfg.enhance_config()?;
    let camp = cfg.campaign_config();
    let mut w = RunWriter::new(command, cfg)?;
    let started = std::time::Instant::now();
    let result = run_campaign(&camp, &enh, jobs)?;
    w.time("campaign", started.elapsed().as_secs_f64());

    std::fs::create_dir_all(w.dir().join("shots"))?;
    let mut rows: Vec<ShotMetrics> = Vec::new();
    for shot in &result.shots {
        w.json(&format!("shots/{}.json", shot.shot_id()), shot)?;
        match (&shot.error, shot.metrics(camp.pixel_pitch_um)) {
            (None, Some(m)) => rows.push(m),
            (err, _) => w.warn(format!(
                "shot {} failed: {}",
                shot.shot_id(),
                err.as_deref().unwrap_or("no analysis")
            )),
        }
        for msg in &shot.warnings {
            log::info!("shot {}: {msg}", shot.shot_id());
        }
    }
    w.csv("shots.csv", &rows)?;
    let delays: Vec<DelayRow> = result
        .delays
        .iter()
        .map(|d| DelayRow {
            delay_ms: d.delay_ms,
            shots_ok: d.shots_ok,
            truth_fwhm_px: d.truth_fwhm_px,
            fwhm_raw_px_mean: d.fwhm_raw_px.mean,
            fwhm_raw_px_std: d.fwhm_raw_px.stddev,
            fwhm_enhanced_px_mean: d.fwhm_enhanced_px.mean,
            fwhm_enhanced_px_std: d.fwhm_enhanced_px.stddev,
            atom_number_raw_mean: d.atom_number_raw.mean,
            atom_number_raw_std: d.atom_number_raw.stddev,
            atom_number_enhanced_mean: d.atom_number_enhanced.mean,
            atom_number_enhanced_std: d.atom_number_enhanced.stddev,
        })
        .collect();
    w.csv("delays.csv", &delays)?;
    let failed = result.shots.iter().filter(|s| s.error.is_some()).count();
    let diff = (result.temperature_enhanced_nk - result.temperature_raw_nk) / result.temperature_raw_nk;
    w.results(json!({
        "shots_total": result.shots.len(),
        "shots_failed": failed,
        "temperature_injected_nK": result.temperature_injected_nk,
        "temperature_raw_nK": result.temperature_raw_nk,
        "temperature_enhanced_nK": result.temperature_enhanced_nk,
        "temperature_relative_difference": diff,
        "delays": result.delays,
        "error_bar_convention": "sample (n - 1) standard deviation",
    }))?;
    w.finish()
}

fn fit_json(fit: &GaussFit1D) -> serde_json::Value {
    json!({ "fit": fit, "fwhm_px": fit.fwhm() })
}

pub fn metrics(command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let mut w = RunWriter::new(command, cfg)?;
    let (od, _) = input_od(cfg, &mut w)?;
    let ctx = context(cfg, &od)?;
    let with_temperature = cfg.physics.tof_ms.is_some();
    let shot_id = cfg
        .input
        .od
        .as_ref()
        .or(cfg.input.atoms.as_ref())
        .and_then(|p| p.file_stem())
        .map_or_else(|| "shot".to_string(), |s| s.to_string_lossy().into_owned());

    let (normalized, _) = normalize_unit(&od)?;
    let (cx, cy) = find_center(&normalized, cfg.log_sigma)?;
    let row = center_row_fit(&od, cy)?;
    let transposed = ImageGrid::from_fn(od.height(), od.width(), |x, y| od.get(y, x));
    let col = center_row_fit(&transposed, cx)?;
    let fwhm_px = row.fwhm();
    let pitch = pitch_um(&ctx);
    let temperature_nk = match (with_temperature, pitch) {
        (true, Some(_)) => Some(temperature_from_fwhm(Length::Pixels(fwhm_px), &ctx)? * 1e9),
        _ => None,
    };
    let counts = ctx.pixel_pitch_m.is_some() && ctx.cross_section_m2.is_some();
    let atom_number_raw = if counts {
        Some(particle_number(&od, &ctx, None)?)
    } else {
        None
    };

    let enh = cfg.enhance_config()?;
    let atom_number_enhanced = match enhance_components(&od, &enh)?.into_iter().next() {
        Some(Ok(e)) => analyze(&od, &e, Some(&ctx))?.atom_number_enhanced,
        Some(Err(err)) => {
            w.warn(format!("enhancement skipped: {err}"));
            None
        }
        None => None,
    };
    if !counts {
        w.warn("atom numbers need a pixel pitch and a cross-section");
    }
    let row_metrics = ShotMetrics {
        shot_id,
        fwhm_px,
        fwhm_um: pitch.map(|p| p * fwhm_px),
        temperature_nk,
        atom_number_raw: atom_number_raw.unwrap_or(f64::NAN),
        atom_number_enhanced: atom_number_enhanced.unwrap_or(f64::NAN),
    };
    w.csv("metrics.csv", std::slice::from_ref(&row_metrics))?;
    w.results(json!({
        "center": [cx, cy],
        "row": fit_json(&row),
        "column": fit_json(&col),
        "pixel_pitch_um": pitch,
        "metrics": row_metrics,
    }))?;
    w.finish()
}
