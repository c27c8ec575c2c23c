//! End-to-end acceptance criteria. Runs as a plain binary so that each
//! criterion prints exactly one PASS or FAIL line; exits nonzero on any FAIL.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use atomshadow_core::campaign::{run_campaign, CampaignConfig};
use atomshadow_core::filter::{convolve_separable, convolve_with_sigma_map, mdl_best_sigma, mdl_objective, MdlConfig};
use atomshadow_core::gray::{solve_gray_params, GrayParams};
use atomshadow_core::image::{compute_optical_density, ImageGrid};
use atomshadow_core::metrics::{
    fwhm_from_sigma, sigma_from_fwhm, temperature_from_fwhm, temperature_from_sigma, Length, PhysicalContext,
    FWHM_PER_SIGMA,
};
use atomshadow_core::pipeline::{analyze, enhance, EnhanceConfig};
use atomshadow_core::sensorsim::{simulate_frame, simulate_triplet, CloudModel, Seed, SensorModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cloud(amplitude: f64, sigma: f64) -> CloudModel {
    CloudModel {
        amplitude,
        center_x: 150.0,
        center_y: 150.0,
        sigma_x: sigma,
        sigma_y: sigma,
        baseline_light: 2000.0,
    }
}

fn noisy_od(c: &CloudModel, seed: u64) -> ImageGrid {
    let tri = simulate_triplet(c, 301, 301, &SensorModel::default(), Seed(seed)).expect("simulate");
    compute_optical_density(&tri, 1e-6).expect("od").image
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn sample_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (
        mean,
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt(),
    )
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let spent = start.elapsed();
    if spent <= limit {
        Ok(())
    } else {
        Err(format!("took {spent:.1?}, limit {limit:?}"))
    }
}

fn background_suppression() -> Outcome {
    let start = Instant::now();
    let od = noisy_od(&cloud(1.0, 8.5), 1);
    let e = enhance(&od, &EnhanceConfig::default()).map_err(|e| e.to_string())?;
    within(start, Duration::from_secs(30))?;
    let b = &e.background;
    let detail = format!(
        "raw stddev {:.4}, filtered {:.4} ({:.1}x), enhanced mean {:.4}",
        b.raw.stddev,
        b.filtered.stddev,
        b.suppression(),
        b.enhanced.mean
    );
    check(
        (0.030..=0.035).contains(&b.raw.stddev) && b.suppression() >= 5.0 && b.enhanced.mean <= 0.03,
        detail,
    )
}

fn structure_preservation() -> Outcome {
    let start = Instant::now();
    let c = cloud(1.0, 8.5);
    let truth = FWHM_PER_SIGMA * c.sigma_x;
    let mut errors = Vec::new();
    for seed in 0..20 {
        let od = noisy_od(&c, 500 + seed);
        let e = enhance(&od, &EnhanceConfig::default()).map_err(|e| e.to_string())?;
        let a = analyze(&od, &e, None).map_err(|e| e.to_string())?;
        errors.push(((a.fwhm_enhanced_px - truth) / truth).abs());
    }
    let med = median(errors);
    let camp = run_campaign(&CampaignConfig::default(), &EnhanceConfig::default(), 1).map_err(|e| e.to_string())?;
    within(start, Duration::from_secs(180))?;
    let (t_raw, t_enh, t_in) = (
        camp.temperature_raw_nk,
        camp.temperature_enhanced_nk,
        camp.temperature_injected_nk,
    );
    let diff = ((t_enh - t_raw) / t_raw).abs();
    let detail = format!(
        "median FWHM error {:.2}%, T raw {t_raw:.1} nK, enhanced {t_enh:.1} nK, injected {t_in} nK, difference {:.2}%",
        100.0 * med,
        100.0 * diff
    );
    let near = |t: f64| ((t - t_in) / t_in).abs() <= 0.10;
    check(med <= 0.03 && diff <= 0.10 && near(t_raw) && near(t_enh), detail)
}

fn particle_number_accuracy() -> Outcome {
    let start = Instant::now();
    let c = cloud(1.0, 6.0);
    let ctx = PhysicalContext::rb87(0.01, Some(16e-6));
    let (mut raw, mut enh) = (Vec::new(), Vec::new());
    for seed in 0..50 {
        let od = noisy_od(&c, 1000 + seed);
        let e = enhance(&od, &EnhanceConfig::default()).map_err(|e| e.to_string())?;
        let a = analyze(&od, &e, Some(&ctx)).map_err(|e| e.to_string())?;
        raw.push(a.atom_number_raw.ok_or("no raw atom number")?);
        enh.push(a.atom_number_enhanced.ok_or("no enhanced atom number")?);
    }
    within(start, Duration::from_secs(300))?;
    let ((m_raw, s_raw), (m_enh, s_enh)) = (sample_std(&raw), sample_std(&enh));
    let agree = ((m_enh - m_raw) / m_raw).abs();
    let detail = format!(
        "stddev raw {s_raw:.0}, enhanced {s_enh:.0} ({:.1}x), means differ by {:.2}%",
        s_raw / s_enh,
        100.0 * agree
    );
    check(s_enh <= s_raw / 5.0 && agree <= 0.03, detail)
}

fn mdl_oracle() -> Outcome {
    let cfg = MdlConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = 0;
    for _ in 0..100 {
        let (w, h) = (rng.random_range(11..48), rng.random_range(11..48));
        let img = ImageGrid::from_fn(w, h, |_, _| rng.random_range(0.0..1.0));
        let center = (rng.random_range(0..w), rng.random_range(0..h));
        let mut best = (f64::INFINITY, f64::NAN);
        for &s in cfg.sigma_grid() {
            let v = mdl_objective(&img, center, s, &cfg).map_err(|e| e.to_string())?;
            if v < best.0 {
                best = (v, s);
            }
        }
        let got = mdl_best_sigma(&img, center, &cfg).map_err(|e| e.to_string())?;
        if got.to_bits() != best.1.to_bits() {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("{mismatches} of 100 cases differ from the exhaustive argmin"),
    )
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - 1 - i };
    }
    i as usize
}

fn direct_2d(img: &ImageGrid, sigma: f64) -> ImageGrid {
    let r = (4.0 * sigma).ceil() as isize;
    let mut taps = Vec::new();
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            taps.push((dx, dy, w));
            total += w;
        }
    }
    ImageGrid::from_fn(img.width(), img.height(), |x, y| {
        taps.iter()
            .map(|&(dx, dy, w)| {
                w * img.get(
                    mirror(x as isize + dx, img.width()),
                    mirror(y as isize + dy, img.height()),
                )
            })
            .sum::<f64>()
            / total
    })
}

fn max_rel(a: &ImageGrid, b: &ImageGrid) -> f64 {
    let scale = b.pixels().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

fn convolution_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_direct, mut worst_map) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let img = ImageGrid::from_fn(32, 32, |_, _| rng.random_range(0.0..1.0));
        let sigma = rng.random_range(0.3..5.0);
        let sep = convolve_separable(&img, sigma).map_err(|e| e.to_string())?;
        worst_direct = worst_direct.max(max_rel(&sep, &direct_2d(&img, sigma)));
        let map = ImageGrid::filled(32, 32, sigma);
        let varying = convolve_with_sigma_map(&img, &map).map_err(|e| e.to_string())?;
        worst_map = worst_map.max(max_rel(&varying, &sep));
    }
    check(
        worst_direct <= 1e-10 && worst_map <= 1e-10,
        format!("separable vs direct {worst_direct:.1e}, constant map vs separable {worst_map:.1e}"),
    )
}

fn noise_laws() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    let cases = [(1.0, 0.0, 100.0, 0.0, 3.0, 1.0), (2.5, 7.0, 400.0, 30.0, 5.0, 2.0)];
    for (k, dark, irr, mu, read, q) in cases {
        let model = SensorModel {
            gain_k: k,
            dark_mean: dark,
            dark_std: 0.0,
            read_mu: mu,
            read_sigma: read,
            quant_step_q: q,
            clip_max: 65535.0,
            shot_noise: true,
        };
        let flat = ImageGrid::filled(1000, 1000, irr);
        let frame = simulate_frame(&flat, &model, Seed(31)).map_err(|e| e.to_string())?;
        let n = frame.len() as f64;
        let mean = frame.pixels().iter().sum::<f64>() / n;
        let var = frame.pixels().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let want_mean = k * (irr + dark) + mu;
        let want_var = k * k * (irr + dark) + read * read + q * q / 12.0;
        let se = (var / n).sqrt();
        let z = (mean - want_mean).abs() / se;
        let dv = ((var - want_var) / want_var).abs();
        ok &= z <= 3.0 && dv <= 0.02;
        details.push(format!(
            "K={k}: mean off by {z:.2} SE, variance off by {:.2}%",
            100.0 * dv
        ));
    }
    check(ok, details.join("; "))
}

fn gray_checks(p: &GrayParams) -> Result<(f64, bool, bool), String> {
    let arc = |g: f64| p.b + (p.r * p.r - (g - p.a).powi(2)).sqrt();
    let power = |g: f64| p.m * g.powf(p.gamma);
    let jump = (power(p.g_l) - arc(p.g_l)).abs().max((arc(p.g_h) - p.g_h).abs());
    let mut identity = true;
    let mut monotone = true;
    let mut prev = f64::NEG_INFINITY;
    for i in 0..=10_000 {
        let g = i as f64 / 10_000.0;
        let y = p.map(g);
        monotone &= y >= prev;
        prev = y;
        if g >= p.g_h {
            identity &= y == g;
        }
    }
    Ok((jump, identity, monotone))
}

fn continuity() -> Outcome {
    let od = noisy_od(&cloud(1.0, 8.5), 3);
    let e = enhance(&od, &EnhanceConfig::default()).map_err(|e| e.to_string())?;
    let (seg, field) = (&e.adaptive.segmentation, &e.adaptive.field);
    let prof = &field.profile;
    let breakpoints_exact = prof.value(seg.r_s) == field.sigma_s
        && prof.value(seg.r_m) == field.sigma_m
        && prof.value(seg.r_e) == field.sigma_e
        && field.sigma_m == 0.5 * (field.sigma_s + field.sigma_e);

    let mut params = vec![e.gray];
    for (g_l, g_h) in [(0.05, 0.2), (0.1, 0.6), (0.3, 0.9), (0.02, 0.05)] {
        params.push(solve_gray_params(g_l, g_h, 0.5).map_err(|e| e.to_string())?);
    }
    let mut worst_jump = 0.0f64;
    let (mut identity, mut monotone) = (true, true);
    for p in &params {
        let (jump, id, mono) = gray_checks(p)?;
        worst_jump = worst_jump.max(jump);
        identity &= id;
        monotone &= mono;
    }
    check(
        breakpoints_exact && worst_jump <= 1e-9 && identity && monotone,
        format!(
            "breakpoints exact {breakpoints_exact}, largest knee jump {worst_jump:.1e}, identity {identity}, monotone {monotone}"
        ),
    )
}

fn temperature_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut worst_trip, mut worst_route) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let sigma = rng.random_range(1e-6..1e-3);
        let back = sigma_from_fwhm(fwhm_from_sigma(sigma).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        worst_trip = worst_trip.max(((back - sigma) / sigma).abs());
        let ctx = PhysicalContext {
            atom_mass_kg: rng.random_range(1e-26..1e-24),
            boltzmann_k: 1.380649e-23,
            tof_time_s: rng.random_range(1e-3..5e-2),
            pixel_pitch_m: None,
            cross_section_m2: None,
        };
        let a = temperature_from_sigma(Length::Meters(sigma), &ctx).map_err(|e| e.to_string())?;
        let b = temperature_from_fwhm(Length::Meters(FWHM_PER_SIGMA * sigma), &ctx).map_err(|e| e.to_string())?;
        worst_route = worst_route.max(((a - b) / a).abs());
    }
    let ctx = PhysicalContext::rb87(0.020, None);
    let t = temperature_from_sigma(Length::Meters(50e-6), &ctx).map_err(|e| e.to_string())?;
    // 1.4431606e-25 kg * (50e-6 m)^2 / (2 * 1.380649e-23 J/K * (0.020 s)^2)
    let by_hand = 1.443_160_6e-25 * 2.5e-9 / (2.0 * 1.380_649e-23 * 4.0e-4);
    let worked = ((t - 32.66e-9) / 32.66e-9).abs();
    let hand = ((t - by_hand) / by_hand).abs();
    check(
        worst_trip <= 1e-12 && worst_route <= 1e-12 && worked <= 1e-3 && hand <= 1e-12,
        format!(
            "round trip {worst_trip:.1e}, two routes {worst_route:.1e}, worked value {:.3} nK",
            t * 1e9
        ),
    )
}

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_atomshadow"))
        .args(args)
        .current_dir(dir)
        .env_remove("ATOMSHADOW_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "atomshadow {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn report(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn enhanced_std(component: &Value) -> f64 {
    component["background"]["enhanced"]["stddev"]
        .as_f64()
        .unwrap_or(f64::NAN)
}

fn robustness() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let sim_enhance = |name: &str, clouds: &str, fringe: &str| -> Result<Value, String> {
        let sim = format!("{name}_sim");
        let mut args = vec![
            "simulate",
            "--output-dir",
            &sim,
            "--seed",
            "1",
            "--simulate.clouds",
            clouds,
        ];
        if !fringe.is_empty() {
            args.extend(["--simulate.fringe", fringe]);
        }
        cli(dir, &args)?;
        let out = format!("{name}_enh");
        let frames: Vec<String> = ["atoms", "light", "dark"]
            .iter()
            .map(|f| format!("{sim}/{f}.f32"))
            .collect();
        cli(
            dir,
            &[
                "enhance",
                "--output-dir",
                &out,
                "--input.atoms",
                &frames[0],
                "--input.light",
                &frames[1],
                "--input.dark",
                &frames[2],
            ],
        )?;
        report(&dir.join(&out).join("report.json"))
    };

    let fringe = sim_enhance(
        "fringe",
        r#"[{"amplitude":2.5,"center_x":150,"center_y":150,"sigma_x":8.5,"sigma_y":8.5}]"#,
        r#"{"amplitude":0.1,"period":25,"angle_rad":0.6,"phase":0.3}"#,
    )?;
    let fringe_std = enhanced_std(&fringe["results"]["components"][0]);

    let truth = [(90.0, 8.0), (210.0, 6.0)];
    let pair = sim_enhance(
        "pair",
        r#"[{"amplitude":1.0,"center_x":90,"center_y":150,"sigma_x":8,"sigma_y":8},
            {"amplitude":0.8,"center_x":210,"center_y":150,"sigma_x":6,"sigma_y":6}]"#,
        "",
    )?;
    let comps = pair["results"]["components"].as_array().cloned().unwrap_or_default();
    let mut pair_std = 0.0f64;
    let mut worst_fwhm = 0.0f64;
    let mut matched = 0;
    for (x, sigma) in truth {
        let found = comps
            .iter()
            .find(|c| c["center"][0].as_f64().is_some_and(|cx| (cx - x).abs() < 10.0));
        if let Some(c) = found {
            matched += 1;
            pair_std = pair_std.max(enhanced_std(c));
            let fwhm = c["metrics"]["fwhm_enhanced_px"].as_f64().unwrap_or(f64::NAN);
            let t = FWHM_PER_SIGMA * sigma;
            worst_fwhm = worst_fwhm.max(((fwhm - t) / t).abs());
        }
    }
    check(
        fringe_std <= 0.03 && matched == 2 && pair_std <= 0.03 && worst_fwhm <= 0.05,
        format!(
            "fringe background stddev {fringe_std:.4}; two clouds found {matched}, background stddev {pair_std:.4}, worst FWHM error {:.2}%",
            100.0 * worst_fwhm
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("AC1", "background suppression", background_suppression),
        ("AC2", "structure preservation", structure_preservation),
        ("AC3", "particle-number accuracy", particle_number_accuracy),
        ("AC4", "MDL oracle equivalence", mdl_oracle),
        ("AC5", "convolution oracles", convolution_oracles),
        ("AC6", "noise-model laws", noise_laws),
        ("AC7", "sigma-field and gray-transform continuity", continuity),
        ("AC8", "FWHM and temperature consistency", temperature_consistency),
        ("AC9", "robustness fixtures", robustness),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
