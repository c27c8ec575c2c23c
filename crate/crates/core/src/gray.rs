//! Background-suppressing gray-level transform.
//!
//! Levels below the low knee `g_l` follow `m g^gamma`, levels from `g_h` up
//! are left alone, and a circular arc tangent to the identity at `g_h` joins
//! the two with matching slope at `g_l`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::Segmentation;
use crate::image::{ImageGrid, RegionStats};

pub const DEFAULT_KAPPA: f64 = 0.5;
/// Number of extreme values used for each knee.
pub const KNEE_SAMPLES: usize = 10;
const MAX_GAMMA: f64 = 50.0;

/// All parameters of the transform; enough to reproduce it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrayParams {
    pub g_l: f64,
    pub g_h: f64,
    /// Output level at `g_l`.
    pub y1: f64,
    /// Arc center `(a, b)` and radius `r`.
    pub a: f64,
    pub b: f64,
    pub r: f64,
    pub gamma: f64,
    pub m: f64,
    pub kappa: f64,
}

/// Knee levels and the order statistics they came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knees {
    pub g_l: f64,
    pub g_h: f64,
    pub m_p: f64,
    pub s_p: f64,
    pub m_q: f64,
    pub s_q: f64,
    /// The background limit was not below the cloud limit and `g_l` was set
    /// to `g_h / 2`.
    pub fallback: bool,
}

fn extreme_stats(image: &ImageGrid, mask: &[usize], largest: bool, name: &str) -> Result<RegionStats> {
    if mask.len() < KNEE_SAMPLES {
        return Err(Error::Segmentation(format!(
            "region {name} has {} pixels, need at least {KNEE_SAMPLES}",
            mask.len()
        )));
    }
    let mut v: Vec<f64> = mask.iter().map(|&i| image.pixels()[i]).collect();
    v.sort_by(f64::total_cmp);
    let picked = if largest {
        &v[v.len() - KNEE_SAMPLES..]
    } else {
        &v[..KNEE_SAMPLES]
    };
    RegionStats::of_values(picked)
}

/// Knees from a normalized filtered crop: `g_h = max(M_p - 3 S_p, 0)` over
/// the ten darkest core pixels, `g_l = M_q + 3 S_q` over the ten brightest
/// background pixels.
pub fn detect_knees(filtered: &ImageGrid, seg: &Segmentation) -> Result<Knees> {
    let p = extreme_stats(filtered, &seg.mask_j, false, "J")?;
    let q = extreme_stats(filtered, &seg.mask_k, true, "K")?;
    let g_h = (p.mean - 3.0 * p.stddev).max(0.0);
    if !(g_h > 0.0) {
        return Err(Error::Segmentation(
            "cloud core is not separated from zero; no upper knee".into(),
        ));
    }
    let mut g_l = q.mean + 3.0 * q.stddev;
    let fallback = !(g_l > 0.0 && g_l < g_h);
    if fallback {
        log::debug!("background level {g_l:.4} not below cloud level {g_h:.4}; using g_l = g_h / 2");
        g_l = 0.5 * g_h;
    }
    Ok(Knees {
        g_l,
        g_h,
        m_p: p.mean,
        s_p: p.stddev,
        m_q: q.mean,
        s_q: q.stddev,
        fallback,
    })
}

/// Solves the arc and gamma branch for knees `g_l < g_h` and `y1 = kappa g_l`.
pub fn solve_gray_params(g_l: f64, g_h: f64, kappa: f64) -> Result<GrayParams> {
    if !(g_l > 0.0 && g_h > g_l && g_h.is_finite()) {
        return Err(Error::Parameter(format!(
            "knees must satisfy 0 < g_l < g_h, got {g_l}, {g_h}"
        )));
    }
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::Parameter(format!("kappa must lie in (0, 1), got {kappa}")));
    }
    let y1 = kappa * g_l;
    // Circle through (g_l, y1) and (g_h, g_h) with center on x + y = 2 g_h.
    let a = (g_l * g_l + y1 * y1 - 4.0 * y1 * g_h + 2.0 * g_h * g_h) / (2.0 * (g_l - y1));
    let b = 2.0 * g_h - a;
    let r = std::f64::consts::SQRT_2 * (g_h - a).abs();
    if !(a > g_h) || !(y1 > b) {
        return Err(Error::Parameter(format!(
            "arc is not monotone on [{g_l}, {g_h}] for kappa {kappa}; try a different kappa"
        )));
    }
    let gamma = -g_l * (g_l - a) / (y1 * (y1 - b));
    if !(gamma > 0.0 && gamma <= MAX_GAMMA) {
        return Err(Error::Parameter(format!(
            "gamma {gamma} outside (0, {MAX_GAMMA}]; try a different kappa"
        )));
    }
    Ok(GrayParams {
        g_l,
        g_h,
        y1,
        a,
        b,
        r,
        gamma,
        m: y1 / g_l.powf(gamma),
        kappa,
    })
}

impl GrayParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.g_l > 0.0
            && self.g_h > self.g_l
            && self.y1 > 0.0
            && self.y1 <= self.g_l
            && self.a > self.g_h
            && self.gamma > 0.0
            && self.m > 0.0
            && self.r > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("inconsistent gray parameters {self:?}")))
        }
    }

    /// Transformed level for `g` in [0, 1].
    #[inline]
    pub fn map(&self, g: f64) -> f64 {
        if g >= self.g_h {
            g
        } else if g >= self.g_l {
            let u = g - self.a;
            self.b + (self.r * self.r - u * u).max(0.0).sqrt()
        } else {
            self.m * g.powf(self.gamma)
        }
    }

    /// Derivative of [`map`](Self::map).
    pub fn slope(&self, g: f64) -> f64 {
        if g >= self.g_h {
            1.0
        } else if g >= self.g_l {
            let u = g - self.a;
            -u / (self.r * self.r - u * u).sqrt()
        } else {
            self.m * self.gamma * g.powf(self.gamma - 1.0)
        }
    }
}

/// Transformed image and the number of pixels outside [0, 1], which pass
/// through unchanged.
#[derive(Debug, Clone)]
pub struct GrayOutput {
    pub image: ImageGrid,
    pub out_of_range: usize,
}

pub fn apply_gray_transform(image: &ImageGrid, params: &GrayParams) -> Result<GrayOutput> {
    params.validate()?;
    let mut out_of_range = 0;
    let px = image
        .pixels()
        .iter()
        .map(|&g| {
            if (0.0..=1.0).contains(&g) {
                params.map(g)
            } else {
                out_of_range += 1;
                g
            }
        })
        .collect();
    Ok(GrayOutput {
        image: image.with_pixels(px)?,
        out_of_range,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::GaussFit1D;
    use proptest::prelude::*;

    fn knee_seg(n: usize) -> Segmentation {
        let fit = GaussFit1D {
            amplitude: 1.0,
            center: 0.0,
            sigma: 1.0,
            offset: 0.0,
            residual_rms: 0.0,
            converged: true,
            iterations: 0,
        };
        let c = (n / 2) as f64;
        Segmentation::from_geometry(n, n, (c, c), fit, 5.0, 10.0).unwrap()
    }

    fn image_with(seg: &Segmentation, core: &[f64], core_rest: f64, bg: &[f64], bg_rest: f64) -> ImageGrid {
        let mut px = vec![0.5; seg.width * seg.height];
        for (k, &i) in seg.mask_j.iter().enumerate() {
            px[i] = core.get(k).copied().unwrap_or(core_rest);
        }
        for (k, &i) in seg.mask_k.iter().enumerate() {
            px[i] = bg.get(k).copied().unwrap_or(bg_rest);
        }
        ImageGrid::new(seg.width, seg.height, px).unwrap()
    }

    #[test]
    fn zero_spread_knees() {
        let s = knee_seg(31);
        let img = image_with(&s, &[0.6; 10], 0.9, &[0.1; 10], 0.01);
        let k = detect_knees(&img, &s).unwrap();
        assert!((k.g_h - 0.6).abs() < 1e-15 && (k.g_l - 0.1).abs() < 1e-15);
        assert!(!k.fallback);
    }

    #[test]
    fn three_sigma_knees() {
        let s = knee_seg(31);
        let core = [0.48, 0.52, 0.48, 0.52, 0.48, 0.52, 0.48, 0.52, 0.48, 0.52];
        let bg = [0.07, 0.09, 0.07, 0.09, 0.07, 0.09, 0.07, 0.09, 0.07, 0.09];
        let img = image_with(&s, &core, 0.9, &bg, 0.01);
        let k = detect_knees(&img, &s).unwrap();
        assert!((k.g_h - 0.44).abs() < 1e-12, "{}", k.g_h);
        assert!((k.g_l - 0.11).abs() < 1e-12, "{}", k.g_l);
    }

    #[test]
    fn overlapping_levels_fall_back() {
        let s = knee_seg(31);
        let img = image_with(&s, &[0.3; 10], 0.9, &[0.35; 10], 0.01);
        let k = detect_knees(&img, &s).unwrap();
        assert!(k.fallback);
        assert_eq!(k.g_l, 0.5 * k.g_h);
    }

    #[test]
    fn small_regions_are_rejected() {
        let s = knee_seg(11);
        assert!(s.mask_k.len() < 10 || s.mask_j.len() >= 10);
        let tiny = Segmentation::from_geometry(7, 7, (3.0, 3.0), s.fit, 1.0, 2.0).unwrap();
        assert!(tiny.mask_j.len() < 10);
        let img = ImageGrid::filled(7, 7, 0.5);
        assert!(matches!(detect_knees(&img, &tiny), Err(Error::Segmentation(_))));
    }

    #[test]
    fn circle_passes_through_both_knees() {
        let p = solve_gray_params(0.1, 0.6, 0.5).unwrap();
        assert_eq!(p.y1, 0.05);
        let on = |x: f64, y: f64| (x - p.a).powi(2) + (y - p.b).powi(2) - p.r * p.r;
        assert!(on(0.1, 0.05).abs() < 1e-9);
        assert!(on(0.6, 0.6).abs() < 1e-9);
        assert!((p.b - (2.0 * 0.6 - p.a)).abs() < 1e-9);
        assert!((p.r * p.r - 2.0 * (0.6 - p.a).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn tangent_to_identity_at_upper_knee() {
        let p = solve_gray_params(0.1, 0.6, 0.5).unwrap();
        let below = p.g_h - 1e-7;
        assert!((p.map(below) - below).abs() < 1e-9);
        assert!((p.slope(below) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn knee_continuity() {
        for (gl, gh, k) in [(0.1, 0.6, 0.5), (0.05, 0.3, 0.2), (0.2, 0.5, 0.8)] {
            let p = solve_gray_params(gl, gh, k).unwrap();
            for g in [gl, gh] {
                let lo = p.map(g - 1e-6);
                let hi = p.map(g + 1e-6);
                // Offsets move the value by at most slope * 1e-6 on each side.
                let slack = 1e-6 * (p.slope(g - 1e-6) + p.slope(g + 1e-6));
                assert!((hi - lo).abs() <= slack + 1e-9);
            }
            assert!((p.map(gl) - p.m * gl.powf(p.gamma)).abs() < 1e-9);
            assert!((p.map(gh) - gh).abs() < 1e-9);
            assert!((p.slope(gl - 1e-12) - p.slope(gl)).abs() < 1e-6 * p.slope(gl).max(1.0));
        }
    }

    #[test]
    fn kappa_near_one_approaches_identity_at_knee() {
        let mut last_gap = f64::INFINITY;
        for k in [0.9, 0.99] {
            let p = solve_gray_params(0.1, 0.6, k).unwrap();
            let gap = p.g_l - p.y1;
            assert!(gap < last_gap);
            last_gap = gap;
            // Gamma tracks the arc slope at the knee.
            let arc_slope = -(p.g_l - p.a) / (p.y1 - p.b);
            assert!((p.gamma * p.y1 / p.g_l - arc_slope).abs() < 1e-9);
        }
    }

    #[test]
    fn origin_and_fixed_region() {
        let p = solve_gray_params(0.1, 0.6, 0.5).unwrap();
        assert_eq!(p.map(0.0), 0.0);
        for k in 0..=400 {
            let g = 0.6 + 0.001 * k as f64;
            assert_eq!(p.map(g), g);
        }
    }

    #[test]
    fn out_of_range_pixels_pass_through() {
        let p = solve_gray_params(0.1, 0.6, 0.5).unwrap();
        let img = ImageGrid::new(4, 1, vec![-0.1, 0.05, 0.7, 1.2]).unwrap();
        let out = apply_gray_transform(&img, &p).unwrap();
        assert_eq!(out.out_of_range, 2);
        assert_eq!(out.image.pixels()[0], -0.1);
        assert_eq!(out.image.pixels()[3], 1.2);
        assert_eq!(out.image.pixels()[2], 0.7);
        assert!(out.image.pixels()[1] < 0.05);
    }

    #[test]
    fn bad_inputs_are_parameter_errors() {
        assert!(matches!(solve_gray_params(0.6, 0.1, 0.5), Err(Error::Parameter(_))));
        assert!(matches!(solve_gray_params(0.1, 0.6, 1.0), Err(Error::Parameter(_))));
        assert!(matches!(solve_gray_params(0.0, 0.6, 0.5), Err(Error::Parameter(_))));
    }

    #[test]
    fn params_serialize_all_nine_fields() {
        let p = solve_gray_params(0.1, 0.6, 0.5).unwrap();
        let v = serde_json::to_value(p).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 9);
        let back: GrayParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #[test]
        fn monotone_suppressing_and_bounded(gl in 0.01f64..0.4, gap in 0.05f64..0.5, kappa in 0.05f64..0.95) {
            let gh = (gl + gap).min(0.99);
            let Ok(p) = solve_gray_params(gl, gh, kappa) else { return Ok(()) };
            let mut prev = 0.0;
            for k in 0..=10_000 {
                let g = k as f64 / 10_000.0;
                let v = p.map(g);
                prop_assert!(v >= prev - 1e-12, "g = {}", g);
                prop_assert!((0.0..=1.0).contains(&v));
                if g < gl && p.gamma >= 1.0 {
                    prop_assert!(v <= g);
                }
                prev = v;
            }
        }
    }
}
