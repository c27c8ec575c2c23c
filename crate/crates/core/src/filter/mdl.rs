//! Minimum-description-length choice of the local Gaussian width.
//!
//! For a candidate width the objective is `c / sigma^2 + mean(eps^2)`: the
//! first term rewards smoothness, the second is the squared residual between
//! the image and its smoothed version, averaged over a small window around
//! the pixel. The best width is the exact argmin over a finite grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::convolve::{convolve_with_kernel, reflect, separable_at};
use super::kernel::GaussianKernel;
use crate::error::{Error, Result};
use crate::image::ImageGrid;

pub const MDL_COEFFICIENT_PER_L2: f64 = 4.0e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdlConfigFields")]
pub struct MdlConfig {
    mesh_edge_l: f64,
    coefficient_c: f64,
    sigma_grid: Vec<f64>,
    residual_window: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MdlConfigFields {
    mesh_edge_l: f64,
    #[serde(default)]
    coefficient_c: Option<f64>,
    sigma_grid: Vec<f64>,
    residual_window: usize,
}

impl TryFrom<MdlConfigFields> for MdlConfig {
    type Error = Error;

    fn try_from(f: MdlConfigFields) -> Result<Self> {
        let cfg = Self::new(f.mesh_edge_l, f.sigma_grid, f.residual_window)?;
        match f.coefficient_c {
            Some(c) if (c - cfg.coefficient_c).abs() > 1e-12 * cfg.coefficient_c => Err(Error::invalid(format!(
                "coefficient_c {c} disagrees with mesh_edge_l (expected {})",
                cfg.coefficient_c
            ))),
            _ => Ok(cfg),
        }
    }
}

impl Default for MdlConfig {
    fn default() -> Self {
        Self::new(1.0, geometric_grid(0.3, 10.0, 60).expect("default grid"), 5).expect("default MDL configuration")
    }
}

impl MdlConfig {
    pub fn new(mesh_edge_l: f64, sigma_grid: Vec<f64>, residual_window: usize) -> Result<Self> {
        if !(mesh_edge_l > 0.0) || !mesh_edge_l.is_finite() {
            return Err(Error::invalid(format!(
                "mesh edge length must be positive, got {mesh_edge_l}"
            )));
        }
        if sigma_grid.is_empty() {
            return Err(Error::invalid("sigma grid is empty"));
        }
        if sigma_grid.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("sigma grid values must be positive and finite"));
        }
        if sigma_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("sigma grid must be strictly ascending"));
        }
        if residual_window.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "residual window must be a positive odd size, got {residual_window}"
            )));
        }
        Ok(Self {
            mesh_edge_l,
            coefficient_c: MDL_COEFFICIENT_PER_L2 * mesh_edge_l * mesh_edge_l,
            sigma_grid,
            residual_window,
        })
    }

    pub fn with_grid(&self, sigma_grid: Vec<f64>) -> Result<Self> {
        Self::new(self.mesh_edge_l, sigma_grid, self.residual_window)
    }

    pub fn mesh_edge_l(&self) -> f64 {
        self.mesh_edge_l
    }

    pub fn coefficient_c(&self) -> f64 {
        self.coefficient_c
    }

    pub fn sigma_grid(&self) -> &[f64] {
        &self.sigma_grid
    }

    pub fn residual_window(&self) -> usize {
        self.residual_window
    }

    pub fn largest_sigma(&self) -> f64 {
        *self.sigma_grid.last().expect("non-empty grid")
    }
}

/// `n` geometrically spaced values from `min` to `max` inclusive.
pub fn geometric_grid(min: f64, max: f64, n: usize) -> Result<Vec<f64>> {
    if !(min > 0.0 && max > min) || n < 2 {
        return Err(Error::invalid(format!(
            "geometric grid needs 0 < min < max and n >= 2, got ({min}, {max}, {n})"
        )));
    }
    let ratio = (max / min).ln() / (n - 1) as f64;
    let mut grid: Vec<f64> = (0..n).map(|i| min * (ratio * i as f64).exp()).collect();
    grid[n - 1] = max;
    Ok(grid)
}

/// Window pixel offsets in row-major order.
fn window_offsets(size: usize) -> impl Iterator<Item = (isize, isize)> {
    let h = (size / 2) as isize;
    (-h..=h).flat_map(move |dy| (-h..=h).map(move |dx| (dx, dy)))
}

#[inline]
fn objective(c: f64, sigma: f64, sum_sq: f64, count: usize) -> f64 {
    c / (sigma * sigma) + sum_sq / count as f64
}

/// `c / sigma^2 + mean squared residual` over the window at `center`.
/// Window pixels outside the grid are mirrored back in.
pub fn mdl_objective(image: &ImageGrid, center: (usize, usize), sigma: f64, cfg: &MdlConfig) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "MDL sigma must be positive and finite, got {sigma}"
        )));
    }
    check_center(image, center)?;
    let kernel = GaussianKernel::new(sigma)?;
    let (w, h) = (image.width(), image.height());
    let mut sum_sq = 0.0;
    let mut count = 0;
    for (dx, dy) in window_offsets(cfg.residual_window) {
        let x = reflect(center.0 as isize + dx, w);
        let y = reflect(center.1 as isize + dy, h);
        let eps = image.get(x, y) - separable_at(image, &kernel, x as isize, y as isize);
        sum_sq += eps * eps;
        count += 1;
    }
    Ok(objective(cfg.coefficient_c, sigma, sum_sq, count))
}

/// Brute-force argmin of [`mdl_objective`] over the grid; ties go to the
/// smaller sigma.
pub fn mdl_best_sigma(image: &ImageGrid, center: (usize, usize), cfg: &MdlConfig) -> Result<f64> {
    let mut best = (f64::INFINITY, cfg.sigma_grid[0]);
    for &s in &cfg.sigma_grid {
        let v = mdl_objective(image, center, s, cfg)?;
        if v < best.0 {
            best = (v, s);
        }
    }
    Ok(best.1)
}

fn check_center(image: &ImageGrid, center: (usize, usize)) -> Result<()> {
    if center.0 >= image.width() || center.1 >= image.height() {
        return Err(Error::invalid(format!(
            "window center ({}, {}) outside a {}x{} image",
            center.0,
            center.1,
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// The image smoothed at every grid sigma, for evaluating many pixels at once.
///
/// Results are bit-identical to [`mdl_objective`] and [`mdl_best_sigma`]: the
/// smoothed values come from the same separable arithmetic and the residual
/// sums run over the window in the same order.
#[derive(Debug, Clone)]
pub struct MdlStack<'a> {
    image: &'a ImageGrid,
    cfg: MdlConfig,
    smoothed: Vec<ImageGrid>,
}

impl<'a> MdlStack<'a> {
    pub fn new(image: &'a ImageGrid, cfg: &MdlConfig) -> Result<Self> {
        let smoothed = cfg
            .sigma_grid
            .par_iter()
            .map(|&s| convolve_with_kernel(image, &GaussianKernel::new(s)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            image,
            cfg: cfg.clone(),
            smoothed,
        })
    }

    pub fn config(&self) -> &MdlConfig {
        &self.cfg
    }

    /// The image smoothed at the `k`-th grid sigma.
    pub fn smoothed(&self, k: usize) -> &ImageGrid {
        &self.smoothed[k]
    }

    pub fn objective(&self, center: (usize, usize), k: usize) -> f64 {
        let (w, h) = (self.image.width(), self.image.height());
        let sm = &self.smoothed[k];
        let mut sum_sq = 0.0;
        let mut count = 0;
        for (dx, dy) in window_offsets(self.cfg.residual_window) {
            let x = reflect(center.0 as isize + dx, w);
            let y = reflect(center.1 as isize + dy, h);
            let eps = self.image.get(x, y) - sm.get(x, y);
            sum_sq += eps * eps;
            count += 1;
        }
        objective(self.cfg.coefficient_c, self.cfg.sigma_grid[k], sum_sq, count)
    }

    pub fn best_sigma(&self, center: (usize, usize)) -> Result<f64> {
        check_center(self.image, center)?;
        let mut best = (f64::INFINITY, self.cfg.sigma_grid[0]);
        for (k, &s) in self.cfg.sigma_grid.iter().enumerate() {
            let v = self.objective(center, k);
            if v < best.0 {
                best = (v, s);
            }
        }
        Ok(best.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensorsim::{simulate_frame, Seed, SensorModel};

    #[test]
    fn coefficient_at_unit_mesh() {
        assert_eq!(MdlConfig::default().coefficient_c(), 4.0e-3);
        let cfg = MdlConfig::new(2.0, vec![1.0], 5).unwrap();
        assert!((cfg.coefficient_c() - 1.6e-2).abs() < 1e-15);
    }

    #[test]
    fn default_grid_shape() {
        let cfg = MdlConfig::default();
        let g = cfg.sigma_grid();
        assert_eq!(g.len(), 60);
        assert!((g[0] - 0.3).abs() < 1e-15);
        assert_eq!(g[59], 10.0);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = MdlConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<MdlConfig>(&text).unwrap(), cfg);
        let bad = text.replace("\"residual_window\":5", "\"residual_window\":4");
        assert!(serde_json::from_str::<MdlConfig>(&bad).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MdlConfig::new(1.0, vec![1.0, 1.0], 5).is_err());
        assert!(MdlConfig::new(1.0, vec![2.0, 1.0], 5).is_err());
        assert!(MdlConfig::new(1.0, vec![0.0, 1.0], 5).is_err());
        assert!(MdlConfig::new(1.0, vec![1.0], 4).is_err());
        assert!(MdlConfig::new(0.0, vec![1.0], 5).is_err());
    }

    #[test]
    fn constant_image_objective_is_pure_penalty() {
        let img = ImageGrid::filled(11, 11, 0.4);
        let cfg = MdlConfig::default();
        for &s in cfg.sigma_grid().iter().step_by(7) {
            let v = mdl_objective(&img, (5, 5), s, &cfg).unwrap();
            assert!((v - 4.0e-3 / (s * s)).abs() < 1e-15);
        }
        assert_eq!(mdl_best_sigma(&img, (0, 10), &cfg).unwrap(), 10.0);
    }

    #[test]
    fn invalid_sigma_and_center() {
        let img = ImageGrid::filled(5, 5, 0.0);
        let cfg = MdlConfig::default();
        assert!(mdl_objective(&img, (2, 2), 0.0, &cfg).is_err());
        assert!(mdl_objective(&img, (2, 2), f64::INFINITY, &cfg).is_err());
        assert!(mdl_objective(&img, (5, 2), 1.0, &cfg).is_err());
    }

    #[test]
    fn edge_pixel_prefers_narrower_kernel_than_flat_pixel() {
        let img = ImageGrid::from_fn(21, 21, |x, _| if x < 10 { 0.0 } else { 1.0 });
        let cfg = MdlConfig::default();
        // Exhaustive evaluation at both pixels.
        let argmin = |c: (usize, usize)| {
            cfg.sigma_grid()
                .iter()
                .map(|&s| (mdl_objective(&img, c, s, &cfg).unwrap(), s))
                .fold((f64::INFINITY, 0.0), |a, b| if b.0 < a.0 { b } else { a })
                .1
        };
        let edge = argmin((10, 10));
        let flat = argmin((2, 10));
        assert!(edge < flat, "edge {edge} flat {flat}");
    }

    #[test]
    fn stack_agrees_with_direct_search() {
        let img = ImageGrid::from_fn(24, 20, |x, y| ((x * 7 + y * 13) % 11) as f64 / 11.0);
        let cfg = MdlConfig::default();
        let stack = MdlStack::new(&img, &cfg).unwrap();
        for &(x, y) in &[(0, 0), (5, 9), (23, 19), (12, 1)] {
            assert_eq!(
                stack.best_sigma((x, y)).unwrap(),
                mdl_best_sigma(&img, (x, y), &cfg).unwrap()
            );
            for k in [0, 17, 59] {
                let direct = mdl_objective(&img, (x, y), cfg.sigma_grid()[k], &cfg).unwrap();
                assert_eq!(stack.objective((x, y), k).to_bits(), direct.to_bits());
            }
        }
    }

    #[test]
    fn read_noise_favours_wide_kernels() {
        // Pure read noise, sigma 0.03 on a unit scale (counts / 1000).
        let model = SensorModel {
            gain_k: 1.0,
            dark_mean: 0.0,
            read_mu: 500.0,
            read_sigma: 30.0,
            quant_step_q: 1e-6,
            shot_noise: false,
            ..SensorModel::default()
        };
        let frame = simulate_frame(&ImageGrid::filled(64, 64, 0.0), &model, Seed(2024)).unwrap();
        let img = frame.map(|v| v / 1000.0).unwrap();
        let cfg = MdlConfig::default();
        let stack = MdlStack::new(&img, &cfg).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(8);
        let mut best: Vec<f64> = (0..100)
            .map(|_| {
                use rand::Rng;
                let c = (rng.random_range(0..64), rng.random_range(0..64));
                stack.best_sigma(c).unwrap()
            })
            .collect();
        best.sort_by(f64::total_cmp);
        let median = 0.5 * (best[49] + best[50]);
        assert!(median >= 2.0, "median best sigma {median}");
    }
}
