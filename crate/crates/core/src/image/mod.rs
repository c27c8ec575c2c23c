//! Pixel grids, frame triplets, file I/O and optical density.

mod io;
mod od;
mod stats;

pub use io::{load_image, save_image, ImageFormat, Sidecar};
pub use od::{compute_optical_density, OdCounters, OpticalDensity, DEFAULT_CLAMP_FLOOR};
pub use stats::{normalize_unit, region_stats, NormMap, RegionStats};

use crate::error::{Error, Result};

/// Row-major grid of finite `f64` pixels with an optional pixel pitch in
/// micrometers.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    pixel_pitch_um: Option<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = width
            .checked_mul(height)
            .ok_or_else(|| Error::invalid(format!("image dimensions {width}x{height} overflow")))?;
        if pixels.len() != expected {
            return Err(Error::invalid(format!(
                "pixel buffer holds {} values, {width}x{height} needs {expected}",
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite pixel {} at ({}, {})",
                pixels[i],
                i % width,
                i / width
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            pixel_pitch_um: None,
        })
    }

    /// Constant image. Panics on zero dimensions or a non-finite value.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("valid constant image")
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    /// Panics if `f` returns a non-finite value.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let pixels = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, pixels).expect("from_fn produced an invalid image")
    }

    pub fn with_pixel_pitch(mut self, pitch_um: Option<f64>) -> Self {
        self.pixel_pitch_um = pitch_um;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixel_pitch_um(&self) -> Option<f64> {
        self.pixel_pitch_um
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// `(x, y)` of a flat pixel index.
    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Applies `f` to every pixel, keeping shape and pitch.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let pixels = self.pixels.iter().map(|&v| f(v)).collect();
        Ok(Self::new(self.width, self.height, pixels)?.with_pixel_pitch(self.pixel_pitch_um))
    }

    /// Same shape, new pixel values; keeps the pitch.
    pub fn with_pixels(&self, pixels: Vec<f64>) -> Result<Self> {
        Ok(Self::new(self.width, self.height, pixels)?.with_pixel_pitch(self.pixel_pitch_um))
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn ensure_same_shape(&self, other: &ImageGrid, what: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                what,
                left_w: self.width,
                left_h: self.height,
                right_w: other.width,
                right_h: other.height,
            })
        }
    }

    /// Pixel indices whose value satisfies `pred`.
    pub fn indices_where(&self, pred: impl Fn(f64) -> bool) -> Vec<usize> {
        self.pixels
            .iter()
            .enumerate()
            .filter(|(_, &v)| pred(v))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Atoms, light and dark frames of one absorption-imaging shot.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTriplet {
    pub atoms: ImageGrid,
    pub light: ImageGrid,
    pub dark: ImageGrid,
}

impl RawTriplet {
    pub fn new(atoms: ImageGrid, light: ImageGrid, dark: ImageGrid) -> Result<Self> {
        atoms.ensure_same_shape(&light, "triplet atoms/light frames")?;
        atoms.ensure_same_shape(&dark, "triplet atoms/dark frames")?;
        if atoms.pixel_pitch_um != light.pixel_pitch_um || atoms.pixel_pitch_um != dark.pixel_pitch_um {
            return Err(Error::invalid("triplet frames disagree on pixel pitch"));
        }
        Ok(Self { atoms, light, dark })
    }

    pub fn width(&self) -> usize {
        self.atoms.width
    }

    pub fn height(&self) -> usize {
        self.atoms.height
    }
}
