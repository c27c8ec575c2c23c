use serde::{Deserialize, Serialize};

use super::ImageGrid;
use crate::error::{Error, Result};

/// Mean and population standard deviation of a pixel region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub mean: f64,
    pub stddev: f64,
    pub count: usize,
}

impl RegionStats {
    /// Statistics of a value sequence. Two passes in index order, so the
    /// result does not depend on threading.
    pub fn of_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("region statistics need a non-empty region"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            mean,
            stddev: var.sqrt(),
            count: values.len(),
        })
    }
}

pub fn region_stats(image: &ImageGrid, mask: &[usize]) -> Result<RegionStats> {
    if mask.is_empty() {
        return Err(Error::invalid("region statistics need a non-empty mask"));
    }
    let px = image.pixels();
    let values = mask
        .iter()
        .map(|&i| {
            px.get(i)
                .copied()
                .ok_or_else(|| Error::invalid(format!("mask index {i} outside a {}-pixel image", px.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    RegionStats::of_values(&values)
}

/// Affine map between an image and its [0, 1] normalization:
/// `original = normalized * scale + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormMap {
    pub scale: f64,
    pub offset: f64,
}

impl NormMap {
    #[inline]
    pub fn forward(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    #[inline]
    pub fn inverse(&self, v: f64) -> f64 {
        v * self.scale + self.offset
    }

    pub fn invert_image(&self, image: &ImageGrid) -> Result<ImageGrid> {
        image.map(|v| self.inverse(v))
    }
}

/// Maps `image` onto [0, 1] by `(v - min) / (max - min)`.
pub fn normalize_unit(image: &ImageGrid) -> Result<(ImageGrid, NormMap)> {
    let (lo, hi) = image.min_max();
    if hi <= lo {
        return Err(Error::Degenerate(format!(
            "cannot normalize a constant image (all pixels {lo})"
        )));
    }
    let map = NormMap {
        scale: hi - lo,
        offset: lo,
    };
    // Pin the extremes so rounding can never leave [0, 1].
    let out = image.map(|v| {
        if v == lo {
            0.0
        } else if v == hi {
            1.0
        } else {
            map.forward(v).clamp(0.0, 1.0)
        }
    })?;
    Ok((out, map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_region() {
        let img = ImageGrid::filled(4, 4, 5.0);
        let s = region_stats(&img, &[0, 3, 7, 15]).unwrap();
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.stddev, 0.0);
        assert_eq!(s.count, 4);
    }

    #[test]
    fn two_pixel_region() {
        let img = ImageGrid::new(2, 1, vec![0.0, 2.0]).unwrap();
        let s = region_stats(&img, &[0, 1]).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.stddev, 1.0);
    }

    #[test]
    fn empty_or_out_of_bounds_mask() {
        let img = ImageGrid::filled(2, 2, 1.0);
        assert!(matches!(region_stats(&img, &[]), Err(Error::InvalidInput(_))));
        assert!(region_stats(&img, &[4]).is_err());
    }

    #[test]
    fn normalize_hand_values() {
        let img = ImageGrid::new(3, 1, vec![2.0, 4.0, 6.0]).unwrap();
        let (n, map) = normalize_unit(&img).unwrap();
        assert_eq!(n.pixels(), &[0.0, 0.5, 1.0]);
        assert_eq!((map.scale, map.offset), (4.0, 2.0));
    }

    #[test]
    fn normalize_identity_on_unit_image() {
        let img = ImageGrid::new(4, 1, vec![0.0, 0.25, 1.0, 0.75]).unwrap();
        let (n, map) = normalize_unit(&img).unwrap();
        assert_eq!(n, img);
        assert_eq!((map.scale, map.offset), (1.0, 0.0));
    }

    #[test]
    fn normalize_constant_is_degenerate() {
        let img = ImageGrid::filled(3, 3, 7.0);
        assert!(matches!(normalize_unit(&img), Err(Error::Degenerate(_))));
    }

    // Welford one-pass reference, independent of the two-pass implementation.
    fn welford(values: &[f64]) -> (f64, f64) {
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for &v in values {
            n += 1.0;
            let d = v - mean;
            mean += d / n;
            m2 += d * (v - mean);
        }
        (mean, (m2 / n).sqrt())
    }

    proptest! {
        #[test]
        fn full_grid_stats_match_one_pass_oracle(
            values in proptest::collection::vec(-1.0e3f64..1.0e3, 1..200)
        ) {
            let img = ImageGrid::new(values.len(), 1, values.clone()).unwrap();
            let mask: Vec<usize> = (0..values.len()).collect();
            let s = region_stats(&img, &mask).unwrap();
            let (mean, sd) = welford(&values);
            let scale = values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            prop_assert!((s.mean - mean).abs() <= 1e-12 * scale);
            prop_assert!((s.stddev - sd).abs() <= 1e-12 * scale);
        }

        #[test]
        fn normalization_inverts(
            values in proptest::collection::vec(-50.0f64..50.0, 2..100)
        ) {
            let img = ImageGrid::new(values.len(), 1, values.clone()).unwrap();
            prop_assume!(img.min_max().0 < img.min_max().1);
            let (n, map) = normalize_unit(&img).unwrap();
            let (lo, hi) = n.min_max();
            prop_assert_eq!((lo, hi), (0.0, 1.0));
            for (a, b) in n.pixels().iter().zip(&values) {
                let back = map.inverse(*a);
                prop_assert!((back - b).abs() <= 1e-12 * b.abs().max(map.scale));
            }
        }
    }
}
