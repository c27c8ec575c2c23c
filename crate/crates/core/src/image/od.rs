use serde::{Deserialize, Serialize};

use super::{ImageGrid, RawTriplet};
use crate::error::{Error, Result};

pub const DEFAULT_CLAMP_FLOOR: f64 = 1e-6;

/// Optical-density map plus counters for pixels that needed special handling.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalDensity {
    pub image: ImageGrid,
    pub counters: OdCounters,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OdCounters {
    /// Pixels with `light - dark <= 0`; reported as zero optical density.
    pub unlit_pixels: usize,
    /// Pixels whose transmission ratio fell outside the clamp range.
    pub clamped_pixels: usize,
}

/// `A = -ln((L - N) / (G - N))` per pixel, natural log.
///
/// The transmission ratio is clamped into `[clamp_floor, 1 / clamp_floor]`;
/// pixels without probe light (`G - N <= 0`) read as `A = 0`.
pub fn compute_optical_density(triplet: &RawTriplet, clamp_floor: f64) -> Result<OpticalDensity> {
    if !(clamp_floor > 0.0 && clamp_floor < 1.0) {
        return Err(Error::invalid(format!(
            "clamp floor must lie in (0, 1), got {clamp_floor}"
        )));
    }
    let ceil = 1.0 / clamp_floor;
    let mut counters = OdCounters::default();
    let atoms = triplet.atoms.pixels();
    let light = triplet.light.pixels();
    let dark = triplet.dark.pixels();
    let mut out = Vec::with_capacity(atoms.len());
    for i in 0..atoms.len() {
        let lit = light[i] - dark[i];
        if lit <= 0.0 {
            counters.unlit_pixels += 1;
            out.push(0.0);
            continue;
        }
        let ratio = (atoms[i] - dark[i]) / lit;
        let clamped = ratio.clamp(clamp_floor, ceil);
        if clamped != ratio {
            counters.clamped_pixels += 1;
        }
        out.push(-clamped.ln());
    }
    let image = triplet.atoms.with_pixels(out)?;
    Ok(OpticalDensity { image, counters })
}
