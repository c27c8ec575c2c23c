use std::collections::HashMap;

use rayon::prelude::*;

use super::kernel::GaussianKernel;
use super::SigmaField;
use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Half-sample symmetric boundary (`d c b a | a b c d | d c b a`), valid for
/// any offset, including kernels wider than the image.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Row pass: `sum_i taps[i] * row[reflect(x + i - r)]`, ascending `i`.
fn filter_row(row: &[f64], taps: &[f64], out: &mut [f64]) {
    let r = taps.len() / 2;
    let w = row.len();
    let padded: Vec<f64> = (0..w + 2 * r)
        .map(|k| row[reflect(k as isize - r as isize, w)])
        .collect();
    for (x, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (t, v) in taps.iter().zip(&padded[x..x + taps.len()]) {
            acc += t * v;
        }
        *o = acc;
    }
}

/// Rows with `row_taps`, then columns with `col_taps`; both odd-length.
pub(crate) fn separable_pass(image: &ImageGrid, row_taps: &[f64], col_taps: &[f64]) -> Result<ImageGrid> {
    let (w, h) = (image.width(), image.height());
    let mut tmp = vec![0.0; w * h];
    tmp.par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, out)| filter_row(image.row(y), row_taps, out));

    let r = col_taps.len() / 2;
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, acc)| {
        for (j, t) in col_taps.iter().enumerate() {
            let src = reflect(y as isize + j as isize - r as isize, h);
            let src_row = &tmp[src * w..(src + 1) * w];
            for (a, v) in acc.iter_mut().zip(src_row) {
                *a += t * v;
            }
        }
    });
    image.with_pixels(out)
}

/// Uniform Gaussian smoothing: row pass then column pass, mirror boundaries.
pub fn convolve_separable(image: &ImageGrid, sigma: f64) -> Result<ImageGrid> {
    let k = GaussianKernel::new(sigma)?;
    convolve_with_kernel(image, &k)
}

pub fn convolve_with_kernel(image: &ImageGrid, kernel: &GaussianKernel) -> Result<ImageGrid> {
    separable_pass(image, kernel.taps(), kernel.taps())
}

/// The value [`convolve_with_kernel`] produces at `(x, y)`, computed locally.
///
/// `x` and `y` may lie outside the grid; they are reflected first. The
/// arithmetic mirrors the full-image passes term by term, so the two agree
/// bit for bit.
pub fn separable_at(image: &ImageGrid, kernel: &GaussianKernel, x: isize, y: isize) -> f64 {
    let (w, h) = (image.width(), image.height());
    let r = kernel.radius() as isize;
    let taps = kernel.taps();
    let (x, y) = (reflect(x, w) as isize, reflect(y, h) as isize);
    let mut acc = 0.0;
    for (j, tj) in taps.iter().enumerate() {
        let row = image.row(reflect(y + j as isize - r, h));
        let mut row_acc = 0.0;
        for (i, ti) in taps.iter().enumerate() {
            row_acc += ti * row[reflect(x + i as isize - r, w)];
        }
        acc += tj * row_acc;
    }
    acc
}

/// Per-pixel sigma from a map of widths; see [`convolve_varying`].
pub fn convolve_with_sigma_map(image: &ImageGrid, sigmas: &ImageGrid) -> Result<ImageGrid> {
    if !image.same_shape(sigmas) {
        return Err(Error::DimensionMismatch {
            what: "image vs sigma field",
            left_w: image.width(),
            left_h: image.height(),
            right_w: sigmas.width(),
            right_h: sigmas.height(),
        });
    }
    if let Some(bad) = sigmas.pixels().iter().find(|s| !(**s > 0.0)) {
        return Err(Error::invalid(format!("sigma field holds non-positive width {bad}")));
    }
    let w = image.width();
    let mut out = vec![0.0; image.len()];
    out.par_chunks_mut(w)
        .enumerate()
        .try_for_each(|(y, row)| -> Result<()> {
            let mut cache: HashMap<u64, GaussianKernel> = HashMap::new();
            for (x, o) in row.iter_mut().enumerate() {
                let s = sigmas.get(x, y);
                let k = match cache.entry(s.to_bits()) {
                    std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                    std::collections::hash_map::Entry::Vacant(e) => e.insert(GaussianKernel::new(s)?),
                };
                *o = separable_at(image, k, x as isize, y as isize);
            }
            Ok(())
        })?;
    image.with_pixels(out)
}

/// Spatially varying Gaussian filter in gather form: each output pixel is the
/// normalized Gaussian average of the input using that pixel's own sigma.
pub fn convolve_varying(image: &ImageGrid, field: &SigmaField) -> Result<ImageGrid> {
    convolve_with_sigma_map(image, &field.sigmas)
}
