//! Ring patterns and masks in the centered Fourier plane.
//!
//! Patterns are concentric rings: every mask cell at the same integer
//! radius from the disc center shares one seeded complex value. Injection
//! replaces the masked spectrum of one latent channel and writes the
//! conjugate values at the mirrored cells so the modified spectrum stays
//! Hermitian and the latent stays exactly real. Extraction reads the masked
//! spectrum back in the same cell order.

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::Latent;
use crate::error::{arg_err, Result};
use crate::fft;
use crate::rng;

/// Pattern position offset `l = (l_x, l_y)`; `x` indexes rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Offset {
    pub l_x: i32,
    pub l_y: i32,
}

impl Offset {
    pub const ZERO: Offset = Offset { l_x: 0, l_y: 0 };

    pub fn new(l_x: i32, l_y: i32) -> Self {
        Self { l_x, l_y }
    }
}

/// Boolean support in the centered frequency plane, on one latent channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqMask {
    pub support: Array2<bool>,
    pub channel: usize,
}

impl FreqMask {
    /// Filled disc of the given radius around the plane center: cells whose
    /// distance `d` to the center satisfies `floor(d) <= radius`.
    pub fn disc(plane_shape: (usize, usize), radius: u32, channel: usize) -> Result<Self> {
        let (h, w) = plane_shape;
        if radius < 1 {
            return Err(arg_err("mask radius must be at least 1"));
        }
        if 2 * radius as usize >= h.min(w) {
            return Err(arg_err(format!(
                "radius {radius} too large for a {h}x{w} plane"
            )));
        }
        let (ci, cj) = (h as isize / 2, w as isize / 2);
        let r2_bound = ((radius + 1) * (radius + 1)) as isize;
        let support = Array2::from_shape_fn((h, w), |(i, j)| {
            let di = i as isize - ci;
            let dj = j as isize - cj;
            di * di + dj * dj < r2_bound
        });
        Ok(Self { support, channel })
    }

    pub fn plane_shape(&self) -> (usize, usize) {
        self.support.dim()
    }

    /// Support cells in row-major order; this is the canonical ordering for
    /// pattern values and extracted spectra.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.support
            .indexed_iter()
            .filter_map(|(idx, &on)| on.then_some(idx))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.support.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.support.iter().all(|&b| !b)
    }
}

/// A seeded ring pattern placed in the centered frequency plane.
///
/// `shift` records how far the disc has been translated from the plane
/// center; the pattern value of an in-support cell depends only on its
/// integer-radius ring relative to the (possibly shifted) disc center.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSpec {
    pub seed: u64,
    pub radius: u32,
    pub channel: usize,
    pub plane_shape: (usize, usize),
    /// Scale of the ring values. Standard complex normal is amplitude 1;
    /// deployments match this to the latent spectrum magnitude at the
    /// injection steps so the written band blends with its surroundings.
    pub amplitude: f64,
    /// Draw real ring values, making the centered pattern Hermitian.
    pub conjugate_symmetric: bool,
    /// Current translation of the disc center away from the plane center.
    pub shift: (i32, i32),
    ring_values: Vec<Complex64>,
}

/// Generate the ring pattern and its disc mask around the plane center.
///
/// Ring `k` collects all cells at integer radius `k` (`floor` of Euclidean
/// distance) from the center; each ring's value is drawn once from a seeded
/// standard complex normal scaled by `amplitude`.
pub fn make_ring_pattern(
    seed: u64,
    radius: u32,
    plane_shape: (usize, usize),
    channel: usize,
    amplitude: f64,
    conjugate_symmetric: bool,
) -> Result<(PatternSpec, FreqMask)> {
    let mask = FreqMask::disc(plane_shape, radius, channel)?;
    if !(amplitude > 0.0 && amplitude.is_finite()) {
        return Err(arg_err("pattern amplitude must be positive and finite"));
    }
    let mut rng = rng::rng_for(seed, "ring-pattern", 0);
    let ring_values: Vec<Complex64> = (0..=radius)
        .map(|_| {
            if conjugate_symmetric {
                Complex64::new(amplitude * rng.sample::<f64, _>(StandardNormal), 0.0)
            } else {
                // Standard complex normal: each component has variance 1/2.
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re, im) * (amplitude / 2f64.sqrt())
            }
        })
        .collect();
    let mut pattern = PatternSpec {
        seed,
        radius,
        channel,
        plane_shape,
        amplitude,
        conjugate_symmetric,
        shift: (0, 0),
        ring_values,
    };
    // Calibrate the draw so the mask-weighted band energy hits amplitude^2
    // exactly; with only radius+1 ring values the raw draw can sit several
    // percent off, which would leave a detectable energy step between the
    // written band and the untouched spectrum.
    let mean_square: f64 =
        pattern.values(&mask).iter().map(|v| v.norm_sqr()).sum::<f64>() / mask.len() as f64;
    if mean_square > 0.0 {
        let scale = (amplitude * amplitude / mean_square).sqrt();
        for v in pattern.ring_values.iter_mut() {
            *v *= scale;
        }
    }
    Ok((pattern, mask))
}

impl PatternSpec {
    /// Disc center in plane coordinates.
    fn center(&self) -> (isize, isize) {
        let (h, w) = self.plane_shape;
        (
            h as isize / 2 + self.shift.0 as isize,
            w as isize / 2 + self.shift.1 as isize,
        )
    }

    /// Ring index of a plane cell, or `None` outside the disc.
    pub fn ring_of(&self, cell: (usize, usize)) -> Option<u32> {
        let (ci, cj) = self.center();
        let di = cell.0 as isize - ci;
        let dj = cell.1 as isize - cj;
        let d2 = (di * di + dj * dj) as f64;
        let ring = d2.sqrt().floor() as u32;
        (ring <= self.radius).then_some(ring)
    }

    /// Pattern value at a plane cell inside the disc.
    pub fn value_at(&self, cell: (usize, usize)) -> Option<Complex64> {
        self.ring_of(cell).map(|r| self.ring_values[r as usize])
    }

    /// Pattern values over the mask support, in the mask's row-major cell
    /// order.
    pub fn values(&self, mask: &FreqMask) -> Vec<Complex64> {
        mask.cells()
            .into_iter()
            .map(|cell| {
                self.value_at(cell)
                    .expect("mask support must lie inside the pattern disc")
            })
            .collect()
    }

    /// The raw per-ring values, index 0 at the disc center.
    pub fn ring_values(&self) -> &[Complex64] {
        &self.ring_values
    }
}

/// Translate pattern and mask by the offset: the cell `(i, j)` of the result
/// carries the original content of `(i + l_x, j + l_y)`, so the support
/// moves by `-l`.
pub fn offset_pattern(
    pattern: &PatternSpec,
    mask: &FreqMask,
    l: Offset,
) -> Result<(PatternSpec, FreqMask)> {
    let (h, w) = pattern.plane_shape;
    if mask.plane_shape() != (h, w) {
        return Err(arg_err("pattern and mask plane shapes differ"));
    }
    let mut shifted = pattern.clone();
    shifted.shift = (pattern.shift.0 - l.l_x, pattern.shift.1 - l.l_y);
    // Reject offsets that would push any support cell out of the plane.
    let (ci, cj) = shifted.center();
    let reach = pattern.radius as isize;
    if ci - reach < 0 || cj - reach < 0 || ci + reach >= h as isize || cj + reach >= w as isize {
        return Err(arg_err(format!(
            "offset ({}, {}) pushes the mask outside the {h}x{w} plane",
            l.l_x, l.l_y
        )));
    }
    let mut support = Array2::from_elem((h, w), false);
    for (i, j) in mask.cells() {
        let ti = i as isize - l.l_x as isize;
        let tj = j as isize - l.l_y as isize;
        if ti < 0 || tj < 0 || ti >= h as isize || tj >= w as isize {
            return Err(arg_err(format!(
                "offset ({}, {}) pushes the mask outside the {h}x{w} plane",
                l.l_x, l.l_y
            )));
        }
        support[(ti as usize, tj as usize)] = true;
    }
    Ok((
        shifted,
        FreqMask {
            support,
            channel: mask.channel,
        },
    ))
}

/// The values [`inject`] actually places on the plane: a Hermitian
/// completion of the offset pattern. Walking the mask in row-major order,
/// each not-yet-written cell sources its pattern value and stamps the
/// conjugate on its mirror cell (self-mirror cells keep the real part).
/// The spectrum of a real plane is Hermitian, so this is the write set
/// closest to plain replacement that a real latent can carry exactly.
pub fn hermitian_completion(
    pattern: &PatternSpec,
    mask: &FreqMask,
) -> Result<Vec<((usize, usize), Complex64)>> {
    let (h, w) = mask.plane_shape();
    if pattern.plane_shape != (h, w) {
        return Err(arg_err("pattern and mask plane shapes differ"));
    }
    let mut written: Vec<((usize, usize), Complex64)> = Vec::with_capacity(2 * mask.len());
    let mut taken = Array2::from_elem((h, w), false);
    for cell in mask.cells() {
        if taken[cell] {
            continue;
        }
        let v = pattern
            .value_at(cell)
            .ok_or_else(|| arg_err("mask support outside the pattern disc"))?;
        let mirror = fft::mirror_index((h, w), cell);
        if mirror == cell {
            written.push((cell, Complex64::new(v.re, 0.0)));
            taken[cell] = true;
        } else {
            written.push((cell, v));
            written.push((mirror, v.conj()));
            taken[cell] = true;
            taken[mirror] = true;
        }
    }
    Ok(written)
}

/// Replace the masked spectrum of the designated channel with the pattern
/// values and return the modified latent.
///
/// The write set is the Hermitian completion of the offset pattern (see
/// [`hermitian_completion`]): every masked cell whose mirror lies outside
/// the mask carries its exact pattern value; mirror pairs inside the mask
/// are sourced by the first cell in scan order so the written band keeps
/// full pattern energy and the latent stays exactly real.
pub fn inject(z: &Latent, pattern: &PatternSpec, mask: &FreqMask) -> Result<Latent> {
    let (c, h, w) = z.shape();
    if mask.plane_shape() != (h, w) || pattern.plane_shape != (h, w) {
        return Err(arg_err("mask/pattern shape does not match the latent"));
    }
    if mask.channel >= c {
        return Err(arg_err(format!(
            "mask channel {} out of range for {c} channels",
            mask.channel
        )));
    }
    if mask.is_empty() {
        return Ok(z.clone());
    }
    let plane = z
        .data
        .index_axis(ndarray::Axis(0), mask.channel)
        .to_owned();
    let mut spec = fft::fft2_centered(&plane);
    for (cell, value) in hermitian_completion(pattern, mask)? {
        spec[cell] = value;
    }
    let new_plane = fft::ifft2_centered_real(&spec);
    let mut out = z.clone();
    out.data
        .index_axis_mut(ndarray::Axis(0), mask.channel)
        .assign(&new_plane);
    Ok(out)
}

/// Cells written by [`inject`]: the mask support plus its mirror image.
pub fn written_support(mask: &FreqMask) -> Array2<bool> {
    let (h, w) = mask.plane_shape();
    let mut written = mask.support.clone();
    for (i, j) in mask.cells() {
        let (mi, mj) = fft::mirror_index((h, w), (i, j));
        written[(mi, mj)] = true;
    }
    written
}

/// Masked spectrum of the designated channel, in the mask's row-major cell
/// order.
pub fn extract(z: &Latent, mask: &FreqMask) -> Result<Vec<Complex64>> {
    let (c, h, w) = z.shape();
    if mask.plane_shape() != (h, w) {
        return Err(arg_err("mask shape does not match the latent"));
    }
    if mask.channel >= c {
        return Err(arg_err(format!(
            "mask channel {} out of range for {c} channels",
            mask.channel
        )));
    }
    let plane = z
        .data
        .index_axis(ndarray::Axis(0), mask.channel)
        .to_owned();
    let spec = fft::fft2_centered(&plane);
    Ok(mask.cells().into_iter().map(|cell| spec[cell]).collect())
}
