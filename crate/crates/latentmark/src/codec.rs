//! Toy image codec: a fixed seeded invertible linear map between latents
//! and images, plus a clamp to the valid pixel range.
//!
//! Decoding mixes the latent channels through a seeded rotation, modulates
//! each plane by a checkerboard sign (which swaps the low and high halves of
//! the spectrum, so the watermark band lands in image mid-frequencies away
//! from both block-mean features and the bands JPEG discards), band-limits
//! upsamples by an integer factor, then applies gain and a 0.5 offset.
//! Encoding is the exact algebraic inverse, so inversion error never masks
//! watermark signal.
//!
//! The frequency-band transfer between the latent and image planes is a
//! precomputed sparse map in unshifted DFT coordinates; Nyquist rows and
//! columns of the latent plane split across both signed frequencies of the
//! image plane so real planes stay exactly real.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::Latent;
use crate::error::{arg_err, Result};
use crate::fft;
use crate::rng;

/// Real image tensor, shape `(channels, height, width)`, values in `[0, 1]`.
pub type Image = Array3<f64>;

/// Codec parameters; fully determined by the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Seed of the channel-mixing rotation.
    pub seed: u64,
    /// Latent-to-pixel gain. Chosen so that three standard deviations of the
    /// fully denoised latent stay inside the pixel range.
    pub gain: f64,
    /// Integer upsampling factor from latent plane to image plane.
    pub upsample: usize,
}

impl CodecConfig {
    /// Gain matched to a schedule whose fully denoised latents have standard
    /// deviation `1 / sqrt(alpha_T)`.
    pub fn for_alpha_end(seed: u64, alpha_end: f64, upsample: usize) -> Self {
        Self {
            seed,
            gain: alpha_end.sqrt() / 6.0,
            upsample,
        }
    }
}

/// One frequency-transfer entry: latent cell, image cell (both flat,
/// unshifted DFT order) and the interpolation weight.
#[derive(Debug, Clone, Copy)]
struct BandEntry {
    small: u32,
    big: u32,
    weight: f64,
}

/// Fixed invertible linear latent-to-image map.
#[derive(Debug, Clone)]
pub struct ToyCodec {
    cfg: CodecConfig,
    /// Orthogonal channel mix, `channels x channels`.
    mix: Array2<f64>,
    channels: usize,
    plane: (usize, usize),
    band: Vec<BandEntry>,
}

fn orthogonalize(mut m: Array2<f64>) -> Array2<f64> {
    // Gram-Schmidt on rows.
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = (0..n).map(|k| m[(i, k)] * m[(j, k)]).sum();
            for k in 0..n {
                let v = m[(j, k)];
                m[(i, k)] -= dot * v;
            }
        }
        let norm: f64 = (0..n).map(|k| m[(i, k)] * m[(i, k)]).sum::<f64>().sqrt();
        for k in 0..n {
            m[(i, k)] /= norm;
        }
    }
    m
}

/// Frequency transfer table between an `h x w` plane and its `u`-times
/// upsampled partner. Nyquist frequencies of the small plane split evenly
/// across `-N/2` and `+N/2` of the big plane.
fn band_map(h: usize, w: usize, u: usize) -> Vec<BandEntry> {
    let (bh, bw) = (h * u, w * u);
    let mut entries = Vec::with_capacity(h * w + h + w + 1);
    for i in 0..h {
        // Signed frequency of the unshifted row index.
        let fi = if i <= h / 2 { i as isize } else { i as isize - h as isize };
        for j in 0..w {
            let fj = if j <= w / 2 { j as isize } else { j as isize - w as isize };
            let fis: &[isize] = if u > 1 && fi == (h / 2) as isize {
                &[(h / 2) as isize, -((h / 2) as isize)]
            } else {
                std::slice::from_ref(&fi)
            };
            let fjs: &[isize] = if u > 1 && fj == (w / 2) as isize {
                &[(w / 2) as isize, -((w / 2) as isize)]
            } else {
                std::slice::from_ref(&fj)
            };
            let weight = 1.0 / (fis.len() * fjs.len()) as f64;
            for &a in fis {
                for &b in fjs {
                    let bi = a.rem_euclid(bh as isize) as usize;
                    let bj = b.rem_euclid(bw as isize) as usize;
                    entries.push(BandEntry {
                        small: (i * w + j) as u32,
                        big: (bi * bw + bj) as u32,
                        weight,
                    });
                }
            }
        }
    }
    entries
}

impl ToyCodec {
    pub fn new(cfg: CodecConfig, channels: usize, plane: (usize, usize)) -> Result<Self> {
        if cfg.upsample == 0 {
            return Err(arg_err("upsample factor must be at least 1"));
        }
        if !(cfg.gain > 0.0 && cfg.gain.is_finite()) {
            return Err(arg_err("codec gain must be positive and finite"));
        }
        if plane.0 == 0 || plane.1 == 0 || plane.0 % 2 != 0 || plane.1 % 2 != 0 {
            return Err(arg_err("latent plane dimensions must be positive and even"));
        }
        let mut rng = rng::rng_for(cfg.seed, "codec-mix", 0);
        let raw = Array2::from_shape_simple_fn((channels, channels), || {
            rng.sample::<f64, _>(StandardNormal)
        });
        Ok(Self {
            mix: orthogonalize(raw),
            band: band_map(plane.0, plane.1, cfg.upsample),
            cfg,
            channels,
            plane,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn latent_plane(&self) -> (usize, usize) {
        self.plane
    }

    pub fn image_shape(&self, latent_hw: (usize, usize)) -> (usize, usize, usize) {
        (
            self.channels,
            latent_hw.0 * self.cfg.upsample,
            latent_hw.1 * self.cfg.upsample,
        )
    }

    fn check_latent_shape(&self, z: &Array3<f64>) -> Result<()> {
        let s = z.shape();
        if s[0] != self.channels || (s[1], s[2]) != self.plane {
            return Err(arg_err(format!(
                "latent shape ({},{},{}) does not match the codec ({},{},{})",
                s[0], s[1], s[2], self.channels, self.plane.0, self.plane.1
            )));
        }
        Ok(())
    }

    fn check_image_shape(&self, img: &Array3<f64>) -> Result<()> {
        let s = img.shape();
        let u = self.cfg.upsample;
        if s[0] != self.channels || (s[1], s[2]) != (self.plane.0 * u, self.plane.1 * u) {
            return Err(arg_err(format!(
                "image shape ({},{},{}) does not match the codec output ({},{},{})",
                s[0],
                s[1],
                s[2],
                self.channels,
                self.plane.0 * u,
                self.plane.1 * u
            )));
        }
        Ok(())
    }

    /// Mixed, checkerboard-modulated channel plane as a complex buffer in
    /// spatial order.
    fn mixed_plane(&self, z: &Array3<f64>, out_channel: usize) -> Array2<Complex64> {
        let (h, w) = self.plane;
        let c = self.channels;
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut acc = 0.0;
            for b in 0..c {
                acc += self.mix[(out_channel, b)] * z[(b, i, j)];
            }
            if (i + j) % 2 == 1 {
                acc = -acc;
            }
            Complex64::new(acc, 0.0)
        })
    }

    /// Linear part of decoding: latent field to centered pixel field.
    pub fn decode_field(&self, z: &Array3<f64>) -> Array3<f64> {
        let (h, w) = self.plane;
        let u = self.cfg.upsample;
        let (bh, bw) = (h * u, w * u);
        let amp = (u * u) as f64;
        let mut out = Array3::zeros((self.channels, bh, bw));
        let mut big = Array2::<Complex64>::zeros((bh, bw));
        for ch in 0..self.channels {
            let mut small = self.mixed_plane(z, ch);
            fft::fft2_mut(&mut small);
            big.fill(Complex64::new(0.0, 0.0));
            {
                let s = small.as_slice().expect("standard layout");
                let b = big.as_slice_mut().expect("standard layout");
                for e in &self.band {
                    b[e.big as usize] += s[e.small as usize] * e.weight;
                }
            }
            fft::ifft2_mut(&mut big);
            let mut plane = out.index_axis_mut(ndarray::Axis(0), ch);
            for i in 0..bh {
                for j in 0..bw {
                    plane[(i, j)] = big[(i, j)].re * amp;
                }
            }
        }
        out
    }

    /// Linear part of encoding: centered pixel field back to latent field.
    pub fn encode_field(&self, img: &Array3<f64>) -> Array3<f64> {
        let (h, w) = self.plane;
        let u = self.cfg.upsample;
        let amp = 1.0 / (u * u) as f64;
        // Per-channel downsampled planes (before channel unmixing).
        let mut down = Array3::zeros((self.channels, h, w));
        let mut small = Array2::<Complex64>::zeros((h, w));
        for ch in 0..self.channels {
            let mut big = img
                .index_axis(ndarray::Axis(0), ch)
                .mapv(|v| Complex64::new(v, 0.0));
            fft::fft2_mut(&mut big);
            small.fill(Complex64::new(0.0, 0.0));
            {
                let s = small.as_slice_mut().expect("standard layout");
                let b = big.as_slice().expect("standard layout");
                // The crop gathers split Nyquist cells with unit weight.
                for e in &self.band {
                    s[e.small as usize] += b[e.big as usize];
                }
            }
            fft::ifft2_mut(&mut small);
            let mut plane = down.index_axis_mut(ndarray::Axis(0), ch);
            for i in 0..h {
                for j in 0..w {
                    plane[(i, j)] = small[(i, j)].re * amp;
                }
            }
        }
        // Checkerboard then the transposed mix.
        let c = self.channels;
        Array3::from_shape_fn((c, h, w), |(a, i, j)| {
            let mut acc = 0.0;
            for b in 0..c {
                acc += self.mix[(b, a)] * down[(b, i, j)];
            }
            if (i + j) % 2 == 1 {
                acc = -acc;
            }
            acc
        })
    }

    /// Decode a latent into an image (clamped to `[0, 1]`).
    pub fn decode(&self, z: &Latent) -> Result<Image> {
        self.check_latent_shape(&z.data)?;
        let field = self.decode_field(&z.data);
        Ok(field.mapv(|v| (0.5 + self.cfg.gain * v).clamp(0.0, 1.0)))
    }

    /// Decode without clamping; used to reason about clamp effects.
    pub fn decode_unclamped(&self, z: &Latent) -> Result<Image> {
        self.check_latent_shape(&z.data)?;
        let field = self.decode_field(&z.data);
        Ok(field.mapv(|v| 0.5 + self.cfg.gain * v))
    }

    /// Encode an image back to a latent at timestep 0.
    pub fn encode(&self, img: &Image) -> Result<Latent> {
        self.check_image_shape(img)?;
        let centered = img.mapv(|v| (v - 0.5) / self.cfg.gain);
        Ok(Latent::new(self.encode_field(&centered), 0))
    }

    /// Linear part of [`ToyCodec::encode`] applied to an image direction
    /// (no 0.5 offset handling).
    pub fn encode_linear(&self, v: &Array3<f64>) -> Array3<f64> {
        self.encode_field(&v.mapv(|x| x / self.cfg.gain))
    }

    /// Adjoint of the linear part of [`ToyCodec::encode`], mapping a latent
    /// direction back to an image direction. The crop's adjoint scatters
    /// Nyquist mass with unit weights, which is where it differs from plain
    /// decoding.
    pub fn encode_adjoint(&self, v: &Array3<f64>) -> Array3<f64> {
        let (h, w) = self.plane;
        let u = self.cfg.upsample;
        let (bh, bw) = (h * u, w * u);
        let mut out = Array3::zeros((self.channels, bh, bw));
        let mut big = Array2::<Complex64>::zeros((bh, bw));
        for ch in 0..self.channels {
            let mut small = self.mixed_plane(v, ch);
            fft::fft2_mut(&mut small);
            big.fill(Complex64::new(0.0, 0.0));
            {
                let s = small.as_slice().expect("standard layout");
                let b = big.as_slice_mut().expect("standard layout");
                for e in &self.band {
                    b[e.big as usize] += s[e.small as usize];
                }
            }
            fft::ifft2_mut(&mut big);
            let mut plane = out.index_axis_mut(ndarray::Axis(0), ch);
            for i in 0..bh {
                for j in 0..bw {
                    plane[(i, j)] = big[(i, j)].re;
                }
            }
        }
        out.mapv(|x| x / self.cfg.gain)
    }
}
