//! Centered 2-D Fourier transforms and band-limited resampling.
//!
//! Convention: unnormalized forward transform, `1/(h*w)` inverse, and a
//! centered representation with the zero frequency at `(h/2, w/2)`. A
//! centered index `(i, j)` corresponds to the frequency `(i - h/2, j - w/2)`
//! in cycles per plane.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    // Plan construction dominates small transforms; cache per thread.
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry((len, inverse))
            .or_insert_with(|| {
                let dir = if inverse {
                    rustfft::FftDirection::Inverse
                } else {
                    rustfft::FftDirection::Forward
                };
                FftPlanner::new().plan_fft(len, dir)
            })
            .clone()
    })
}

fn fft2_inplace(buf: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = buf.dim();
    let row_fft = plan(w, inverse);
    {
        let slice = buf.as_slice_mut().expect("standard layout");
        for row in slice.chunks_exact_mut(w) {
            row_fft.process(row);
        }
    }
    // Columns: transpose, run rows, transpose back.
    let mut t = Array2::from_shape_fn((w, h), |(i, j)| buf[(j, i)]);
    let col_fft = plan(h, inverse);
    {
        let slice = t.as_slice_mut().expect("standard layout");
        for row in slice.chunks_exact_mut(h) {
            col_fft.process(row);
        }
    }
    *buf = Array2::from_shape_fn((h, w), |(i, j)| t[(j, i)]);
}

/// Unnormalized forward 2-D DFT (uncentered representation).
pub fn fft2(plane: &Array2<Complex64>) -> Array2<Complex64> {
    let mut out = plane.clone();
    fft2_inplace(&mut out, false);
    out
}

/// In-place unnormalized forward transform (uncentered).
pub(crate) fn fft2_mut(buf: &mut Array2<Complex64>) {
    fft2_inplace(buf, false);
}

/// In-place inverse transform with `1/(h*w)` normalization (uncentered).
pub(crate) fn ifft2_mut(buf: &mut Array2<Complex64>) {
    fft2_inplace(buf, true);
    let n = (buf.nrows() * buf.ncols()) as f64;
    buf.mapv_inplace(|v| v / n);
}

/// Inverse 2-D DFT with `1/(h*w)` normalization (uncentered representation).
pub fn ifft2(plane: &Array2<Complex64>) -> Array2<Complex64> {
    let mut out = plane.clone();
    fft2_inplace(&mut out, true);
    let n = (out.nrows() * out.ncols()) as f64;
    out.mapv_inplace(|v| v / n);
    out
}

/// Move the zero frequency from index 0 to the plane center.
pub fn fftshift(plane: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = plane.dim();
    let (sh, sw) = (h / 2, w / 2);
    Array2::from_shape_fn((h, w), |(i, j)| {
        plane[((i + h - sh) % h, (j + w - sw) % w)]
    })
}

/// Inverse of [`fftshift`] (differs from it when a dimension is odd).
pub fn ifftshift(plane: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = plane.dim();
    let (sh, sw) = (h / 2, w / 2);
    Array2::from_shape_fn((h, w), |(i, j)| plane[((i + sh) % h, (j + sw) % w)])
}

/// Centered spectrum of a real plane.
pub fn fft2_centered(plane: &Array2<f64>) -> Array2<Complex64> {
    let complex = plane.mapv(|v| Complex64::new(v, 0.0));
    fftshift(&fft2(&complex))
}

/// Real part of the inverse transform of a centered spectrum.
pub fn ifft2_centered_real(spec: &Array2<Complex64>) -> Array2<f64> {
    ifft2(&ifftshift(spec)).mapv(|v| v.re)
}

/// Conjugate-partner index of a centered cell: the cell that must carry the
/// complex conjugate for the spatial plane to be real.
pub fn mirror_index(shape: (usize, usize), cell: (usize, usize)) -> (usize, usize) {
    let (h, w) = shape;
    ((h - cell.0) % h, (w - cell.1) % w)
}

/// Zero-pad a centered `h x w` spectrum into a centered `uh x uw` spectrum.
///
/// Nyquist rows/columns of the small plane are self-conjugate; their mass is
/// split evenly between the `-N/2` and `+N/2` positions of the large plane so
/// that Hermitian spectra stay Hermitian and the inverse transform of a real
/// source stays exactly real.
pub fn pad_centered(spec: &Array2<Complex64>, factor: usize) -> Array2<Complex64> {
    pad_centered_impl(spec, factor, true)
}

/// Like [`pad_centered`] but scattering Nyquist mass with unit weight to
/// both `-N/2` and `+N/2`. This is the exact adjoint of [`crop_centered`].
pub fn pad_centered_unit(spec: &Array2<Complex64>, factor: usize) -> Array2<Complex64> {
    pad_centered_impl(spec, factor, false)
}

fn pad_centered_impl(spec: &Array2<Complex64>, factor: usize, split: bool) -> Array2<Complex64> {
    let (h, w) = spec.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "even dimensions required");
    assert!(factor >= 1);
    let (bh, bw) = (h * factor, w * factor);
    let mut out = Array2::zeros((bh, bw));
    if factor == 1 {
        out.assign(spec);
        return out;
    }
    let (ch, cw) = (h / 2, w / 2); // small-plane center
    let (bch, bcw) = (bh / 2, bw / 2); // big-plane center
    for i in 0..h {
        let fi = i as isize - ch as isize; // frequency in [-h/2, h/2)
        for j in 0..w {
            let fj = j as isize - cw as isize;
            let v = spec[(i, j)];
            if v == Complex64::new(0.0, 0.0) {
                continue;
            }
            // Rows/cols at -N/2 go to both +N/2 and -N/2.
            let fis: &[isize] = if fi == -(ch as isize) {
                &[-(ch as isize), ch as isize]
            } else {
                std::slice::from_ref(&fi)
            };
            let fjs: &[isize] = if fj == -(cw as isize) {
                &[-(cw as isize), cw as isize]
            } else {
                std::slice::from_ref(&fj)
            };
            let weight = if split {
                1.0 / (fis.len() * fjs.len()) as f64
            } else {
                1.0
            };
            for &a in fis {
                for &b in fjs {
                    let ti = (a + bch as isize) as usize;
                    let tj = (b + bcw as isize) as usize;
                    out[(ti, tj)] += v * weight;
                }
            }
        }
    }
    out
}

/// Inverse of [`pad_centered`]: crop the centered low band of a `uh x uw`
/// spectrum back to `h x w`, summing the split Nyquist contributions.
pub fn crop_centered(spec: &Array2<Complex64>, factor: usize) -> Array2<Complex64> {
    let (bh, bw) = spec.dim();
    assert!(factor >= 1 && bh % factor == 0 && bw % factor == 0);
    let (h, w) = (bh / factor, bw / factor);
    assert!(h % 2 == 0 && w % 2 == 0, "even dimensions required");
    let mut out = Array2::zeros((h, w));
    if factor == 1 {
        out.assign(spec);
        return out;
    }
    let (ch, cw) = (h / 2, w / 2);
    let (bch, bcw) = (bh / 2, bw / 2);
    for i in 0..h {
        let fi = i as isize - ch as isize;
        for j in 0..w {
            let fj = j as isize - cw as isize;
            let fis: &[isize] = if fi == -(ch as isize) {
                &[-(ch as isize), ch as isize]
            } else {
                std::slice::from_ref(&fi)
            };
            let fjs: &[isize] = if fj == -(cw as isize) {
                &[-(cw as isize), cw as isize]
            } else {
                std::slice::from_ref(&fj)
            };
            let mut acc = Complex64::new(0.0, 0.0);
            for &a in fis {
                for &b in fjs {
                    acc += spec[((a + bch as isize) as usize, (b + bcw as isize) as usize)];
                }
            }
            out[(i, j)] = acc;
        }
    }
    out
}
