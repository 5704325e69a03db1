//! Centered, orthonormal 2D Fourier transforms.
//!
//! `fft2c(x) = fftshift(FFT2(ifftshift(x))) / sqrt(h·w)`; the zero frequency
//! sits at `(h/2, w/2)` and `ifft2c` is the exact inverse and adjoint.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use super::raster::{check_pow2, ComplexRaster};
use crate::error::Result;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, dir: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, dir))
}

pub fn fft2c(img: &ComplexRaster) -> Result<ComplexRaster> {
    transform(img, FftDirection::Forward)
}

pub fn ifft2c(ksp: &ComplexRaster) -> Result<ComplexRaster> {
    transform(ksp, FftDirection::Inverse)
}

pub(crate) fn transform(input: &ComplexRaster, dir: FftDirection) -> Result<ComplexRaster> {
    let (h, w) = input.shape();
    check_pow2(h, w)?;
    let src = input.data();

    // ifftshift on the way in
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for r in 0..h {
        let sr = (r + h / 2) % h;
        for c in 0..w {
            buf[r * w + c] = src[sr * w + (c + w / 2) % w];
        }
    }

    let row_fft = plan(w, dir);
    let mut scratch = vec![Complex64::new(0.0, 0.0); row_fft.get_inplace_scratch_len()];
    for row in buf.chunks_exact_mut(w) {
        row_fft.process_with_scratch(row, &mut scratch);
    }

    let col_fft = plan(h, dir);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    let mut scratch = vec![Complex64::new(0.0, 0.0); col_fft.get_inplace_scratch_len()];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process_with_scratch(&mut col, &mut scratch);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }

    // fftshift on the way out, with orthonormal scaling
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for r in 0..h {
        let dr = (r + h / 2) % h;
        for c in 0..w {
            out[dr * w + (c + w / 2) % w] = buf[r * w + c] * scale;
        }
    }
    Ok(ComplexRaster::from_parts_unchecked(h, w, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_raster(h: usize, w: usize, seed: u64) -> ComplexRaster {
        let mut rng = SeededRng::new(seed);
        ComplexRaster::from_fn(h, w, |_, _| Complex64::new(rng.normal(), rng.normal())).unwrap()
    }

    /// Direct O(N^2) centered DFT, independent of rustfft and the shift logic.
    fn naive_fft2c(x: &ComplexRaster) -> ComplexRaster {
        let (h, w) = x.shape();
        let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
        let norm = 1.0 / ((h * w) as f64).sqrt();
        ComplexRaster::from_fn(h, w, |ku, kv| {
            let mut acc = Complex64::new(0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let phase = -2.0
                        * std::f64::consts::PI
                        * ((ku as f64 - ch) * (r as f64 - ch) / h as f64
                            + (kv as f64 - cw) * (c as f64 - cw) / w as f64);
                    acc += x.get(r, c) * Complex64::from_polar(1.0, phase);
                }
            }
            acc * norm
        })
        .unwrap()
    }

    #[test]
    fn all_ones_gives_center_dc() {
        let x = ComplexRaster::from_real(4, 4, &[1.0; 16]).unwrap();
        let k = fft2c(&x).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expect = if (r, c) == (2, 2) { 4.0 } else { 0.0 };
                assert!((k.get(r, c) - Complex64::new(expect, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn center_impulse_is_flat() {
        let x = ComplexRaster::from_fn(4, 4, |r, c| {
            Complex64::new(if (r, c) == (2, 2) { 1.0 } else { 0.0 }, 0.0)
        })
        .unwrap();
        let k = fft2c(&x).unwrap();
        assert!(k.data().iter().all(|z| (z.norm() - 0.25).abs() < 1e-12));
    }

    #[test]
    fn inverse_of_center_spectrum_is_ones() {
        let k = ComplexRaster::from_fn(4, 4, |r, c| {
            Complex64::new(if (r, c) == (2, 2) { 4.0 } else { 0.0 }, 0.0)
        })
        .unwrap();
        let x = ifft2c(&k).unwrap();
        assert!(x.data().iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn zero_maps_to_zero() {
        let z = ComplexRaster::zeros(8, 16).unwrap();
        assert_eq!(ifft2c(&z).unwrap(), z);
    }

    #[test]
    fn roundtrips_are_identity() {
        let x = random_raster(32, 32, 3);
        assert!(ifft2c(&fft2c(&x).unwrap()).unwrap().max_abs_diff(&x) < 1e-6);
        let k = random_raster(64, 64, 4);
        assert!(fft2c(&ifft2c(&k).unwrap()).unwrap().max_abs_diff(&k) < 1e-6);
    }

    #[test]
    fn matches_naive_centered_dft() {
        for &(h, w) in &[(4, 8), (8, 8), (16, 4)] {
            let x = random_raster(h, w, (h * w) as u64);
            let fast = fft2c(&x).unwrap();
            let slow = naive_fft2c(&x);
            assert!(fast.max_abs_diff(&slow) < 1e-10, "{h}x{w}");
        }
    }

    #[test]
    fn non_power_of_two_rejected() {
        // from_parts_unchecked bypasses the constructor check on purpose
        let bad = ComplexRaster::from_parts_unchecked(3, 4, vec![Complex64::new(0.0, 0.0); 12]);
        assert!(fft2c(&bad).is_err());
    }
}
