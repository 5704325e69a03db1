//! Image quality metrics: NMSE, PSNR and SSIM.
//!
//! SSIM follows the common benchmark convention: a 7×7 uniform window over
//! every fully contained position, `K1 = 0.01`, `K2 = 0.03`, unbiased local
//! (co)variances, and dynamic range `max(reference)`.

use crate::error::{Error, Result};

use super::image::Image;

const SSIM_WIN: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn sum_sq(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum()
}

fn mse(pred: &Image, reference: &Image) -> Result<f64> {
    pred.ensure_same_shape(reference)?;
    let n = pred.data().len() as f64;
    Ok(sum_sq(pred.data().iter().zip(reference.data()).map(|(a, b)| a - b)) / n)
}

/// `‖pred − ref‖² / ‖ref‖²`.
pub fn nmse(pred: &Image, reference: &Image) -> Result<f64> {
    pred.ensure_same_shape(reference)?;
    let denom = sum_sq(reference.data().iter().copied());
    if denom == 0.0 {
        return Err(Error::Domain("NMSE against an all-zero reference".into()));
    }
    Ok(sum_sq(pred.data().iter().zip(reference.data()).map(|(a, b)| a - b)) / denom)
}

/// `10·log10(max(ref)² / MSE)` in dB; infinite for a perfect match.
pub fn psnr(pred: &Image, reference: &Image) -> Result<f64> {
    let peak = reference.max();
    if !(peak > 0.0) {
        return Err(Error::Domain("PSNR needs a reference with a positive maximum".into()));
    }
    let e = mse(pred, reference)?;
    Ok(if e == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / e).log10() })
}

/// SSIM with dynamic range `max(reference)`.
pub fn ssim(pred: &Image, reference: &Image) -> Result<f64> {
    let range = reference.max();
    if !(range > 0.0) {
        return Err(Error::Domain("SSIM needs a reference with a positive maximum".into()));
    }
    ssim_with_range(pred, reference, range)
}

/// Summed-area table with a zero border row and column.
fn integral(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += f(r * w + c);
            s[(r + 1) * (w + 1) + c + 1] = s[r * (w + 1) + c + 1] + row;
        }
    }
    s
}

/// SSIM with an explicit dynamic range; symmetric in its image arguments.
pub fn ssim_with_range(a: &Image, b: &Image, range: f64) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w) = a.shape();
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::Domain(format!("SSIM needs at least {SSIM_WIN}x{SSIM_WIN} pixels, got {h}x{w}")));
    }
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::Domain(format!("SSIM range must be positive, got {range}")));
    }
    let (x, y) = (a.data(), b.data());
    let sx = integral(h, w, |i| x[i]);
    let sy = integral(h, w, |i| y[i]);
    let sxx = integral(h, w, |i| x[i] * x[i]);
    let syy = integral(h, w, |i| y[i] * y[i]);
    let sxy = integral(h, w, |i| x[i] * y[i]);
    let np = (SSIM_WIN * SSIM_WIN) as f64;
    let cov_norm = np / (np - 1.0);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let box_mean = |s: &[f64], r: usize, c: usize| {
        let (r1, c1) = (r + SSIM_WIN, c + SSIM_WIN);
        (s[r1 * (w + 1) + c1] - s[r * (w + 1) + c1] - s[r1 * (w + 1) + c] + s[r * (w + 1) + c]) / np
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - SSIM_WIN {
        for c in 0..=w - SSIM_WIN {
            let (ux, uy) = (box_mean(&sx, r, c), box_mean(&sy, r, c));
            let vx = cov_norm * (box_mean(&sxx, r, c) - ux * ux);
            let vy = cov_norm * (box_mean(&syy, r, c) - uy * uy);
            let vxy = cov_norm * (box_mean(&sxy, r, c) - ux * uy);
            total += ((2.0 * ux * uy + c1) * (2.0 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
