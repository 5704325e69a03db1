use std::fmt;
use std::str::FromStr;

use super::fft::{fft2c, ifft2c};
use super::mask::SamplingMask;
use super::raster::ComplexRaster;
use crate::error::{shape_err, Error, Result};

/// Data-consistency weight λ. `Infinite` is the noiseless hard replacement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DcWeight {
    Finite(f64),
    Infinite,
}

impl Default for DcWeight {
    fn default() -> Self {
        DcWeight::Infinite
    }
}

impl DcWeight {
    pub fn finite(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "DC weight must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(DcWeight::Finite(lambda))
    }

    /// Weight `1/(1+λ)` kept from the network prediction on sampled lines.
    pub fn predicted_fraction(self) -> f64 {
        match self {
            DcWeight::Finite(l) => 1.0 / (1.0 + l),
            DcWeight::Infinite => 0.0,
        }
    }

    /// Weight `λ/(1+λ)` given to the measurement on sampled lines.
    pub fn measured_fraction(self) -> f64 {
        match self {
            DcWeight::Finite(l) => l / (1.0 + l),
            DcWeight::Infinite => 1.0,
        }
    }
}

impl fmt::Display for DcWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DcWeight::Finite(l) => write!(f, "{l}"),
            DcWeight::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for DcWeight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinite") {
            return Ok(DcWeight::Infinite);
        }
        let v: f64 = t
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad DC weight {s:?}")))?;
        DcWeight::finite(v)
    }
}

fn check_shapes(x: &ComplexRaster, y: &ComplexRaster, m: &SamplingMask) -> Result<()> {
    x.ensure_same_shape(y)?;
    if m.width() != x.width() {
        return Err(shape_err!(
            "mask width {} != raster width {}",
            m.width(),
            x.width()
        ));
    }
    Ok(())
}

/// Soft/hard data consistency in image space.
///
/// With `y_c = fft2c(x_in)`, unsampled entries keep `y_c` while sampled entries
/// become `(y_c + λ·ŷ) / (1 + λ)`; `λ = ∞` replaces them with `ŷ`.
pub fn data_consistency(
    x_in: &ComplexRaster,
    y_meas: &ComplexRaster,
    m: &SamplingMask,
    w: DcWeight,
) -> Result<ComplexRaster> {
    check_shapes(x_in, y_meas, m)?;
    let mut k = fft2c(x_in)?;
    let (keep, take) = (w.predicted_fraction(), w.measured_fraction());
    let width = k.width();
    for (i, (z, y)) in k.data_mut().iter_mut().zip(y_meas.data()).enumerate() {
        if m.is_sampled(i % width) {
            *z = *z * keep + *y * take;
        }
    }
    ifft2c(&k)
}

/// The linear part `F^H Λ F g` of the DC map; also its own adjoint.
pub(crate) fn dc_linear_part(g: &ComplexRaster, m: &SamplingMask, w: DcWeight) -> Result<ComplexRaster> {
    let mut k = fft2c(g)?;
    let keep = w.predicted_fraction();
    let width = k.width();
    for (i, z) in k.data_mut().iter_mut().enumerate() {
        if m.is_sampled(i % width) {
            *z *= keep;
        }
    }
    ifft2c(&k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::{random_line_mask, Complex64};
    use crate::rng::SeededRng;

    fn setup(seed: u64) -> (ComplexRaster, ComplexRaster, SamplingMask) {
        let mut rng = SeededRng::new(seed);
        let x = ComplexRaster::from_fn(16, 16, |_, _| Complex64::new(rng.normal(), rng.normal())).unwrap();
        let truth = ComplexRaster::from_fn(16, 16, |_, _| Complex64::new(rng.normal(), rng.normal())).unwrap();
        let m = random_line_mask(16, 4.0, 0.125, seed).unwrap();
        let y = m.apply(&fft2c(&truth).unwrap()).unwrap();
        (x, y, m)
    }

    #[test]
    fn hard_dc_pins_sampled_lines() {
        let (x, y, m) = setup(1);
        let out = data_consistency(&x, &y, &m, DcWeight::Infinite).unwrap();
        let k = fft2c(&out).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                if m.is_sampled(c) {
                    assert!((k.get(r, c) - y.get(r, c)).norm() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn hard_dc_fixed_point_and_idempotence() {
        let (x, y, m) = setup(2);
        let once = data_consistency(&x, &y, &m, DcWeight::Infinite).unwrap();
        let twice = data_consistency(&once, &y, &m, DcWeight::Infinite).unwrap();
        assert!(once.max_abs_diff(&twice) < 1e-6);
    }

    #[test]
    fn unit_lambda_averages() {
        // one sampled column; k-space entry y_c = 2 where the measurement is 4
        let mut lines = vec![false; 4];
        lines[2] = true;
        let m = SamplingMask::from_lines(lines).unwrap();
        let mut kx = ComplexRaster::zeros(4, 4).unwrap();
        kx.data_mut()[2 * 4 + 2] = Complex64::new(2.0, 0.0);
        let mut ky = ComplexRaster::zeros(4, 4).unwrap();
        ky.data_mut()[2 * 4 + 2] = Complex64::new(4.0, 0.0);
        let x = ifft2c(&kx).unwrap();
        let out = data_consistency(&x, &ky, &m, DcWeight::Finite(1.0)).unwrap();
        let k = fft2c(&out).unwrap();
        assert!((k.get(2, 2) - Complex64::new(3.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn linear_when_measurement_is_zero() {
        let (x, _, m) = setup(3);
        let zero = ComplexRaster::zeros(16, 16).unwrap();
        for w in [DcWeight::Infinite, DcWeight::Finite(0.5)] {
            let a = 2.5;
            let lhs = data_consistency(&x.scale(a), &zero, &m, w).unwrap();
            let rhs = data_consistency(&x, &zero, &m, w).unwrap().scale(a);
            assert!(lhs.max_abs_diff(&rhs) < 1e-10);
            let lin = dc_linear_part(&x, &m, w).unwrap();
            assert!(lin.max_abs_diff(&data_consistency(&x, &zero, &m, w).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let (x, y, _) = setup(4);
        let m = SamplingMask::full(8);
        assert!(data_consistency(&x, &y, &m, DcWeight::Infinite).is_err());
    }

    #[test]
    fn weight_parsing() {
        assert_eq!("inf".parse::<DcWeight>().unwrap(), DcWeight::Infinite);
        assert_eq!("0.5".parse::<DcWeight>().unwrap(), DcWeight::Finite(0.5));
        assert!("-1".parse::<DcWeight>().is_err());
    }
}
