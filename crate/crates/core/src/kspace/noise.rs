use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;

use super::raster::ComplexRaster;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Target signal-to-noise ratio of injected k-space noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    /// No noise at all.
    Infinite,
    Db(f64),
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Snr::Infinite => f.write_str("inf"),
            Snr::Db(db) => write!(f, "{db}"),
        }
    }
}

impl FromStr for Snr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinite") {
            return Ok(Snr::Infinite);
        }
        let db: f64 = t
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad SNR value {s:?}")))?;
        if !db.is_finite() {
            return Err(Error::InvalidArgument(format!("bad SNR value {s:?}")));
        }
        Ok(Snr::Db(db))
    }
}

fn sampled(z: &Complex64) -> bool {
    z.re != 0.0 || z.im != 0.0
}

/// Add i.i.d. circular complex Gaussian noise to the measured (nonzero)
/// entries of `ksp`. Per-entry noise variance is set so that
/// `10·log10(P_signal / P_noise) = snr_db`, with `P_signal` the mean squared
/// magnitude over measured entries. Unmeasured zeros stay zero.
pub fn add_complex_noise(ksp: &ComplexRaster, snr: Snr, seed: u64) -> Result<ComplexRaster> {
    let db = match snr {
        Snr::Infinite => return Ok(ksp.clone()),
        Snr::Db(db) => db,
    };
    let (count, power) = ksp
        .data()
        .iter()
        .filter(|z| sampled(z))
        .fold((0usize, 0.0f64), |(n, p), z| (n + 1, p + z.norm_sqr()));
    if count == 0 {
        return Err(Error::Domain(
            "cannot set a finite SNR on an all-zero raster".into(),
        ));
    }
    let signal_power = power / count as f64;
    let noise_power = signal_power / 10f64.powf(db / 10.0);
    // each of re/im carries half the complex variance
    let sigma = (noise_power / 2.0).sqrt();
    let mut rng = SeededRng::new(seed);
    let mut out = ksp.clone();
    for z in out.data_mut().iter_mut() {
        if sampled(z) {
            *z += Complex64::new(sigma * rng.normal(), sigma * rng.normal());
        }
    }
    Ok(out)
}

/// Realized SNR in dB of `noisy` relative to `clean`, over entries measured in
/// `clean`.
pub fn realized_snr_db(clean: &ComplexRaster, noisy: &ComplexRaster) -> Result<f64> {
    clean.ensure_same_shape(noisy)?;
    let (mut n, mut ps, mut pn) = (0usize, 0.0, 0.0);
    for (c, y) in clean.data().iter().zip(noisy.data()) {
        if sampled(c) {
            n += 1;
            ps += c.norm_sqr();
            pn += (y - c).norm_sqr();
        }
    }
    if n == 0 || pn == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (ps / pn).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(seed: u64) -> ComplexRaster {
        let mut rng = SeededRng::new(seed);
        ComplexRaster::from_fn(128, 128, |_, _| Complex64::new(rng.normal(), rng.normal())).unwrap()
    }

    #[test]
    fn infinite_snr_is_bit_exact() {
        let k = signal(1);
        assert_eq!(add_complex_noise(&k, Snr::Infinite, 5).unwrap(), k);
    }

    #[test]
    fn realized_snr_close_to_target() {
        let k = signal(2);
        for db in [0.0, 20.0] {
            let y = add_complex_noise(&k, Snr::Db(db), 9).unwrap();
            let got = realized_snr_db(&k, &y).unwrap();
            assert!((got - db).abs() < 0.5, "target {db} got {got}");
        }
    }

    #[test]
    fn zero_signal_is_domain_error() {
        let z = ComplexRaster::zeros(8, 8).unwrap();
        assert!(matches!(add_complex_noise(&z, Snr::Db(10.0), 0), Err(Error::Domain(_))));
        assert!(add_complex_noise(&z, Snr::Infinite, 0).is_ok());
    }

    #[test]
    fn unmeasured_entries_stay_zero() {
        let k = ComplexRaster::from_fn(8, 8, |_, c| {
            Complex64::new(if c % 2 == 0 { 1.0 } else { 0.0 }, 0.0)
        })
        .unwrap();
        let y = add_complex_noise(&k, Snr::Db(5.0), 3).unwrap();
        for r in 0..8 {
            for c in (1..8).step_by(2) {
                assert_eq!(y.get(r, c), Complex64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn snr_parsing() {
        assert_eq!("inf".parse::<Snr>().unwrap(), Snr::Infinite);
        assert_eq!("15".parse::<Snr>().unwrap(), Snr::Db(15.0));
        assert!("abc".parse::<Snr>().is_err());
    }
}
