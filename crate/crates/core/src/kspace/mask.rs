//! Cartesian phase-encode line masks.
//!
//! A [`SamplingMask`] selects k-space columns; its 2D expansion broadcasts each
//! column value down every row. [`Mask2d`] is the general binary raster used
//! for branch partitions that are not column-separable.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::raster::ComplexRaster;
use crate::error::{shape_err, Error, Result};
use crate::rng::SeededRng;

/// `floor(x + 0.5)`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// First index of a contiguous band of `count` lines centered on `width / 2`.
pub fn center_band_start(width: usize, count: usize) -> usize {
    (width - count + 1) / 2
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingMask {
    width: usize,
    lines: Vec<bool>,
    center_count: usize,
}

impl SamplingMask {
    /// Build from explicit line flags. `center_count` is measured as the
    /// longest all-ones band centered on `width / 2`.
    pub fn from_lines(lines: Vec<bool>) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::InvalidArgument("mask must have at least one line".into()));
        }
        let width = lines.len();
        let mut center_count = 0;
        for count in 1..=width {
            let start = center_band_start(width, count);
            if lines[start..start + count].iter().all(|&l| l) {
                center_count = count;
            } else {
                break;
            }
        }
        Ok(Self {
            width,
            lines,
            center_count,
        })
    }

    /// Build with a known center band; fails if the band is not all ones.
    pub fn with_center(lines: Vec<bool>, center_count: usize) -> Result<Self> {
        let width = lines.len();
        if center_count > width {
            return Err(shape_err!("center band {center_count} wider than mask {width}"));
        }
        let start = center_band_start(width, center_count);
        if !lines[start..start + center_count].iter().all(|&l| l) {
            return Err(Error::InvalidArgument("center band lines are not all sampled".into()));
        }
        Ok(Self {
            width,
            lines,
            center_count,
        })
    }

    pub fn full(width: usize) -> Self {
        Self::from_lines(vec![true; width]).expect("width > 0")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn lines(&self) -> &[bool] {
        &self.lines
    }

    pub fn is_sampled(&self, col: usize) -> bool {
        self.lines[col]
    }

    pub fn center_count(&self) -> usize {
        self.center_count
    }

    pub fn sampled_count(&self) -> usize {
        self.lines.iter().filter(|&&l| l).count()
    }

    pub fn complement(&self) -> SamplingMask {
        Self::from_lines(self.lines.iter().map(|&l| !l).collect()).expect("same width")
    }

    pub fn to_2d(&self, height: usize) -> Mask2d {
        let mut data = Vec::with_capacity(height * self.width);
        for _ in 0..height {
            data.extend_from_slice(&self.lines);
        }
        Mask2d {
            height,
            width: self.width,
            data,
        }
    }

    /// Hadamard product with the row-broadcast mask.
    pub fn apply(&self, ksp: &ComplexRaster) -> Result<ComplexRaster> {
        if ksp.width() != self.width {
            return Err(shape_err!(
                "mask width {} != k-space width {}",
                self.width,
                ksp.width()
            ));
        }
        let mut out = ksp.clone();
        let w = self.width;
        for (i, z) in out.data_mut().iter_mut().enumerate() {
            if !self.lines[i % w] {
                *z = num_complex::Complex64::new(0.0, 0.0);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_atomic(path, format!("{self}\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse().map_err(|e: Error| Error::format(path, e.to_string()))
    }
}

/// One `'0'`/`'1'` character per line.
impl fmt::Display for SamplingMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &l in &self.lines {
            f.write_str(if l { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for SamplingMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim_end_matches(['\n', '\r']);
        let lines = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidArgument(format!(
                    "mask character {other:?} is not '0' or '1'"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_lines(lines)
    }
}

/// General binary k-space raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2d {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask2d {
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Mask2d {
        Mask2d {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    pub fn apply(&self, ksp: &ComplexRaster) -> Result<ComplexRaster> {
        if ksp.shape() != self.shape() {
            return Err(shape_err!(
                "mask shape {:?} != k-space shape {:?}",
                self.shape(),
                ksp.shape()
            ));
        }
        let mut out = ksp.clone();
        for (z, &keep) in out.data_mut().iter_mut().zip(&self.data) {
            if !keep {
                *z = num_complex::Complex64::new(0.0, 0.0);
            }
        }
        Ok(out)
    }
}

fn validate_center_frac(center_frac: f64) -> Result<()> {
    if !(center_frac > 0.0 && center_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "center fraction must lie in (0, 1], got {center_frac}"
        )));
    }
    Ok(())
}

fn center_lines(width: usize, center_frac: f64) -> (usize, Vec<bool>) {
    let count = round_half_up(center_frac * width as f64).min(width);
    let mut lines = vec![false; width];
    let start = center_band_start(width, count);
    lines[start..start + count].iter_mut().for_each(|l| *l = true);
    (count, lines)
}

/// Random 1D mask: a contiguous center band plus independent Bernoulli lines
/// elsewhere, tuned so the expected total is `width / accel`.
pub fn random_line_mask(width: usize, accel: f64, center_frac: f64, seed: u64) -> Result<SamplingMask> {
    if width < 4 {
        return Err(Error::InvalidArgument(format!("mask width must be >= 4, got {width}")));
    }
    if !(accel >= 1.0) || !accel.is_finite() {
        return Err(Error::InvalidArgument(format!("acceleration must be >= 1, got {accel}")));
    }
    validate_center_frac(center_frac)?;
    let (count, mut lines) = center_lines(width, center_frac);
    let p = if count < width {
        ((width as f64 / accel - count as f64) / (width - count) as f64).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut rng = SeededRng::new(seed);
    for l in lines.iter_mut() {
        // a draw for every line keeps the stream aligned across center sizes
        let hit = rng.bernoulli(p);
        *l = *l || hit;
    }
    SamplingMask::with_center(lines, count)
}

/// Probability used for the non-center lines of [`random_line_mask`].
pub fn random_line_probability(width: usize, accel: f64, center_frac: f64) -> f64 {
    let count = round_half_up(center_frac * width as f64).min(width);
    if count >= width {
        return 0.0;
    }
    ((width as f64 / accel - count as f64) / (width - count) as f64).clamp(0.0, 1.0)
}

/// Equispaced mask: the center band united with every `accel`-th line
/// starting at `offset`. `center_frac = 0` disables the band.
pub fn equispaced_line_mask(width: usize, accel: usize, center_frac: f64, offset: usize) -> Result<SamplingMask> {
    if width == 0 {
        return Err(Error::InvalidArgument("mask width must be positive".into()));
    }
    if accel < 1 {
        return Err(Error::InvalidArgument("acceleration must be >= 1".into()));
    }
    if offset >= accel {
        return Err(Error::InvalidArgument(format!(
            "offset {offset} must be < acceleration {accel}"
        )));
    }
    if !(0.0..=1.0).contains(&center_frac) {
        return Err(Error::InvalidArgument(format!(
            "center fraction must lie in [0, 1], got {center_frac}"
        )));
    }
    let (count, mut lines) = center_lines(width, center_frac);
    for (i, l) in lines.iter_mut().enumerate() {
        if i % accel == offset {
            *l = true;
        }
    }
    SamplingMask::with_center(lines, count)
}

/// Low/high band partition: the low band holds twice the retained center
/// lines, the high band is its complement.
pub fn partition_band_masks(width: usize, center_frac: f64) -> Result<(SamplingMask, SamplingMask)> {
    validate_center_frac(center_frac)?;
    let band = 2 * round_half_up(center_frac * width as f64);
    if band > width {
        return Err(Error::Geometry(format!(
            "low-frequency band of {band} lines exceeds width {width}"
        )));
    }
    let mut lines = vec![false; width];
    let start = center_band_start(width, band);
    lines[start..start + band].iter_mut().for_each(|l| *l = true);
    let low = SamplingMask::with_center(lines, band)?;
    let high = low.complement();
    Ok((low, high))
}

/// Square-region partition: a centered square holding (as nearly as an
/// integer side allows) the same number of samples as the band partition.
pub fn square_partition_masks(height: usize, width: usize, center_frac: f64) -> Result<(Mask2d, Mask2d)> {
    validate_center_frac(center_frac)?;
    let band = 2 * round_half_up(center_frac * width as f64);
    let area = (band * height) as f64;
    let side = round_half_up(area.sqrt()).clamp(1, height.min(width));
    let r0 = center_band_start(height, side);
    let c0 = center_band_start(width, side);
    let low = Mask2d::from_fn(height, width, |r, c| {
        (r0..r0 + side).contains(&r) && (c0..c0 + side).contains(&c)
    });
    let high = low.complement();
    Ok((low, high))
}
