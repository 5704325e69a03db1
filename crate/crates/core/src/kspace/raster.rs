use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{shape_err, Error, Result};

const CRAS_MAGIC: &[u8; 8] = b"CRAS0001";

/// A `height × width` complex field, row-major. Used for both image-space and
/// k-space data.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexRaster {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl ComplexRaster {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        check_pow2(height, width)?;
        if data.len() != height * width {
            return Err(shape_err!(
                "raster data length {} != {height}x{width}",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite(format!("raster entry {i}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![Complex64::new(0.0, 0.0); height * width])
    }

    /// Real-valued raster (zero imaginary part).
    pub fn from_real(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        Self::new(
            height,
            width,
            values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        )
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> Complex64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    /// Build from separate real and imaginary planes (the two-channel layout).
    pub fn from_channels(height: usize, width: usize, re: &[f64], im: &[f64]) -> Result<Self> {
        if re.len() != height * width || im.len() != height * width {
            return Err(shape_err!("channel planes do not match {height}x{width}"));
        }
        Self::new(
            height,
            width,
            re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect(),
        )
    }

    pub(crate) fn from_parts_unchecked(height: usize, width: usize, data: Vec<Complex64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    /// Two-channel `[re..., im...]` layout, channel-major.
    pub fn to_channels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.data.len());
        out.extend(self.data.iter().map(|z| z.re));
        out.extend(self.data.iter().map(|z| z.im));
        out
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn real_part(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.re).collect()
    }

    pub fn ensure_same_shape(&self, other: &ComplexRaster) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err!(
                "raster shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &ComplexRaster) -> Result<ComplexRaster> {
        self.ensure_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self::from_parts_unchecked(self.height, self.width, data))
    }

    pub fn scale(&self, s: f64) -> ComplexRaster {
        let data = self.data.iter().map(|z| z * s).collect();
        Self::from_parts_unchecked(self.height, self.width, data)
    }

    pub fn max_abs_diff(&self, other: &ComplexRaster) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Serialize in the CRAS1 layout: magic, `u32` height, `u32` width, then
    /// `f32` (re, im) pairs, all little-endian.
    pub fn write_cras(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(CRAS_MAGIC)?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for z in &self.data {
            buf.extend_from_slice(&(z.re as f32).to_le_bytes());
            buf.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_cras(mut r: impl Read, origin: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(origin, e))?;
        if bytes.len() < 16 || &bytes[..8] != CRAS_MAGIC {
            return Err(Error::format(origin, "missing CRAS0001 magic"));
        }
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected = 16 + height * width * 8;
        if bytes.len() != expected {
            return Err(Error::format(
                origin,
                format!("expected {expected} bytes for {height}x{width}, found {}", bytes.len()),
            ));
        }
        let data = bytes[16..]
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes(c[..4].try_into().unwrap());
                let im = f32::from_le_bytes(c[4..].try_into().unwrap());
                Complex64::new(re as f64, im as f64)
            })
            .collect();
        Self::new(height, width, data).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_cras(&mut buf).expect("write to Vec");
        crate::data::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_cras(std::io::BufReader::new(f), path)
    }
}

pub(crate) fn check_pow2(height: usize, width: usize) -> Result<()> {
    if !height.is_power_of_two() || !width.is_power_of_two() {
        return Err(shape_err!(
            "raster dimensions must be powers of two, got {height}x{width}"
        ));
    }
    Ok(())
}
