//! Real-valued images and 16-bit PGM export.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

/// A real image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(shape_err!("{} values for a {height}x{width} image", data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    /// From a `[h, w]` or `[1, h, w]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w] | [1, h, w] => Self::new(h, w, t.to_vec()),
            ref s => Err(shape_err!("tensor {s:?} is not a single image")),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.data.clone()).expect("consistent image size")
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err!("image shapes {:?} and {:?} differ", self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Binary PGM (P5), 16-bit big-endian, `[0, max_value]` mapped linearly
    /// onto `[0, 65535]` with clamping.
    pub fn encode_pgm(&self, max_value: f64) -> Result<Vec<u8>> {
        if !(max_value > 0.0 && max_value.is_finite()) {
            return Err(Error::Domain(format!("PGM scale must be positive and finite, got {max_value}")));
        }
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        out.reserve(2 * self.data.len());
        for &v in &self.data {
            let s = if v.is_nan() { 0.0 } else { (v / max_value).clamp(0.0, 1.0) };
            out.extend_from_slice(&((s * 65535.0).round() as u16).to_be_bytes());
        }
        Ok(out)
    }

    /// PGM scaled by the image's own maximum (all-zero images stay black).
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let m = self.max();
        let scale = if m > 0.0 && m.is_finite() { m } else { 1.0 };
        self.save_pgm_scaled(path, scale)
    }

    pub fn save_pgm_scaled(&self, path: &Path, max_value: f64) -> Result<()> {
        super::write_atomic(path, &self.encode_pgm(max_value)?)
    }

    /// Parse a 16-bit P5 file back to samples in `[0, 65535]`.
    pub fn decode_pgm(bytes: &[u8], origin: &Path) -> Result<Image> {
        let bad = |m: &str| Error::format(origin, m.to_string());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated PGM header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PGM header"))?);
        }
        if fields[0] != "P5" || fields[3] != "65535" {
            return Err(bad("expected a 16-bit P5 image"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM dimension"));
        let (w, h) = (num(fields[1])?, num(fields[2])?);
        let body = &bytes[pos + 1..];
        if body.len() != 2 * w * h {
            return Err(bad("PGM sample count does not match header"));
        }
        let data = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64).collect();
        Image::new(h, w, data)
    }

    /// `height × width` block average by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(shape_err!("cannot block-average {:?} by {factor}", self.shape()));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = vec![0.0; h * w];
        for r in 0..self.height {
            for c in 0..self.width {
                out[(r / factor) * w + c / factor] += self.get(r, c);
            }
        }
        let n = (factor * factor) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Image::new(h, w, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout_and_roundtrip() {
        let img = Image::new(2, 3, vec![0.0, 0.5, 1.0, 2.0, -1.0, 0.25]).unwrap();
        let bytes = img.encode_pgm(1.0).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n65535\n"));
        let back = Image::decode_pgm(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.data(), &[0.0, 32768.0, 65535.0, 65535.0, 0.0, 16384.0]);
        assert_eq!(&bytes[15..17], &[0x80, 0x00]);
        assert!(img.encode_pgm(0.0).is_err());
        assert!(Image::decode_pgm(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = Image::new(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(img.downsample(2).unwrap().data(), &[3.0]);
    }
}
