//! Analytic ellipse phantoms.

use crate::kspace::{ComplexRaster, Complex64};
use crate::error::Result;
use crate::rng::{derive_seed, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    /// Additive intensity inside the ellipse.
    pub intensity: f64,
    /// Semi-axis along the (rotated) x direction.
    pub a: f64,
    /// Semi-axis along the (rotated) y direction.
    pub b: f64,
    pub x0: f64,
    pub y0: f64,
    /// Counter-clockwise rotation in radians.
    pub phi: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.phi.sin_cos();
        let (dx, dy) = (x - self.x0, y - self.y0);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Maximum relative perturbation applied by [`PhantomSpec::perturbed`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Absolute shift of ellipse centers.
    pub center: f64,
    /// Relative change of semi-axes.
    pub axis: f64,
    /// Absolute rotation change in radians.
    pub rotation: f64,
    /// Relative change of intensities.
    pub intensity: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        center: 0.0,
        axis: 0.0,
        rotation: 0.0,
        intensity: 0.0,
    };

    pub fn scaled(self, s: f64) -> Jitter {
        Jitter {
            center: self.center * s,
            axis: self.axis * s,
            rotation: self.rotation * s,
            intensity: self.intensity * s,
        }
    }
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            center: 0.1,
            axis: 0.1,
            rotation: 0.2,
            intensity: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub ellipses: Vec<Ellipse>,
}

impl PhantomSpec {
    /// The modified (contrast-enhanced) ten-ellipse Shepp–Logan head.
    pub fn shepp_logan() -> Self {
        const E: [(f64, f64, f64, f64, f64, f64); 10] = [
            (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
            (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
            (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
            (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
            (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
            (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
            (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
            (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
            (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
            (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
        ];
        PhantomSpec {
            ellipses: E
                .iter()
                .map(|&(intensity, a, b, x0, y0, deg)| Ellipse {
                    intensity,
                    a,
                    b,
                    x0,
                    y0,
                    phi: deg.to_radians(),
                })
                .collect(),
        }
    }

    /// Deterministically jittered copy; `Jitter::NONE` returns `self` exactly.
    pub fn perturbed(&self, seed: u64, jitter: &Jitter) -> PhantomSpec {
        let mut rng = SeededRng::new(derive_seed(seed, &[0x5048_414e]));
        let mut sym = |r: f64| rng.uniform_range(-1.0, 1.0) * r;
        PhantomSpec {
            ellipses: self
                .ellipses
                .iter()
                .map(|e| Ellipse {
                    x0: e.x0 + sym(jitter.center),
                    y0: e.y0 + sym(jitter.center),
                    a: e.a * (1.0 + sym(jitter.axis)),
                    b: e.b * (1.0 + sym(jitter.axis)),
                    phi: e.phi + sym(jitter.rotation),
                    intensity: e.intensity * (1.0 + sym(jitter.intensity)),
                })
                .collect(),
        }
    }

    /// Rasterize by pixel-center membership, clamp negatives, scale the
    /// maximum to one.
    pub fn render(&self, height: usize, width: usize) -> Result<ComplexRaster> {
        let mut vals = vec![0.0; height * width];
        for i in 0..height {
            let y = 1.0 - (2 * i + 1) as f64 / height as f64;
            for j in 0..width {
                let x = (2 * j + 1) as f64 / width as f64 - 1.0;
                vals[i * width + j] = self
                    .ellipses
                    .iter()
                    .filter(|e| e.contains(x, y))
                    .map(|e| e.intensity)
                    .sum::<f64>()
                    .max(0.0);
            }
        }
        let m = vals.iter().copied().fold(0.0, f64::max);
        if m > 0.0 {
            vals.iter_mut().for_each(|v| *v = (*v / m).min(1.0));
        }
        ComplexRaster::from_real(height, width, &vals)
    }
}

pub fn shepp_logan(height: usize, width: usize) -> Result<ComplexRaster> {
    PhantomSpec::shepp_logan().render(height, width)
}

/// Render `base` under the default jitter drawn from `seed`.
pub fn perturbed_phantom(base: &PhantomSpec, seed: u64, height: usize, width: usize) -> Result<ComplexRaster> {
    base.perturbed(seed, &Jitter::default()).render(height, width)
}

/// Multiply by a smooth phase `exp(i·φ)`, with `φ` a seeded mix of linear and
/// quadratic ramps (at most a few radians across the field of view).
pub fn apply_phase_map(img: &ComplexRaster, seed: u64) -> ComplexRaster {
    let mut rng = SeededRng::new(derive_seed(seed, &[0x5048_4153]));
    let (gx, gy, q, c) = (
        rng.uniform_range(-1.0, 1.0),
        rng.uniform_range(-1.0, 1.0),
        rng.uniform_range(-1.0, 1.0),
        rng.uniform_range(-std::f64::consts::PI, std::f64::consts::PI),
    );
    let (h, w) = img.shape();
    let mut out = img.clone();
    for i in 0..h {
        let y = 1.0 - (2 * i + 1) as f64 / h as f64;
        for j in 0..w {
            let x = (2 * j + 1) as f64 / w as f64 - 1.0;
            let phi = c + gx * x + gy * y + q * (x * x + y * y);
            out.data_mut()[i * w + j] *= Complex64::from_polar(1.0, phi);
        }
    }
    out
}
