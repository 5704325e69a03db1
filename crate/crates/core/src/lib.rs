//! Convolution-free accelerated MRI reconstruction.
//!
//! The crate is organised bottom-up:
//!
//! * [`kspace`] — complex rasters, centered orthonormal 2D transforms, Cartesian
//!   line masks, point spread functions, noise injection and data consistency.
//! * [`autodiff`] — a small reverse-mode tape over dense `f64` tensors plus the
//!   finite-difference checker used as the gradient oracle.
//! * [`swin`] — window / shifted-window attention, Swin block pairs and the
//!   Swin-Unet encoder–decoder.
//! * [`model`] — the multi-branch, weight-shared DC cascade with the PSF-guided
//!   positional embedding and the magnitude reconstruction tail.
//! * [`data`] — phantoms, datasets and image-quality metrics.
//! * [`training`] — RMSProp, the epoch loop, evaluation sweeps and checkpoints.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod kspace;
pub mod model;
pub mod rng;
pub mod swin;
pub mod training;

pub use error::{Error, Result};
