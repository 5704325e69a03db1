//! Synthetic data, datasets, image export and quality metrics.

mod dataset;
mod image;
mod metrics;
mod phantom;

use std::path::Path;

use crate::error::{Error, Result};

pub use dataset::{build_dataset, Dataset, DatasetRecord, DatasetSpec, MaskKind, MaskProtocol, Split, MANIFEST_NAME};
pub use image::Image;
pub use metrics::{nmse, psnr, ssim, ssim_with_range};
pub use phantom::{apply_phase_map, perturbed_phantom, shepp_logan, Ellipse, Jitter, PhantomSpec};

/// Write via a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
