//! Phantom datasets with volume-level splits, per-volume masks and an
//! on-disk manifest.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kspace::{equispaced_line_mask, random_line_mask, ComplexRaster, SamplingMask};
use crate::rng::derive_seed;

use super::phantom::{apply_phase_map, Jitter, PhantomSpec};

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::InvalidArgument(format!("unknown split '{s}'"))),
        }
    }
}

/// One slice: a fully sampled reference image and its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub volume: usize,
    pub slice: usize,
    pub split: Split,
    pub image: ComplexRaster,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_volumes: usize,
    pub slices_per_volume: usize,
    pub height: usize,
    pub width: usize,
    /// Fraction of volumes (rounded) assigned to training.
    pub split_frac: f64,
    pub seed: u64,
    /// Give each slice a smooth synthetic phase.
    pub phase: bool,
}

impl DatasetSpec {
    pub fn new(n_volumes: usize, slices_per_volume: usize, height: usize, width: usize, split_frac: f64, seed: u64) -> Self {
        Self {
            n_volumes,
            slices_per_volume,
            height,
            width,
            split_frac,
            seed,
            phase: false,
        }
    }

    pub fn n_train_volumes(&self) -> usize {
        ((self.n_volumes as f64 * self.split_frac).round() as usize).min(self.n_volumes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn volumes(&self, split: Split) -> Vec<usize> {
        let mut v: Vec<usize> = self.split(split).map(|r| r.volume).collect();
        v.dedup();
        v
    }

    /// Write every slice as a raster plus a manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for r in &self.records {
            let name = format!("v{:03}_s{:03}.cras", r.volume, r.slice);
            r.image.save(&dir.join(&name))?;
            manifest.push_str(&format!("{},{},{},{}\n", r.volume, r.slice, r.split, name));
        }
        super::write_atomic(&dir.join(MANIFEST_NAME), manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: &str| Error::format(&path, format!("line {}: {m}", n + 1));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [vol, slice, split, file] = fields[..] else {
                return Err(bad("expected volume_id,slice_index,split,filename"));
            };
            records.push(DatasetRecord {
                volume: vol.parse().map_err(|_| bad("bad volume id"))?,
                slice: slice.parse().map_err(|_| bad("bad slice index"))?,
                split: split.parse().map_err(|_| bad("bad split"))?,
                image: ComplexRaster::load(&dir.join(file))?,
            });
        }
        let first = records
            .first()
            .ok_or_else(|| Error::format(&path, "manifest lists no records"))?;
        let (height, width) = first.image.shape();
        if let Some(r) = records.iter().find(|r| r.image.shape() != (height, width)) {
            return Err(Error::format(
                &path,
                format!("volume {} slice {} is {:?}, expected {height}x{width}", r.volume, r.slice, r.image.shape()),
            ));
        }
        Ok(Dataset { height, width, records })
    }
}

/// Build a deterministic dataset of perturbed phantoms.
///
/// Each volume jitters the base phantom fully; its slices add a smaller
/// per-slice jitter on top, so slices of one volume resemble each other.
/// The first `round(n·split_frac)` volumes train, the rest validate.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.n_volumes == 0 || spec.slices_per_volume == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one volume and one slice".into()));
    }
    if !(0.0..=1.0).contains(&spec.split_frac) {
        return Err(Error::InvalidArgument(format!("split fraction {} outside [0, 1]", spec.split_frac)));
    }
    let n_train = spec.n_train_volumes();
    let base = PhantomSpec::shepp_logan();
    let mut records = Vec::with_capacity(spec.n_volumes * spec.slices_per_volume);
    for v in 0..spec.n_volumes {
        let vol = base.perturbed(derive_seed(spec.seed, &[v as u64]), &Jitter::default());
        for s in 0..spec.slices_per_volume {
            let slice_seed = derive_seed(spec.seed, &[v as u64, s as u64]);
            let mut image = vol.perturbed(slice_seed, &Jitter::default().scaled(0.3)).render(spec.height, spec.width)?;
            if spec.phase {
                image = apply_phase_map(&image, slice_seed);
            }
            // Stored rasters are single precision; keep memory and disk equal.
            image.data_mut().iter_mut().for_each(|z| {
                z.re = z.re as f32 as f64;
                z.im = z.im as f32 as f64;
            });
            records.push(DatasetRecord {
                volume: v,
                slice: s,
                split: if v < n_train { Split::Train } else { Split::Val },
                image,
            });
        }
    }
    Ok(Dataset {
        height: spec.height,
        width: spec.width,
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Random,
    Equispaced,
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::Random => "random",
            MaskKind::Equispaced => "equispaced",
        })
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MaskKind::Random),
            "equispaced" => Ok(MaskKind::Equispaced),
            _ => Err(Error::InvalidArgument(format!("unknown mask kind '{s}'"))),
        }
    }
}

/// How undersampling masks are drawn for a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskProtocol {
    pub kind: MaskKind,
    pub accel: usize,
    pub center_frac: f64,
}

impl MaskProtocol {
    pub fn new(kind: MaskKind, accel: usize, center_frac: f64) -> Self {
        Self { kind, accel, center_frac }
    }

    /// Mask for `volume`. With `epoch = Some(e)` (training) random masks are
    /// redrawn every epoch; `None` gives the fixed evaluation mask. All
    /// slices of a volume share the mask. Equispaced masks never change.
    pub fn volume_mask(&self, width: usize, seed: u64, volume: usize, epoch: Option<usize>) -> Result<SamplingMask> {
        match self.kind {
            MaskKind::Random => {
                let tags: Vec<u64> = match epoch {
                    Some(e) => vec![0x4d41_534b, volume as u64, e as u64 + 1],
                    None => vec![0x4d41_534b, volume as u64, 0],
                };
                random_line_mask(width, self.accel as f64, self.center_frac, derive_seed(seed, &tags))
            }
            MaskKind::Equispaced => equispaced_line_mask(width, self.accel, self.center_frac, 0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_volume_split() {
        let ds = build_dataset(&DatasetSpec::new(10, 4, 16, 16, 0.8, 1)).unwrap();
        assert_eq!(ds.records.len(), 40);
        let mut vols: Vec<usize> = ds.records.iter().map(|r| r.volume).collect();
        vols.dedup();
        assert_eq!(vols.len(), 10);
        assert_eq!(ds.volumes(Split::Train).len(), 8);
        assert_eq!(ds.volumes(Split::Val), vec![8, 9]);
        for v in 0..10 {
            let splits: Vec<Split> = ds.records.iter().filter(|r| r.volume == v).map(|r| r.split).collect();
            assert!(splits.windows(2).all(|w| w[0] == w[1]));
        }
        assert!(ds.records.iter().all(|r| r.image.data().iter().all(|z| (0.0..=1.0).contains(&z.re))));
    }

    #[test]
    fn deterministic_and_slices_distinct() {
        let spec = DatasetSpec::new(2, 3, 16, 16, 0.5, 7);
        let a = build_dataset(&spec).unwrap();
        assert_eq!(a, build_dataset(&spec).unwrap());
        assert!(a.records[0].image.max_abs_diff(&a.records[1].image) > 0.0);
        assert!(build_dataset(&DatasetSpec::new(0, 3, 16, 16, 0.5, 7)).is_err());
    }

    #[test]
    fn masks_shared_within_volume_and_epoch() {
        let p = MaskProtocol::new(MaskKind::Random, 4, 0.08);
        let a = p.volume_mask(64, 3, 2, Some(0)).unwrap();
        assert_eq!(a, p.volume_mask(64, 3, 2, Some(0)).unwrap());
        let others: Vec<_> = (1..6).map(|e| p.volume_mask(64, 3, 2, Some(e)).unwrap()).collect();
        assert!(others.iter().any(|m| *m != a));
        assert_eq!(p.volume_mask(64, 3, 2, None).unwrap(), p.volume_mask(64, 3, 2, None).unwrap());
        let e = MaskProtocol::new(MaskKind::Equispaced, 4, 0.08);
        assert_eq!(e.volume_mask(64, 1, 0, Some(0)).unwrap(), e.volume_mask(64, 9, 5, Some(3)).unwrap());
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&DatasetSpec::new(2, 2, 8, 8, 0.5, 3)).unwrap();
        ds.save(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(text.lines().next().unwrap(), "0,0,train,v000_s000.cras");
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        std::fs::write(dir.path().join(MANIFEST_NAME), "0,0,test,v000_s000.cras\n").unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }
}
