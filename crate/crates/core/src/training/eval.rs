//! Evaluation sweeps over acceleration, mask type and noise level.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::autodiff::ParamStore;
use crate::data::{Dataset, DatasetRecord, MaskKind, MaskProtocol, Split};
use crate::error::{Error, Result};
use crate::kspace::{add_complex_noise, ifft2c, Snr};
use crate::model::{mcstra_forward, McstraConfig, McstraParams, Sample};
use crate::rng::derive_seed;

use super::train::{image_metrics, magnitude, prepare};

/// Accelerations of the acceleration sweep.
pub const ACCEL_SWEEP: [usize; 5] = [4, 6, 8, 10, 12];

/// Noise levels of the SNR sweep, clean data first.
pub const SNR_SWEEP: [Snr; 7] = [
    Snr::Infinite,
    Snr::Db(50.0),
    Snr::Db(20.0),
    Snr::Db(15.0),
    Snr::Db(10.0),
    Snr::Db(5.0),
    Snr::Db(0.0),
];

/// One varied quantity with the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    /// Only the configured protocol.
    Clean,
    Accel(Vec<usize>),
    MaskKind(Vec<MaskKind>),
    Snr(Vec<Snr>),
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::Clean => "clean",
            Sweep::Accel(_) => "accel",
            Sweep::MaskKind(_) => "mask",
            Sweep::Snr(_) => "snr",
        }
    }

    /// The standard sweep with the given name.
    pub fn standard(name: &str) -> Result<Sweep> {
        Ok(match name {
            "clean" => Sweep::Clean,
            "accel" => Sweep::Accel(ACCEL_SWEEP.to_vec()),
            "mask" => Sweep::MaskKind(vec![MaskKind::Random, MaskKind::Equispaced]),
            "snr" => Sweep::Snr(SNR_SWEEP.to_vec()),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown protocol '{name}' (expected clean, accel, mask or snr)"
                )))
            }
        })
    }

    /// `(label, mask protocol, noise)` for every sweep point.
    fn points(&self, cfg: &McstraConfig) -> Vec<(String, MaskProtocol, Snr)> {
        let base = MaskProtocol::new(cfg.mask_kind, cfg.accel, cfg.center_frac);
        match self {
            Sweep::Clean => vec![(format!("{}x", cfg.accel), base, Snr::Infinite)],
            Sweep::Accel(a) => a
                .iter()
                .map(|&a| (a.to_string(), MaskProtocol { accel: a, ..base }, Snr::Infinite))
                .collect(),
            Sweep::MaskKind(k) => k
                .iter()
                .map(|&k| (k.to_string(), MaskProtocol { kind: k, ..base }, Snr::Infinite))
                .collect(),
            Sweep::Snr(s) => s.iter().map(|&s| (s.to_string(), base, s)).collect(),
        }
    }
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sweep::standard(s.trim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Mcstra,
    ZeroFilled,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Mcstra => "mcstra",
            Method::ZeroFilled => "zero_filled",
        })
    }
}

/// Metrics of one slice at one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEntry {
    pub volume: usize,
    pub slice: usize,
    pub method: Method,
    pub param: String,
    /// NMSE, PSNR (dB), SSIM.
    pub metrics: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub sweep: &'static str,
    pub entries: Vec<EvalEntry>,
}

pub const EVAL_HEADER: &str = "volume,slice,protocol,param,nmse,psnr,ssim";

fn mean_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl EvalTable {
    /// Distinct sweep labels in first-seen order.
    pub fn params(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.param.as_str()) {
                out.push(&e.param);
            }
        }
        out
    }

    fn select<'a>(&'a self, method: Method, param: &'a str) -> impl Iterator<Item = &'a EvalEntry> + 'a {
        self.entries.iter().filter(move |e| e.method == method && e.param == param)
    }

    /// Mean over volumes of the per-volume mean of metric `k`, with the
    /// standard error across volumes.
    pub fn summary(&self, method: Method, param: &str, k: usize) -> (f64, f64) {
        let mut vols: Vec<usize> = self.select(method, param).map(|e| e.volume).collect();
        vols.sort_unstable();
        vols.dedup();
        let means: Vec<f64> = vols
            .iter()
            .map(|&v| {
                let xs: Vec<f64> = self.select(method, param).filter(|e| e.volume == v).map(|e| e.metrics[k]).collect();
                mean_sem(&xs).0
            })
            .collect();
        mean_sem(&means)
    }

    /// Per-slice rows, then per-volume mean/SEM rows (`slice` = `mean`/`sem`),
    /// then the across-volume mean/SEM (`volume` = `all`).
    pub fn to_csv(&self) -> String {
        let mut s = String::from(EVAL_HEADER);
        s.push('\n');
        let proto = |m: Method| format!("{m}:{}", self.sweep);
        for e in &self.entries {
            let [a, b, c] = e.metrics;
            let _ = writeln!(s, "{},{},{},{},{a:.8e},{b:.8e},{c:.8e}", e.volume, e.slice, proto(e.method), e.param);
        }
        for method in [Method::Mcstra, Method::ZeroFilled] {
            for param in self.params() {
                let mut vols: Vec<usize> = self.select(method, param).map(|e| e.volume).collect();
                vols.sort_unstable();
                vols.dedup();
                for v in vols {
                    let stats: Vec<(f64, f64)> = (0..3)
                        .map(|k| {
                            let xs: Vec<f64> =
                                self.select(method, param).filter(|e| e.volume == v).map(|e| e.metrics[k]).collect();
                            mean_sem(&xs)
                        })
                        .collect();
                    let _ = writeln!(
                        s,
                        "{v},mean,{},{param},{:.8e},{:.8e},{:.8e}",
                        proto(method),
                        stats[0].0,
                        stats[1].0,
                        stats[2].0
                    );
                    let _ = writeln!(
                        s,
                        "{v},sem,{},{param},{:.8e},{:.8e},{:.8e}",
                        proto(method),
                        stats[0].1,
                        stats[1].1,
                        stats[2].1
                    );
                }
                if self.select(method, param).next().is_some() {
                    let st: Vec<(f64, f64)> = (0..3).map(|k| self.summary(method, param, k)).collect();
                    let _ = writeln!(
                        s,
                        "all,mean,{},{param},{:.8e},{:.8e},{:.8e}",
                        proto(method),
                        st[0].0,
                        st[1].0,
                        st[2].0
                    );
                    let _ = writeln!(
                        s,
                        "all,sem,{},{param},{:.8e},{:.8e},{:.8e}",
                        proto(method),
                        st[0].1,
                        st[1].1,
                        st[2].1
                    );
                }
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Evaluate a trained model (or only the zero-filled baseline when `model`
/// is `None`) on the slices of `split`.
///
/// Masks are the fixed per-volume evaluation masks drawn from `seed`; noise,
/// when swept, is added to the measured k-space entries with a seed derived
/// from `seed`, the volume and the slice, so every sweep point sees the same
/// mask and every noise level the same noise pattern.
pub fn evaluate(
    cfg: &McstraConfig,
    model: Option<(&ParamStore, &McstraParams)>,
    data: &Dataset,
    split: Split,
    sweep: &Sweep,
    seed: u64,
) -> Result<EvalTable> {
    if (data.height, data.width) != (cfg.height, cfg.width) {
        return Err(Error::Geometry(format!(
            "dataset is {}x{} but the model was built for {}x{}",
            data.height, data.width, cfg.height, cfg.width
        )));
    }
    let records: Vec<&DatasetRecord> = data.split(split).collect();
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("{split} split is empty")));
    }
    let prepared = prepare(&records)?;
    let points = sweep.points(cfg);
    let per_slice: Vec<Vec<EvalEntry>> = prepared
        .par_iter()
        .map(|p| {
            let reference = magnitude(&ifft2c(&p.y_full)?)?;
            let mut out = Vec::new();
            for (label, protocol, snr) in &points {
                let mask = protocol.volume_mask(cfg.width, seed, p.volume, None)?;
                let noise_seed = derive_seed(seed, &[0x6e6f_6973, p.volume as u64, p.slice as u64]);
                let y_hat = add_complex_noise(&mask.apply(&p.y_full)?, *snr, noise_seed)?;
                if let Some((store, params)) = model {
                    let sample = Sample {
                        y_hat: &y_hat,
                        mask: &mask,
                        y_full: Some(&p.y_full),
                    };
                    let (img, _) = mcstra_forward(store, cfg, params, sample)?;
                    out.push(EvalEntry {
                        volume: p.volume,
                        slice: p.slice,
                        method: Method::Mcstra,
                        param: label.clone(),
                        metrics: image_metrics(&img, &reference)?,
                    });
                }
                out.push(EvalEntry {
                    volume: p.volume,
                    slice: p.slice,
                    method: Method::ZeroFilled,
                    param: label.clone(),
                    metrics: image_metrics(&magnitude(&ifft2c(&y_hat)?)?, &reference)?,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(EvalTable {
        sweep: sweep.name(),
        entries: per_slice.into_iter().flatten().collect(),
    })
}
