//! Side-by-side training of pipeline variants.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Dataset;
use crate::error::Result;
use crate::model::Ablation;

use super::config::RunConfig;
use super::train::{train, validate, StepInfo, TrainLog, TrainState, ValSummary};

/// Outcome of training one variant.
#[derive(Debug, Clone)]
pub struct AblationResult {
    pub ablation: Ablation,
    pub log: TrainLog,
    /// Mean batch loss of the first and last step.
    pub first_loss: f64,
    pub last_loss: f64,
    /// Largest sampled-entry DC residual seen during training.
    pub max_dc_pin: f64,
    pub val: Option<ValSummary>,
}

/// Train every variant in `tags` from the same seed and settings.
pub fn run_ablations(
    rc: &RunConfig,
    tags: &[Ablation],
    data: &Dataset,
    observer: &mut dyn FnMut(Ablation, &StepInfo),
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::with_capacity(tags.len());
    for &ablation in tags {
        let mut cfg = rc.model.clone();
        cfg.ablation = ablation;
        let mut state = TrainState::new(&cfg, &rc.train)?;
        let mut log = TrainLog::default();
        let mut max_pin: f64 = 0.0;
        train(&cfg, &rc.train, data, &mut state, &mut log, &mut |s| {
            max_pin = max_pin.max(s.dc_pin);
            observer(ablation, s)
        })?;
        let losses = log.step_losses();
        let val = if data.split(crate::data::Split::Val).next().is_some() {
            Some(validate(&cfg, &state.store, &state.params, data)?)
        } else {
            None
        };
        out.push(AblationResult {
            ablation,
            first_loss: losses.first().copied().unwrap_or(f64::NAN),
            last_loss: losses.last().copied().unwrap_or(f64::NAN),
            max_dc_pin: max_pin,
            log,
            val,
        });
    }
    Ok(out)
}

pub const ABLATION_HEADER: &str = "metric,ablation,value";

/// One row per (metric, variant).
pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    type Get = fn(&AblationResult) -> Option<f64>;
    let metrics: [(&str, Get); 7] = [
        ("first_loss", |r| Some(r.first_loss)),
        ("last_loss", |r| Some(r.last_loss)),
        ("max_dc_pin", |r| Some(r.max_dc_pin)),
        ("val_nmse", |r| r.val.as_ref().map(|v| v.nmse)),
        ("val_psnr", |r| r.val.as_ref().map(|v| v.psnr)),
        ("val_ssim", |r| r.val.as_ref().map(|v| v.ssim)),
        ("zero_filled_nmse", |r| r.val.as_ref().map(|v| v.zf_nmse)),
    ];
    for (name, get) in metrics {
        for r in results {
            if let Some(v) = get(r) {
                let _ = writeln!(s, "{name},{},{v:.8e}", r.ablation);
            }
        }
    }
    s
}

pub fn save_ablation_csv(path: &Path, results: &[AblationResult]) -> Result<()> {
    crate::data::write_atomic(path, ablation_csv(results).as_bytes())
}
