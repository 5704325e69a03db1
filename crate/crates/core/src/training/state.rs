//! Saving and restoring the full training state.
//!
//! A checkpoint is an MCKP1 file holding every parameter under its own name,
//! the RMSProp accumulators under `opt.sq_avg.<name>`, and the step and
//! epoch counters. The run configuration is stored next to it as text
//! (same stem, `.cfg` extension) because the parameter layout depends on it.

use std::path::{Path, PathBuf};

use crate::autodiff::{checkpoint, Tensor};
use crate::error::{shape_err, Error, Result};

use super::config::RunConfig;
use super::train::TrainState;

const SQ_PREFIX: &str = "opt.sq_avg.";
const STEPS: &str = "opt.steps";
const EPOCH: &str = "opt.epoch";

/// The configuration file that accompanies checkpoint `path`.
pub fn checkpoint_config_path(path: &Path) -> PathBuf {
    path.with_extension("cfg")
}

fn counter(v: usize) -> Result<Tensor> {
    // Counters travel as f32 scalars; keep them exactly representable.
    if v > (1 << 24) {
        return Err(Error::InvalidArgument(format!("counter {v} too large for a checkpoint")));
    }
    Ok(Tensor::scalar(v as f64))
}

/// Write the checkpoint and its configuration file.
pub fn save_checkpoint(path: &Path, rc: &RunConfig, state: &TrainState) -> Result<()> {
    let names: Vec<String> = state.store.iter().map(|(_, n, _)| format!("{SQ_PREFIX}{n}")).collect();
    let steps = counter(state.optimizer.steps)?;
    let epoch = counter(state.epoch)?;
    let mut entries: Vec<(&str, &Tensor)> = state.store.iter().map(|(_, n, t)| (n, t)).collect();
    entries.extend(names.iter().map(String::as_str).zip(&state.optimizer.sq_avg));
    entries.push((STEPS, &steps));
    entries.push((EPOCH, &epoch));
    checkpoint::save(path, &entries)?;
    rc.save(&checkpoint_config_path(path))
}

/// Load a checkpoint together with the configuration saved beside it.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, TrainState)> {
    let rc = RunConfig::load(&checkpoint_config_path(path))?;
    let state = load_checkpoint_with(path, &rc)?;
    Ok((rc, state))
}

/// Load a checkpoint into the parameter layout described by `rc`. Every
/// stored tensor must match a parameter of that layout by name and shape.
pub fn load_checkpoint_with(path: &Path, rc: &RunConfig) -> Result<TrainState> {
    let mut state = TrainState::new(&rc.model, &rc.train)?;
    let entries = checkpoint::load(path)?;
    let n = state.store.len();
    let mut seen_param = vec![false; n];
    let mut seen_sq = vec![false; n];
    let ids: Vec<_> = state.store.ids().collect();
    let mut counters = (None, None);
    for (name, t) in entries {
        if name == STEPS || name == EPOCH {
            let v = t.item()?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::format(path, format!("{name} is not a counter: {v}")));
            }
            if name == STEPS {
                counters.0 = Some(v as usize);
            } else {
                counters.1 = Some(v as usize);
            }
            continue;
        }
        let (pname, is_sq) = match name.strip_prefix(SQ_PREFIX) {
            Some(p) => (p, true),
            None => (name.as_str(), false),
        };
        let id = state
            .store
            .find(pname)
            .ok_or_else(|| Error::format(path, format!("unexpected tensor '{name}' for this configuration")))?;
        let want = state.store.get(id).shape();
        if t.shape() != want {
            return Err(shape_err!(
                "{}: '{name}' has shape {:?}, configuration expects {:?}",
                path.display(),
                t.shape(),
                want
            ));
        }
        let k = ids.iter().position(|&i| i == id).expect("id from this store");
        if is_sq {
            seen_sq[k] = true;
            state.optimizer.sq_avg[k] = t;
        } else {
            seen_param[k] = true;
            state.store.set(id, t)?;
        }
    }
    if let Some(k) = (0..n).find(|&k| !seen_param[k] || !seen_sq[k]) {
        return Err(Error::format(
            path,
            format!("missing tensor for parameter '{}'", state.store.name(ids[k])),
        ));
    }
    match counters {
        (Some(s), Some(e)) => {
            state.optimizer.steps = s;
            state.epoch = e;
        }
        _ => return Err(Error::format(path, "missing optimizer counters")),
    }
    Ok(state)
}
