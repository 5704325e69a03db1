//! The epoch loop, validation and the training log.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::{Gradients, ParamStore, Tape};
use crate::data::{nmse, psnr, ssim, Dataset, DatasetRecord, Image, MaskProtocol, Split};
use crate::error::{Error, Result};
use crate::kspace::{fft2c, ifft2c, ComplexRaster, SamplingMask};
use crate::model::{collect_report, mcstra_forward_on_tape, tensor_to_raster, McstraConfig, McstraParams, Sample};
use crate::rng::{derive_seed, SeededRng};

use super::config::TrainConfig;
use super::optim::{clip_global_norm, RmsProp};

const TAG_MASK: u64 = 0x6d61_736b;
const TAG_SHUFFLE: u64 = 0x7368_7566;

/// Seed of the per-volume mask streams for a model seed.
pub fn mask_seed(cfg: &McstraConfig) -> u64 {
    derive_seed(cfg.seed, &[TAG_MASK])
}

pub fn mask_protocol(cfg: &McstraConfig) -> MaskProtocol {
    MaskProtocol::new(cfg.mask_kind, cfg.accel, cfg.center_frac)
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub store: ParamStore,
    pub params: McstraParams,
    pub optimizer: RmsProp,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(cfg: &McstraConfig, tc: &TrainConfig) -> Result<Self> {
        let (store, params) = McstraParams::new_store(cfg)?;
        let mut optimizer = RmsProp::new(&store, tc.lr, tc.rho, tc.eps_opt)?;
        optimizer.warm_start = tc.rms_warm_start;
        Ok(Self {
            store,
            params,
            optimizer,
            epoch: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.optimizer.steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogSplit {
    /// One optimizer step.
    Train,
    /// Mean training loss over an epoch.
    TrainEpoch,
    Val,
    /// Zero-filled baseline on the validation set.
    ZeroFilled,
}

impl LogSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            LogSplit::Train => "train",
            LogSplit::TrainEpoch => "train_epoch",
            LogSplit::Val => "val",
            LogSplit::ZeroFilled => "zero_filled",
        }
    }
}

/// One logged event. `stage = Some(t)` rows carry the NMSE of cascade
/// output `x_t`; other rows refer to the final reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub split: LogSplit,
    pub loss: Option<f64>,
    pub nmse: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub stage: Option<usize>,
}

pub const TRAIN_LOG_HEADER: &str = "step,epoch,split,loss,nmse,psnr,ssim,stage";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Per-step training losses in step order.
    pub fn step_losses(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.split == LogSplit::Train)
            .filter_map(|r| r.loss)
            .collect()
    }

    /// Final-reconstruction validation rows.
    pub fn val_rows(&self) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(|r| r.split == LogSplit::Val && r.stage.is_none())
    }

    /// Per-stage validation NMSE of the last validation pass.
    pub fn last_stage_nmse(&self) -> Vec<f64> {
        let Some(last) = self.val_rows().last().map(|r| r.step) else {
            return Vec::new();
        };
        self.rows
            .iter()
            .filter(|r| r.split == LogSplit::Val && r.step == last && r.stage.is_some())
            .filter_map(|r| r.nmse)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAIN_LOG_HEADER);
        s.push('\n');
        let f = |v: Option<f64>| v.map(|x| format!("{x:.8e}")).unwrap_or_default();
        for r in &self.rows {
            let stage = r.stage.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                r.split.as_str(),
                f(r.loss),
                f(r.nmse),
                f(r.psnr),
                f(r.ssim),
                stage
            );
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Progress of one optimizer step, handed to the caller's observer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub step: usize,
    pub epoch: usize,
    /// Mean total loss over the batch.
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Largest `|F x_t − ŷ|` over sampled k-space entries, all cascade
    /// stages and batch members (zero up to rounding under hard DC).
    pub dc_pin: f64,
}

/// A reconstruction problem with its k-space precomputed.
pub(crate) struct Prepared {
    pub volume: usize,
    pub slice: usize,
    pub y_full: ComplexRaster,
}

pub(crate) fn prepare(records: &[&DatasetRecord]) -> Result<Vec<Prepared>> {
    records
        .iter()
        .map(|r| {
            Ok(Prepared {
                volume: r.volume,
                slice: r.slice,
                y_full: fft2c(&r.image)?,
            })
        })
        .collect()
}

fn sampled_residual(x: &ComplexRaster, y_hat: &ComplexRaster, mask: &SamplingMask) -> Result<f64> {
    let k = fft2c(x)?;
    let w = k.width();
    Ok(k.data()
        .iter()
        .zip(y_hat.data())
        .enumerate()
        .filter(|(i, _)| mask.is_sampled(i % w))
        .map(|(_, (a, b))| (a - b).norm())
        .fold(0.0, f64::max))
}

/// Loss, gradients and DC residual for one sample.
fn sample_gradients(
    cfg: &McstraConfig,
    store: &ParamStore,
    params: &McstraParams,
    y_full: &ComplexRaster,
    mask: &SamplingMask,
) -> Result<(f64, Gradients, f64)> {
    let y_hat = mask.apply(y_full)?;
    let mut t = Tape::new(store);
    let sample = Sample {
        y_hat: &y_hat,
        mask,
        y_full: Some(y_full),
    };
    let fv = mcstra_forward_on_tape(&mut t, cfg, params, sample)?;
    let total = fv.losses.expect("reference supplied").total;
    let loss = t.value(total).item()?;
    let mut pin: f64 = 0.0;
    for &s in &fv.stages {
        pin = pin.max(sampled_residual(&tensor_to_raster(t.value(s))?, &y_hat, mask)?);
    }
    let g = t.backward(total)?;
    Ok((loss, g, pin))
}

/// Mean validation metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ValSummary {
    pub loss: f64,
    pub nmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean NMSE of each cascade output `x_1 … x_N`.
    pub stage_nmse: Vec<f64>,
    pub zf_nmse: f64,
    pub zf_psnr: f64,
    pub zf_ssim: f64,
}

/// Magnitude NMSE/PSNR/SSIM of an image against a reference.
pub(crate) fn image_metrics(img: &Image, reference: &Image) -> Result<[f64; 3]> {
    Ok([nmse(img, reference)?, psnr(img, reference)?, ssim(img, reference)?])
}

pub(crate) fn magnitude(x: &ComplexRaster) -> Result<Image> {
    Image::new(x.height(), x.width(), x.magnitude())
}

/// Evaluate the model and the zero-filled baseline on the validation split
/// with each volume's fixed evaluation mask.
pub fn validate(cfg: &McstraConfig, store: &ParamStore, params: &McstraParams, data: &Dataset) -> Result<ValSummary> {
    let records: Vec<&DatasetRecord> = data.split(Split::Val).collect();
    if records.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    let prepared = prepare(&records)?;
    let protocol = mask_protocol(cfg);
    let seed = mask_seed(cfg);
    let per: Vec<(f64, [f64; 3], Vec<f64>, [f64; 3])> = prepared
        .par_iter()
        .map(|p| {
            let mask = protocol.volume_mask(cfg.width, seed, p.volume, None)?;
            let y_hat = mask.apply(&p.y_full)?;
            let sample = Sample {
                y_hat: &y_hat,
                mask: &mask,
                y_full: Some(&p.y_full),
            };
            let mut t = Tape::new(store);
            let fv = mcstra_forward_on_tape(&mut t, cfg, params, sample)?;
            let (_, rep) = collect_report(&t, &fv, sample)?;
            let reference = magnitude(&ifft2c(&p.y_full)?)?;
            let zf = image_metrics(&magnitude(&ifft2c(&y_hat)?)?, &reference)?;
            let m = [rep.nmse.unwrap_or(f64::NAN), rep.psnr.unwrap_or(f64::NAN), rep.ssim.unwrap_or(f64::NAN)];
            Ok((rep.losses.map(|l| l.total).unwrap_or(f64::NAN), m, rep.stage_nmse, zf))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mean = |f: &dyn Fn(&(f64, [f64; 3], Vec<f64>, [f64; 3])) -> f64| per.iter().map(f).sum::<f64>() / n;
    Ok(ValSummary {
        loss: mean(&|r| r.0),
        nmse: mean(&|r| r.1[0]),
        psnr: mean(&|r| r.1[1]),
        ssim: mean(&|r| r.1[2]),
        stage_nmse: (0..cfg.cascade_length).map(|t| mean(&|r| r.2[t])).collect(),
        zf_nmse: mean(&|r| r.3[0]),
        zf_psnr: mean(&|r| r.3[1]),
        zf_ssim: mean(&|r| r.3[2]),
    })
}

fn log_validation(log: &mut TrainLog, step: usize, epoch: usize, v: &ValSummary, baseline: bool) {
    if baseline {
        log.rows.push(LogRow {
            step,
            epoch,
            split: LogSplit::ZeroFilled,
            loss: None,
            nmse: Some(v.zf_nmse),
            psnr: Some(v.zf_psnr),
            ssim: Some(v.zf_ssim),
            stage: None,
        });
    }
    log.rows.push(LogRow {
        step,
        epoch,
        split: LogSplit::Val,
        loss: Some(v.loss),
        nmse: Some(v.nmse),
        psnr: Some(v.psnr),
        ssim: Some(v.ssim),
        stage: None,
    });
    for (t, &e) in v.stage_nmse.iter().enumerate() {
        log.rows.push(LogRow {
            step,
            epoch,
            split: LogSplit::Val,
            loss: None,
            nmse: Some(e),
            psnr: None,
            ssim: None,
            stage: Some(t + 1),
        });
    }
}

/// Train for `tc.epochs` epochs (or until `tc.max_steps`), appending to
/// `log` and reporting every step to `observer`.
///
/// Each epoch shuffles the training slices, draws each volume's mask
/// (redrawn per epoch for random masks unless `fixed_masks`), and applies
/// one clipped RMSProp step per batch of summed-then-averaged gradients.
/// Validation runs every `tc.val_every` steps and at the end of every
/// epoch when a validation split exists.
pub fn train(
    cfg: &McstraConfig,
    tc: &TrainConfig,
    data: &Dataset,
    state: &mut TrainState,
    log: &mut TrainLog,
    observer: &mut dyn FnMut(&StepInfo),
) -> Result<()> {
    cfg.validate()?;
    tc.validate()?;
    if (data.height, data.width) != (cfg.height, cfg.width) {
        return Err(Error::Geometry(format!(
            "dataset is {}x{} but the model was built for {}x{}",
            data.height, data.width, cfg.height, cfg.width
        )));
    }
    let train_records: Vec<&DatasetRecord> = data.split(Split::Train).collect();
    if train_records.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let has_val = data.split(Split::Val).next().is_some();
    let prepared = prepare(&train_records)?;
    let protocol = mask_protocol(cfg);
    let seed = mask_seed(cfg);
    let mut first_val = log.rows.iter().all(|r| r.split != LogSplit::ZeroFilled);
    let limit_hit = |state: &TrainState| tc.max_steps > 0 && state.step() >= tc.max_steps;

    for _ in 0..tc.epochs {
        if limit_hit(state) {
            break;
        }
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        SeededRng::new(derive_seed(cfg.seed, &[TAG_SHUFFLE, epoch as u64])).shuffle(&mut order);
        let mask_epoch = if tc.fixed_masks { None } else { Some(epoch) };
        let mut epoch_losses = Vec::new();

        for batch in order.chunks(tc.batch_size) {
            if limit_hit(state) {
                break;
            }
            let results: Vec<(f64, Gradients, f64)> = batch
                .par_iter()
                .map(|&i| {
                    let p = &prepared[i];
                    let mask = protocol.volume_mask(cfg.width, seed, p.volume, mask_epoch)?;
                    sample_gradients(cfg, &state.store, &state.params, &p.y_full, &mask)
                })
                .collect::<Result<_>>()?;
            let mut grads = Gradients::zeros_like(&state.store);
            let (mut loss, mut pin) = (0.0, 0.0f64);
            for (l, g, p) in &results {
                grads.accumulate(g)?;
                loss += l;
                pin = pin.max(*p);
            }
            drop(results);
            let b = batch.len() as f64;
            loss /= b;
            grads.scale(1.0 / b);
            let step = state.step() + 1;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training diverged: loss {loss} at step {step} (epoch {epoch}); lower lr or clip_norm"
                )));
            }
            let grad_norm = if tc.clip_norm > 0.0 {
                clip_global_norm(&mut grads, tc.clip_norm)
            } else {
                grads.global_norm()
            };
            state
                .optimizer
                .step(&mut state.store, &grads)
                .map_err(|e| Error::NonFinite(format!("step {step} (epoch {epoch}) aborted: {e}")))?;
            log.rows.push(LogRow {
                step,
                epoch,
                split: LogSplit::Train,
                loss: Some(loss),
                nmse: None,
                psnr: None,
                ssim: None,
                stage: None,
            });
            epoch_losses.push(loss);
            observer(&StepInfo {
                step,
                epoch,
                loss,
                grad_norm,
                dc_pin: pin,
            });
            if has_val && tc.val_every > 0 && step % tc.val_every == 0 {
                let v = validate(cfg, &state.store, &state.params, data)?;
                log_validation(log, step, epoch, &v, first_val);
                first_val = false;
            }
        }
        if !epoch_losses.is_empty() {
            log.rows.push(LogRow {
                step: state.step(),
                epoch,
                split: LogSplit::TrainEpoch,
                loss: Some(epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64),
                nmse: None,
                psnr: None,
                ssim: None,
                stage: None,
            });
        }
        let already = log.val_rows().last().is_some_and(|r| r.step == state.step());
        if has_val && !already {
            let v = validate(cfg, &state.store, &state.params, data)?;
            log_validation(log, state.step(), epoch, &v, first_val);
            first_val = false;
        }
        state.epoch += 1;
    }
    Ok(())
}
