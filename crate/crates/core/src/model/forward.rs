//! The forward pipeline: positional embedding, multi-branch extractor,
//! data-consistent cascade, reconstruction tail, and the training losses.

use crate::autodiff::{ParamStore, Tape, Tensor, Var, MAGNITUDE_EPS};
use crate::data::{nmse, psnr, ssim, Image};
use crate::error::{Error, Result};
use crate::kspace::{ifft2c, partition_band_masks, psf_of_mask, square_partition_masks, ComplexRaster, Mask2d, SamplingMask};
use crate::swin::{linear, patchify, swin_unet_forward};

use super::config::{ablation_apply, BranchMode, McstraConfig, PsfInput};
use super::dc::{dc_on_tape, raster_to_tensor};
use super::params::McstraParams;

/// One reconstruction problem.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    /// Undersampled (masked, possibly noisy) centered k-space.
    pub y_hat: &'a ComplexRaster,
    pub mask: &'a SamplingMask,
    /// Fully sampled clean k-space, when a reference exists.
    pub y_full: Option<&'a ComplexRaster>,
}

fn check_geometry(cfg: &McstraConfig, r: &ComplexRaster, what: &str) -> Result<()> {
    if r.shape() != (cfg.height, cfg.width) {
        return Err(Error::Geometry(format!(
            "{what} is {}x{} but the model was built for {}x{}",
            r.height(),
            r.width(),
            cfg.height,
            cfg.width
        )));
    }
    Ok(())
}

/// Low/high k-space partition masks for the configured branch mode.
pub fn branch_partition(cfg: &McstraConfig) -> Result<Option<(Mask2d, Mask2d)>> {
    Ok(match ablation_apply(cfg).branches {
        BranchMode::Band => {
            let (l, h) = partition_band_masks(cfg.width, cfg.center_frac)?;
            Some((l.to_2d(cfg.height), h.to_2d(cfg.height)))
        }
        BranchMode::Square => Some(square_partition_masks(cfg.height, cfg.width, cfg.center_frac)?),
        BranchMode::None | BranchMode::Unpartitioned => None,
    })
}

/// `E_pos = P(PSF of m) + E_abs`, `[tokens, branch_dim]`; `E_abs` alone when
/// the PSF path is disabled.
pub fn pe_generate(t: &mut Tape<'_>, cfg: &McstraConfig, params: &McstraParams, mask: &SamplingMask) -> Result<Var> {
    if mask.width() != cfg.width {
        return Err(Error::Geometry(format!("mask width {} but image width {}", mask.width(), cfg.width)));
    }
    let e_abs = t.param(params.e_abs);
    let Some(proj) = &params.psf_proj else {
        return Ok(e_abs);
    };
    let psf = psf_of_mask(mask, cfg.height)?;
    let (h, w) = (cfg.height, cfg.width);
    let img = match cfg.psf_input {
        PsfInput::Magnitude => Tensor::new(vec![1, h, w], psf.magnitude())?,
        PsfInput::Real => Tensor::new(vec![1, h, w], psf.raster().real_part())?,
        PsfInput::Complex => raster_to_tensor(psf.raster()),
    };
    let v = t.constant(img)?;
    let g = patchify(t, v, cfg.patch, proj)?;
    t.add(g.var, e_abs)
}

/// The shared embedding as seen by a Swin-Unet of width `dim`.
fn e_pos_for(t: &mut Tape<'_>, cfg: &McstraConfig, params: &McstraParams, e_pos: Var, dim: usize) -> Result<Var> {
    if dim == cfg.branch_dim {
        return Ok(e_pos);
    }
    let a = params
        .adapter(dim)
        .ok_or_else(|| Error::Config(format!("no embedding adapter for width {dim}")))?;
    linear(t, e_pos, a)
}

#[derive(Debug, Clone, Copy)]
pub struct BranchOutput {
    pub x_low: Option<Var>,
    pub x_high: Option<Var>,
    pub x_branch: Var,
}

/// `x_branch = DS_l(F^H(M_l ⊙ ŷ)) + DS_h(F^H(M_h ⊙ ŷ))`, or the zero-filled
/// image when the extractor is disabled.
pub fn multi_branch_forward(
    t: &mut Tape<'_>,
    cfg: &McstraConfig,
    params: &McstraParams,
    y_hat: &ComplexRaster,
    e_pos: Var,
) -> Result<BranchOutput> {
    check_geometry(cfg, y_hat, "undersampled k-space")?;
    let (Some(low), Some(high)) = (&params.low, &params.high) else {
        let x = t.constant(raster_to_tensor(&ifft2c(y_hat)?))?;
        return Ok(BranchOutput {
            x_low: None,
            x_high: None,
            x_branch: x,
        });
    };
    let (lin, hin) = match branch_partition(cfg)? {
        Some((ml, mh)) => (ifft2c(&ml.apply(y_hat)?)?, ifft2c(&mh.apply(y_hat)?)?),
        None => {
            let zf = ifft2c(y_hat)?;
            (zf.clone(), zf)
        }
    };
    let e = e_pos_for(t, cfg, params, e_pos, cfg.branch_dim)?;
    let lin = t.constant(raster_to_tensor(&lin))?;
    let x_low = swin_unet_forward(t, lin, low, Some(e))?;
    let hin = t.constant(raster_to_tensor(&hin))?;
    let x_high = swin_unet_forward(t, hin, high, Some(e))?;
    let x_branch = t.add(x_low, x_high)?;
    Ok(BranchOutput {
        x_low: Some(x_low),
        x_high: Some(x_high),
        x_branch,
    })
}

/// Branch references `F^H(M_l ⊙ y)`, `F^H(M_h ⊙ y)` (the full image for both
/// when the branches are unpartitioned).
pub fn branch_references(cfg: &McstraConfig, y_full: &ComplexRaster) -> Result<(ComplexRaster, ComplexRaster)> {
    Ok(match branch_partition(cfg)? {
        Some((ml, mh)) => (ifft2c(&ml.apply(y_full)?)?, ifft2c(&mh.apply(y_full)?)?),
        None => {
            let x = ifft2c(y_full)?;
            (x.clone(), x)
        }
    })
}

/// `α_l·ℓ1(x̃_l, x_l) + α_h·ℓ1(x̃_h, x_h)` over both channels.
pub fn branch_loss(
    t: &mut Tape<'_>,
    cfg: &McstraConfig,
    x_low: Var,
    x_high: Var,
    y_full: &ComplexRaster,
) -> Result<Var> {
    let (rl, rh) = branch_references(cfg, y_full)?;
    let rl = t.constant(raster_to_tensor(&rl))?;
    let rh = t.constant(raster_to_tensor(&rh))?;
    let ll = t.l1_loss(x_low, rl)?;
    let lh = t.l1_loss(x_high, rh)?;
    t.weighted_sum(&[(ll, cfg.alpha_l), (lh, cfg.alpha_h)])
}

/// `x_t = DC(DS_cas(x_{t−1}))` for `t = 1..N` with one shared parameter set.
pub fn cascade_forward(
    t: &mut Tape<'_>,
    cfg: &McstraConfig,
    params: &McstraParams,
    x0: Var,
    y_hat: &ComplexRaster,
    mask: &SamplingMask,
    e_pos: Var,
) -> Result<Vec<Var>> {
    let e = e_pos_for(t, cfg, params, e_pos, cfg.cascade_dim)?;
    let log_lambda = params.log_lambda.map(|id| t.param(id));
    let mut x = x0;
    let mut stages = Vec::with_capacity(cfg.cascade_length);
    for _ in 0..cfg.cascade_length {
        let y = swin_unet_forward(t, x, &params.cascade, Some(e))?;
        x = dc_on_tape(t, y, y_hat, mask, cfg.dc_lambda, log_lambda)?;
        stages.push(x);
    }
    Ok(stages)
}

/// `Σ_t β_t·ℓ1(x̃, x_t)` with `x̃ = F^H y`.
pub fn cascade_loss(t: &mut Tape<'_>, cfg: &McstraConfig, stages: &[Var], y_full: &ComplexRaster) -> Result<Var> {
    let reference = t.constant(raster_to_tensor(&ifft2c(y_full)?))?;
    let betas = cfg.betas();
    if betas.len() != stages.len() {
        return Err(Error::Config(format!("{} stages but {} weights", stages.len(), betas.len())));
    }
    let mut terms = Vec::with_capacity(stages.len());
    for (&x, &b) in stages.iter().zip(&betas) {
        terms.push((t.l1_loss(x, reference)?, b));
    }
    t.weighted_sum(&terms)
}

fn magnitude_image(t: &mut Tape<'_>, x: Var) -> Result<Var> {
    let m = t.two_channel_magnitude(x, MAGNITUDE_EPS)?;
    let s = t.shape(m).to_vec();
    t.reshape(m, &[1, s[0], s[1]])
}

/// Magnitude reconstruction `[1, h, w]` from the last cascade output.
pub fn tail_forward(t: &mut Tape<'_>, cfg: &McstraConfig, params: &McstraParams, x_n: Var, e_pos: Var) -> Result<Var> {
    let e = e_pos_for(t, cfg, params, e_pos, cfg.tail_dim)?;
    if params.tail.geometry.in_channels == 2 {
        let y = swin_unet_forward(t, x_n, &params.tail, Some(e))?;
        magnitude_image(t, y)
    } else {
        let m = magnitude_image(t, x_n)?;
        swin_unet_forward(t, m, &params.tail, Some(e))
    }
}

pub fn reference_magnitude(y_full: &ComplexRaster) -> Result<Image> {
    let x = ifft2c(y_full)?;
    Image::new(x.height(), x.width(), x.magnitude())
}

/// `ℓ1(|x̃|, x_tail)`.
pub fn tail_loss(t: &mut Tape<'_>, x_tail: Var, y_full: &ComplexRaster) -> Result<Var> {
    let m = reference_magnitude(y_full)?;
    let r = t.constant(Tensor::new(vec![1, m.height(), m.width()], m.data().to_vec())?)?;
    t.l1_loss(x_tail, r)
}

/// `γ_branch·ℒ_branch + γ_cas·ℒ_cas + γ_tail·ℒ_tail`; a missing branch loss
/// counts as zero.
pub fn total_loss(t: &mut Tape<'_>, cfg: &McstraConfig, branch: Option<Var>, cascade: Var, tail: Var) -> Result<Var> {
    let mut terms = vec![(cascade, cfg.gamma_cas), (tail, cfg.gamma_tail)];
    if let Some(b) = branch {
        terms.insert(0, (b, cfg.gamma_branch));
    }
    t.weighted_sum(&terms)
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub branch: Option<Var>,
    pub cascade: Var,
    pub tail: Var,
    pub total: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub e_pos: Var,
    pub branches: BranchOutput,
    /// `x_1 … x_N`.
    pub stages: Vec<Var>,
    pub x_tail: Var,
    /// Present when the sample carries a reference.
    pub losses: Option<LossVars>,
}

/// Run the whole pipeline for one sample on `t`.
pub fn mcstra_forward_on_tape(
    t: &mut Tape<'_>,
    cfg: &McstraConfig,
    params: &McstraParams,
    sample: Sample<'_>,
) -> Result<ForwardVars> {
    check_geometry(cfg, sample.y_hat, "undersampled k-space")?;
    if let Some(y) = sample.y_full {
        check_geometry(cfg, y, "reference k-space")?;
    }
    let e_pos = pe_generate(t, cfg, params, sample.mask)?;
    let branches = multi_branch_forward(t, cfg, params, sample.y_hat, e_pos)?;
    let stages = cascade_forward(t, cfg, params, branches.x_branch, sample.y_hat, sample.mask, e_pos)?;
    let x_tail = tail_forward(t, cfg, params, *stages.last().expect("N >= 1"), e_pos)?;
    let losses = match sample.y_full {
        Some(y) => {
            let branch = match (branches.x_low, branches.x_high) {
                (Some(l), Some(h)) => Some(branch_loss(t, cfg, l, h, y)?),
                _ => None,
            };
            let cascade = cascade_loss(t, cfg, &stages, y)?;
            let tail = tail_loss(t, x_tail, y)?;
            let total = total_loss(t, cfg, branch, cascade, tail)?;
            Some(LossVars {
                branch,
                cascade,
                tail,
                total,
            })
        }
        None => None,
    };
    Ok(ForwardVars {
        e_pos,
        branches,
        stages,
        x_tail,
        losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub branch: f64,
    pub cascade: f64,
    pub tail: f64,
    pub total: f64,
}

/// Metrics and losses of one reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconReport {
    pub nmse: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    /// Magnitude NMSE of each cascade output `x_1 … x_N`.
    pub stage_nmse: Vec<f64>,
    pub losses: Option<LossValues>,
}

/// Read the reconstruction and its report off a tape after the forward pass.
pub fn collect_report(t: &Tape<'_>, fv: &ForwardVars, sample: Sample<'_>) -> Result<(Image, ReconReport)> {
    let recon = Image::from_tensor(t.value(fv.x_tail))?;
    let mut report = ReconReport {
        nmse: None,
        psnr: None,
        ssim: None,
        stage_nmse: Vec::new(),
        losses: None,
    };
    if let Some(y) = sample.y_full {
        let reference = reference_magnitude(y)?;
        report.nmse = Some(nmse(&recon, &reference)?);
        report.psnr = Some(psnr(&recon, &reference)?);
        report.ssim = Some(ssim(&recon, &reference)?);
        for &s in &fv.stages {
            let x = super::dc::tensor_to_raster(t.value(s))?;
            let m = Image::new(x.height(), x.width(), x.magnitude())?;
            report.stage_nmse.push(nmse(&m, &reference)?);
        }
    }
    if let Some(l) = fv.losses {
        let v = |x: Var| t.value(x).item();
        report.losses = Some(LossValues {
            branch: l.branch.map(v).transpose()?.unwrap_or(0.0),
            cascade: v(l.cascade)?,
            tail: v(l.tail)?,
            total: v(l.total)?,
        });
    }
    Ok((recon, report))
}

/// Reconstruct one sample: magnitude image plus report.
pub fn mcstra_forward(
    store: &ParamStore,
    cfg: &McstraConfig,
    params: &McstraParams,
    sample: Sample<'_>,
) -> Result<(Image, ReconReport)> {
    let mut t = Tape::new(store);
    let fv = mcstra_forward_on_tape(&mut t, cfg, params, sample)?;
    collect_report(&t, &fv, sample)
}
