//! Parameters of the full pipeline.

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::error::Result;
use crate::kspace::DcWeight;
use crate::rng::derive_seed;
use crate::swin::{Linear, ParamInit, SwinUnetParams};

use super::config::{ablation_apply, BranchMode, McstraConfig};

/// Handles into a [`ParamStore`] for every trainable component.
#[derive(Debug, Clone, PartialEq)]
pub struct McstraParams {
    pub low: Option<SwinUnetParams>,
    pub high: Option<SwinUnetParams>,
    /// Shared by every cascade stage.
    pub cascade: SwinUnetParams,
    pub tail: SwinUnetParams,
    /// PSF patch vector → embedding width; absent when the PSF path is off.
    pub psf_proj: Option<Linear>,
    /// Learned absolute embedding, one row per full-resolution token.
    pub e_abs: ParamId,
    /// Width adapters for Swin-Unets whose width differs from the embedding.
    pub adapters: Vec<(usize, Linear)>,
    /// `log λ` when λ is trained.
    pub log_lambda: Option<ParamId>,
}

const TAG_LOW: u64 = 1;
const TAG_HIGH: u64 = 2;
const TAG_CAS: u64 = 3;
const TAG_TAIL: u64 = 4;
const TAG_PE: u64 = 5;

impl McstraParams {
    /// Register freshly initialised parameters. Each component draws from
    /// its own seed stream, so variants share initial values for the
    /// components they have in common.
    pub fn init(cfg: &McstraConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let pipe = ablation_apply(cfg);
        let seed = |tag| derive_seed(cfg.seed, &[tag]);
        let (low, high) = if pipe.branches == BranchMode::None {
            (None, None)
        } else {
            let g = cfg.unet_geometry(2, 2, cfg.branch_dim);
            (
                Some(SwinUnetParams::init(&mut ParamInit::new(store, seed(TAG_LOW)), "low", g.clone())?),
                Some(SwinUnetParams::init(&mut ParamInit::new(store, seed(TAG_HIGH)), "high", g)?),
            )
        };
        let cascade = SwinUnetParams::init(
            &mut ParamInit::new(store, seed(TAG_CAS)),
            "cas",
            cfg.unet_geometry(2, 2, cfg.cascade_dim),
        )?;
        let tail_channels = if pipe.complex_tail { 2 } else { 1 };
        let tail = SwinUnetParams::init(
            &mut ParamInit::new(store, seed(TAG_TAIL)),
            "tail",
            cfg.unet_geometry(tail_channels, tail_channels, cfg.tail_dim),
        )?;

        let mut init = ParamInit::new(store, seed(TAG_PE));
        let d = cfg.branch_dim;
        let psf_proj = if pipe.psf_embedding {
            let fan_in = cfg.psf_input.channels() * cfg.patch * cfg.patch;
            // Zero start: the PSF path begins as a no-op on top of E_abs.
            let w = init.tensor("pe.proj.w", Tensor::zeros(&[fan_in, d]))?;
            let b = init.tensor("pe.proj.b", Tensor::zeros(&[d]))?;
            Some(Linear {
                w,
                b: Some(b),
                fan_in,
                fan_out: d,
            })
        } else {
            None
        };
        let e_abs = init.uniform("pe.abs", &[cfg.tokens(), d], 0.02)?;
        let mut adapters = Vec::new();
        for dim in [cfg.cascade_dim, cfg.tail_dim] {
            if dim != d && !adapters.iter().any(|(k, _)| *k == dim) {
                // Starts as a coordinate slice/padding of the shared embedding.
                let eye = Tensor::from_fn(&[d, dim], |k| if k / dim == k % dim { 1.0 } else { 0.0 });
                let w = init.tensor(&format!("pe.adapt{dim}.w"), eye)?;
                let b = init.tensor(&format!("pe.adapt{dim}.b"), Tensor::zeros(&[dim]))?;
                adapters.push((
                    dim,
                    Linear {
                        w,
                        b: Some(b),
                        fan_in: d,
                        fan_out: dim,
                    },
                ));
            }
        }
        let log_lambda = match (cfg.train_lambda, cfg.dc_lambda) {
            (true, DcWeight::Finite(l)) => Some(init.tensor("dc.log_lambda", Tensor::scalar(l.ln()))?),
            _ => None,
        };
        Ok(Self {
            low,
            high,
            cascade,
            tail,
            psf_proj,
            e_abs,
            adapters,
            log_lambda,
        })
    }

    pub fn adapter(&self, dim: usize) -> Option<&Linear> {
        self.adapters.iter().find(|(k, _)| *k == dim).map(|(_, l)| l)
    }

    /// Build a store and parameters in one go.
    pub fn new_store(cfg: &McstraConfig) -> Result<(ParamStore, Self)> {
        let mut store = ParamStore::new();
        let params = Self::init(cfg, &mut store)?;
        Ok((store, params))
    }
}

/// Name prefixes of the parameter groups, for reporting.
pub const PARAM_GROUPS: [(&str, &str); 6] = [
    ("theta_l", "low."),
    ("theta_h", "high."),
    ("theta_cas", "cas."),
    ("theta_tail", "tail."),
    ("theta_P", "pe.proj."),
    ("E_abs", "pe.abs"),
];
