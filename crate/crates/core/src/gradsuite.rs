//! Finite-difference checks of every differentiable operation and of the
//! complete reconstruction pipeline.
//!
//! Each tape operation is reduced to a scalar through a fixed random
//! weighting and compared with central differences in `f64`. Operations
//! that own parameters (attention, merging, expanding, embedding, data
//! consistency with a trainable weight) are checked through
//! [`check_param_gradients`], which probes every tensor along a random
//! direction.

use std::sync::Arc;

use crate::autodiff::{check_param_gradients, grad_check, ParamCheck, ParamStore, Tape, Tensor, Var, MAGNITUDE_EPS};
use crate::data::shepp_logan;
use crate::error::Result;
use crate::kspace::{fft2c, random_line_mask, DcWeight};
use crate::model::{dc_on_tape, mcstra_forward_on_tape, McstraConfig, McstraParams, Sample};
use crate::rng::{derive_seed, SeededRng};
use crate::swin::{
    mhsa, patch_expanding, patch_merging, patchify, swin_block_pair, unpatchify, GridVar, ParamInit, SwinBlockParams,
    WindowSpec,
};

/// Largest acceptable relative error for a single operation.
pub const OP_TOLERANCE: f64 = 1e-3;
/// Largest acceptable relative error for the full pipeline.
pub const END_TO_END_TOLERANCE: f64 = 1e-2;

const EPS: f64 = 1e-4;
/// Absolute gradient scale below which errors are measured absolutely;
/// some gradients (attention key biases) vanish identically.
const FLOOR: f64 = 1e-6;

/// Worst relative error found for one operation.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.rel_err < OP_TOLERANCE
    }
}

fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// `Σ w ⊙ v` with fixed random weights `w`.
fn weighted(t: &mut Tape<'_>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = SeededRng::new(seed);
    let w = t.constant(randn(t.shape(v), &mut rng))?;
    let p = t.mul(v, w)?;
    t.sum(p)
}

type UnaryCase = (&'static str, Vec<usize>, Box<dyn Fn(&mut Tape<'_>, Var) -> Result<Var>>);

fn unary_cases() -> Vec<UnaryCase> {
    let r = |s: &[usize]| s.to_vec();
    vec![
        ("add", r(&[3, 4]), Box::new(|t, x| {
            let y = t.add(x, x)?;
            let z = t.mul(y, x)?;
            weighted(t, z, 1)
        })),
        ("add_broadcast", r(&[3, 4]), Box::new(|t, x| {
            let b = t.narrow(x, 0, 0, 1)?;
            let b = t.reshape(b, &[4])?;
            let y = t.add(x, b)?;
            weighted(t, y, 2)
        })),
        ("sub", r(&[3, 4]), Box::new(|t, x| {
            let y = t.scale(x, 0.5)?;
            let z = t.sub(x, y)?;
            let z = t.mul(z, z)?;
            weighted(t, z, 3)
        })),
        ("mul", r(&[2, 5]), Box::new(|t, x| {
            let y = t.mul(x, x)?;
            weighted(t, y, 4)
        })),
        ("scale", r(&[6]), Box::new(|t, x| {
            let y = t.scale(x, -1.7)?;
            weighted(t, y, 5)
        })),
        ("sum", r(&[2, 3]), Box::new(|t, x| {
            let y = t.mul(x, x)?;
            t.sum(y)
        })),
        ("weighted_sum", r(&[4]), Box::new(|t, x| {
            let a = weighted(t, x, 6)?;
            let sq = t.mul(x, x)?;
            let b = t.sum(sq)?;
            t.weighted_sum(&[(a, 0.3), (b, -1.2)])
        })),
        ("matmul", r(&[3, 4]), Box::new(|t, x| {
            let mut rng = SeededRng::new(7);
            let w = t.constant(randn(&[4, 2], &mut rng))?;
            let y = t.matmul(x, w)?;
            let xt = t.permute(x, &[1, 0])?;
            let z = t.matmul(x, xt)?;
            let a = weighted(t, y, 8)?;
            let b = weighted(t, z, 9)?;
            t.add(a, b)
        })),
        ("affine", r(&[5, 3]), Box::new(|t, x| {
            let mut rng = SeededRng::new(10);
            let w = t.constant(randn(&[3, 4], &mut rng))?;
            let b = t.constant(randn(&[4], &mut rng))?;
            let y = t.affine(x, w, Some(b))?;
            let y = t.mul(y, y)?;
            weighted(t, y, 11)
        })),
        ("bmm", r(&[2, 3, 4]), Box::new(|t, x| {
            let y = t.bmm(x, x, true)?;
            let mut rng = SeededRng::new(12);
            let c = t.constant(randn(&[2, 4, 2], &mut rng))?;
            let z = t.bmm(x, c, false)?;
            let a = weighted(t, y, 13)?;
            let b = weighted(t, z, 14)?;
            t.add(a, b)
        })),
        ("softmax_rows", r(&[3, 5]), Box::new(|t, x| {
            let y = t.softmax_rows(x)?;
            weighted(t, y, 15)
        })),
        ("layer_norm", r(&[4, 6]), Box::new(|t, x| {
            let mut rng = SeededRng::new(16);
            let g = t.constant(randn(&[6], &mut rng))?;
            let b = t.constant(randn(&[6], &mut rng))?;
            let y = t.layer_norm(x, g, b, 1e-5)?;
            weighted(t, y, 17)
        })),
        ("gelu", r(&[3, 4]), Box::new(|t, x| {
            let y = t.gelu(x)?;
            weighted(t, y, 18)
        })),
        ("reshape", r(&[3, 4]), Box::new(|t, x| {
            let y = t.reshape(x, &[2, 6])?;
            let y = t.mul(y, y)?;
            weighted(t, y, 19)
        })),
        ("gather", r(&[3, 4]), Box::new(|t, x| {
            let idx: Vec<usize> = (0..12).map(|i| (i * 5) % 12).chain([0, 0, 7]).collect();
            let y = t.gather(x, Arc::new(idx), &[15])?;
            weighted(t, y, 20)
        })),
        ("permute", r(&[2, 3, 4]), Box::new(|t, x| {
            let y = t.permute(x, &[2, 0, 1])?;
            weighted(t, y, 21)
        })),
        ("concat", r(&[2, 3]), Box::new(|t, x| {
            let sq = t.mul(x, x)?;
            let y = t.concat(&[x, sq], 1)?;
            weighted(t, y, 22)
        })),
        ("narrow", r(&[3, 4]), Box::new(|t, x| {
            let y = t.narrow(x, 1, 1, 2)?;
            weighted(t, y, 23)
        })),
        ("split", r(&[2, 4]), Box::new(|t, x| {
            let p = t.split(x, 1, &[1, 3])?;
            let a = weighted(t, p[0], 24)?;
            let b = weighted(t, p[1], 25)?;
            let ab = t.mul(a, b)?;
            t.add(ab, a)
        })),
        ("two_channel_magnitude", r(&[2, 3, 3]), Box::new(|t, x| {
            let y = t.two_channel_magnitude(x, MAGNITUDE_EPS)?;
            weighted(t, y, 26)
        })),
        ("l1_loss", r(&[2, 3, 3]), Box::new(|t, x| {
            let mut rng = SeededRng::new(27);
            let target = t.constant(randn(&[2, 3, 3], &mut rng))?;
            t.l1_loss(x, target)
        })),
        ("data_consistency", r(&[2, 8, 8]), Box::new(|t, x| {
            let mut rng = SeededRng::new(28);
            let meas = crate::model::tensor_to_raster(&randn(&[2, 8, 8], &mut rng))?;
            let mask = random_line_mask(8, 2.0, 0.25, 29)?;
            let hard = dc_on_tape(t, x, &mask.apply(&fft2c(&meas)?)?, &mask, DcWeight::Infinite, None)?;
            let soft = dc_on_tape(t, x, &mask.apply(&fft2c(&meas)?)?, &mask, DcWeight::finite(0.6)?, None)?;
            let a = weighted(t, hard, 30)?;
            let b = weighted(t, soft, 31)?;
            t.add(a, b)
        })),
    ]
}

fn worst(checks: &[ParamCheck], floor: f64) -> f64 {
    checks.iter().map(|c| c.rel_err(floor)).fold(0.0, f64::max)
}

/// Operations that own parameters, checked through their parameters and
/// their input.
fn parametric_cases(seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    let dim = 8;
    let (rows, cols) = (4, 4);
    let mut store = ParamStore::new();
    let mut rng = SeededRng::new(derive_seed(seed, &[100]));
    let x = store.add("x", randn(&[rows * cols, dim], &mut rng))?;
    let img = store.add("img", randn(&[2, 8, 8], &mut rng))?;
    let log_lambda = store.add("log_lambda", Tensor::scalar(0.3))?;
    let (block, pair, merge, expand, embed) = {
        let mut init = ParamInit::new(&mut store, derive_seed(seed, &[101]));
        let block: SwinBlockParams = init.block("blk", dim, 2, 2)?;
        let pair = init.pairs("pair", 2, dim, 2, 2)?.remove(0);
        let merge = init.linear("merge", 4 * dim, 2 * dim, false)?;
        let expand = init.linear("expand", dim, 2 * dim, false)?;
        let embed = init.linear("embed", 2 * 2 * 2, dim, true)?;
        (block, pair, merge, expand, embed)
    };
    // The uniform initialisation keeps attention nearly uniform; perturb so
    // the softmax is exercised away from its flat point.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get(id).clone();
        let v = p.data().iter().map(|v| v + 0.3 * rng.normal()).collect();
        store.set(id, Tensor::new(p.shape().to_vec(), v)?)?;
    }
    let all: Vec<_> = store.ids().collect();
    let grid = |t: &mut Tape<'_>| GridVar {
        var: t.param(x),
        rows,
        cols,
        dim,
    };

    let mut run = |name: &'static str, ids: &[crate::autodiff::ParamId], f: &dyn Fn(&mut Tape<'_>) -> Result<Var>| -> Result<()> {
        let checks = check_param_gradients(&store, f, ids, 2, EPS, derive_seed(seed, &[name.len() as u64]))?;
        out.push(OpCheck {
            name,
            rel_err: worst(&checks, FLOOR),
        });
        Ok(())
    };
    let sel = |names: &[&str]| -> Vec<crate::autodiff::ParamId> {
        all.iter()
            .copied()
            .filter(|&id| names.iter().any(|n| store.name(id) == *n || store.name(id).starts_with(&format!("{n}."))))
            .collect()
    };
    run("window_attention", &sel(&["x", "blk"]), &|t| {
        let g = grid(t);
        let y = mhsa(t, g, &block, WindowSpec::regular(2))?;
        weighted(t, y.var, 200)
    })?;
    run("shifted_window_attention", &sel(&["x", "blk"]), &|t| {
        let g = grid(t);
        let y = mhsa(t, g, &block, WindowSpec::shifted(2))?;
        weighted(t, y.var, 201)
    })?;
    run("swin_block_pair", &sel(&["x", "pair"]), &|t| {
        let g = grid(t);
        let y = swin_block_pair(t, g, &pair, 2, 1e-5, None)?;
        weighted(t, y.var, 202)
    })?;
    run("patch_merging", &sel(&["x", "merge"]), &|t| {
        let g = grid(t);
        let y = patch_merging(t, g, &merge)?;
        weighted(t, y.var, 203)
    })?;
    run("patch_expanding", &sel(&["x", "expand"]), &|t| {
        let g = grid(t);
        let y = patch_expanding(t, g, &expand)?;
        weighted(t, y.var, 204)
    })?;
    run("patch_embed_unpatchify", &sel(&["img", "embed"]), &|t| {
        let i = t.param(img);
        let g = patchify(t, i, 2, &embed)?;
        let g2 = GridVar {
            var: t.gelu(g.var)?,
            ..g
        };
        let y = unpatchify(t, g2, 2, 2)?;
        weighted(t, y, 205)
    })?;
    run("data_consistency_trainable", &sel(&["img", "log_lambda"]), &|t| {
        let meas = crate::model::tensor_to_raster(store.get(img))?;
        let meas = crate::model::tensor_to_raster(&crate::model::raster_to_tensor(&meas).map(|v| 0.5 * v + 0.1))?;
        let mask = random_line_mask(8, 2.0, 0.25, 32)?;
        let i = t.param(img);
        let l = t.param(log_lambda);
        let y = dc_on_tape(t, i, &mask.apply(&fft2c(&meas)?)?, &mask, DcWeight::finite(1.0)?, Some(l))?;
        weighted(t, y, 206)
    })?;
    Ok(out)
}

/// Check every differentiable operation; results are in a fixed order.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (k, (name, shape, f)) in unary_cases().into_iter().enumerate() {
        let mut rng = SeededRng::new(derive_seed(seed, &[k as u64]));
        let x = randn(&shape, &mut rng);
        out.push(OpCheck {
            name,
            rel_err: grad_check(|t, v| f(t, v), &x, EPS)?,
        });
    }
    out.extend(parametric_cases(seed)?);
    Ok(out)
}

/// Result of the whole-pipeline check.
#[derive(Debug, Clone)]
pub struct EndToEndCheck {
    pub checks: Vec<ParamCheck>,
    pub max_rel_err: f64,
}

impl EndToEndCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < END_TO_END_TOLERANCE
    }
}

/// Finite-difference check of the total loss of the full pipeline with
/// respect to its parameters: every parameter tensor along one random
/// direction, plus individual entries of a random `fraction` of the tensors.
///
/// Parameters are first perturbed away from initialisation so that no
/// component (the zero-initialised PSF projection in particular) is
/// checked at a degenerate point.
pub fn end_to_end_check(cfg: &McstraConfig, fraction: f64, seed: u64) -> Result<EndToEndCheck> {
    let (mut store, params) = McstraParams::new_store(cfg)?;
    let mut rng = SeededRng::new(derive_seed(seed, &[300]));
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let p = store.get(id).clone();
        let v = p.data().iter().map(|v| v + 0.02 * rng.normal()).collect();
        store.set(id, Tensor::new(p.shape().to_vec(), v)?)?;
    }
    let img = shepp_logan(cfg.height, cfg.width)?;
    let y_full = fft2c(&img)?;
    let mask = random_line_mask(cfg.width, cfg.accel as f64, cfg.center_frac.max(0.125), derive_seed(seed, &[301]))?;
    let y_hat = mask.apply(&y_full)?;
    let sample = Sample {
        y_hat: &y_hat,
        mask: &mask,
        y_full: Some(&y_full),
    };
    let f = |t: &mut Tape<'_>| -> Result<Var> {
        let fv = mcstra_forward_on_tape(t, cfg, &params, sample)?;
        Ok(fv.losses.expect("reference supplied").total)
    };
    let mut checks = check_param_gradients(&store, f, &ids, 0, 1e-6, derive_seed(seed, &[302]))?;
    let sampled: Vec<_> = ids.iter().copied().filter(|_| rng.bernoulli(fraction)).collect();
    checks.extend(
        check_param_gradients(&store, f, &sampled, 2, 1e-6, derive_seed(seed, &[303]))?
            .into_iter()
            .filter(|c| c.probe != crate::autodiff::Probe::Direction),
    );
    let max_rel_err = worst(&checks, FLOOR);
    Ok(EndToEndCheck { checks, max_rel_err })
}

/// The desk-scale model shrunk to a 16×16 input, as used by the pipeline
/// gradient check.
pub fn end_to_end_config() -> McstraConfig {
    McstraConfig {
        height: 16,
        width: 16,
        ..McstraConfig::toy()
    }
}
