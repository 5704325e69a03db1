//! Tape-level Swin building blocks: patch embedding, windowed attention,
//! transformer blocks and the resolution-changing token rearrangements.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};

use super::params::{BlockPair, LayerNormParams, Linear, SwinBlockParams};
use super::window::{cached_mask, head_merge_index, head_split_index, WindowSpec};

/// A token grid living on a tape: `var` has shape `[rows·cols, dim]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridVar {
    pub var: Var,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
}

impl GridVar {
    pub fn new(t: &Tape<'_>, var: Var, rows: usize, cols: usize) -> Result<Self> {
        let s = t.shape(var);
        if s.len() != 2 || s[0] != rows * cols {
            return Err(shape_err!("{s:?} is not a {rows}x{cols} token grid"));
        }
        Ok(Self {
            var,
            rows,
            cols,
            dim: s[1],
        })
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    fn with(self, var: Var) -> Self {
        Self { var, ..self }
    }
}

pub fn linear(t: &mut Tape<'_>, x: Var, l: &Linear) -> Result<Var> {
    let w = t.param(l.w);
    let b = l.b.map(|b| t.param(b));
    t.affine(x, w, b)
}

pub fn norm(t: &mut Tape<'_>, x: Var, p: &LayerNormParams, eps: f64) -> Result<Var> {
    let (g, b) = (t.param(p.gain), t.param(p.bias));
    t.layer_norm(x, g, b, eps)
}

/// Cut `[c, h, w]` into non-overlapping `patch × patch` tiles and embed each
/// flattened tile (channel-major, then row, then column) with `embed`.
pub fn patchify(t: &mut Tape<'_>, img: Var, patch: usize, embed: &Linear) -> Result<GridVar> {
    let s = t.shape(img).to_vec();
    if s.len() != 3 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(shape_err!("cannot patchify {s:?} with patch {patch}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (rows, cols) = (h / patch, w / patch);
    let feat = c * patch * patch;
    if embed.fan_in != feat {
        return Err(shape_err!("patch embedding expects {} features, patches have {feat}", embed.fan_in));
    }
    let mut index = Vec::with_capacity(rows * cols * feat);
    for r in 0..rows {
        for q in 0..cols {
            for ch in 0..c {
                for i in 0..patch {
                    for j in 0..patch {
                        index.push(ch * h * w + (r * patch + i) * w + q * patch + j);
                    }
                }
            }
        }
    }
    let flat = t.gather(img, Arc::new(index), &[rows * cols, feat])?;
    let var = linear(t, flat, embed)?;
    GridVar::new(t, var, rows, cols)
}

/// Inverse pixel layout of [`patchify`]: `[rows·cols, c·patch²]` → `[c, h, w]`.
pub fn unpatchify(t: &mut Tape<'_>, g: GridVar, channels: usize, patch: usize) -> Result<Var> {
    let feat = channels * patch * patch;
    if g.dim != feat {
        return Err(shape_err!("tokens of width {} cannot hold {channels}x{patch}x{patch} pixels", g.dim));
    }
    let (h, w) = (g.rows * patch, g.cols * patch);
    let mut index = Vec::with_capacity(channels * h * w);
    for ch in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let tok = (y / patch) * g.cols + x / patch;
                index.push(tok * feat + ch * patch * patch + (y % patch) * patch + x % patch);
            }
        }
    }
    t.gather(g.var, Arc::new(index), &[channels, h, w])
}

/// Multi-head self-attention inside (possibly shifted) windows, including
/// the output projection. The input is expected to be normalised already.
pub fn mhsa(t: &mut Tape<'_>, x: GridVar, p: &SwinBlockParams, spec: WindowSpec) -> Result<GridVar> {
    if x.dim != p.dim {
        return Err(shape_err!("attention over width {} with parameters for {}", x.dim, p.dim));
    }
    let spec = spec.fit(x.rows, x.cols)?;
    let (heads, d) = (p.heads, p.dim);
    let hd = d / heads;
    let m2 = spec.window * spec.window;
    let n_win = x.tokens() / m2;
    let batch = heads * n_win;
    let split = head_split_index(x.rows, x.cols, spec, d, heads);
    let project = |t: &mut Tape<'_>, l: &Linear| -> Result<Var> {
        let y = linear(t, x.var, l)?;
        t.gather(y, split.clone(), &[batch, m2, hd])
    };
    let q = project(t, &p.q)?;
    let k = project(t, &p.k)?;
    let v = project(t, &p.v)?;
    let q = t.scale(q, 1.0 / (hd as f64).sqrt())?;
    let mut logits = t.bmm(q, k, true)?;
    if spec.shift > 0 {
        let mask = t.constant(cached_mask(x.rows, x.cols, spec))?;
        let l4 = t.reshape(logits, &[heads, n_win, m2, m2])?;
        let l4 = t.add(l4, mask)?;
        logits = t.reshape(l4, &[batch, m2, m2])?;
    }
    let attn = t.softmax_rows(logits)?;
    let out = t.bmm(attn, v, false)?;
    let merged = t.gather(out, head_merge_index(x.rows, x.cols, spec, d, heads), &[x.tokens(), d])?;
    let y = linear(t, merged, &p.proj)?;
    Ok(x.with(y))
}

/// `ẑ = MSA(LN(z)) + z`, `z' = MLP(LN(ẑ)) + ẑ`.
pub fn swin_block(t: &mut Tape<'_>, x: GridVar, p: &SwinBlockParams, spec: WindowSpec, eps: f64) -> Result<GridVar> {
    let h = norm(t, x.var, &p.ln1, eps)?;
    let a = mhsa(t, x.with(h), p, spec)?;
    let z = t.add(x.var, a.var)?;
    let h = norm(t, z, &p.ln2, eps)?;
    let h = linear(t, h, &p.fc1)?;
    let h = t.gelu(h)?;
    let h = linear(t, h, &p.fc2)?;
    let out = t.add(z, h)?;
    Ok(x.with(out))
}

/// W-MSA block then SW-MSA block; `e_pos`, when given, is added first.
pub fn swin_block_pair(
    t: &mut Tape<'_>,
    x: GridVar,
    pair: &BlockPair,
    window: usize,
    eps: f64,
    e_pos: Option<Var>,
) -> Result<GridVar> {
    let x = match e_pos {
        Some(e) => {
            if t.shape(e) != [x.tokens(), x.dim] {
                return Err(shape_err!(
                    "positional embedding {:?} for a {}x{}x{} grid",
                    t.shape(e),
                    x.rows,
                    x.cols,
                    x.dim
                ));
            }
            let v = t.add(x.var, e)?;
            x.with(v)
        }
        None => x,
    };
    let x = swin_block(t, x, &pair.regular, WindowSpec::regular(window), eps)?;
    swin_block(t, x, &pair.shifted, WindowSpec::shifted(window), eps)
}

/// Concatenate each 2×2 token group in the order (0,0), (1,0), (0,1), (1,1)
/// and reduce `4·dim → 2·dim`.
pub fn patch_merging(t: &mut Tape<'_>, x: GridVar, reduce: &Linear) -> Result<GridVar> {
    if x.rows % 2 != 0 || x.cols % 2 != 0 {
        return Err(shape_err!("cannot merge a {}x{} grid", x.rows, x.cols));
    }
    let (rows, cols, d) = (x.rows / 2, x.cols / 2, x.dim);
    let mut index = Vec::with_capacity(x.tokens() * d);
    for r in 0..rows {
        for c in 0..cols {
            for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let src = (2 * r + dr) * x.cols + 2 * c + dc;
                index.extend(src * d..(src + 1) * d);
            }
        }
    }
    let grouped = t.gather(x.var, Arc::new(index), &[rows * cols, 4 * d])?;
    let y = linear(t, grouped, reduce)?;
    GridVar::new(t, y, rows, cols)
}

/// Map `dim → 2·dim`, then spread each token over a 2×2 group of
/// `dim/2`-wide tokens (same group order as [`patch_merging`]).
pub fn patch_expanding(t: &mut Tape<'_>, x: GridVar, expand: &Linear) -> Result<GridVar> {
    let y = linear(t, x.var, expand)?;
    let wide = t.shape(y)[1];
    if wide % 4 != 0 {
        return Err(shape_err!("expanded width {wide} does not split into 2x2 tokens"));
    }
    let part = wide / 4;
    let (rows, cols) = (2 * x.rows, 2 * x.cols);
    let mut index = Vec::with_capacity(rows * cols * part);
    for yy in 0..rows {
        for xx in 0..cols {
            let q = yy % 2 + 2 * (xx % 2);
            let src = (yy / 2) * x.cols + xx / 2;
            let base = src * wide + q * part;
            index.extend(base..base + part);
        }
    }
    let out = t.gather(y, Arc::new(index), &[rows * cols, part])?;
    GridVar::new(t, out, rows, cols)
}
