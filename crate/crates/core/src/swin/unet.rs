//! The Swin-Unet forward pass.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};

use super::block::{linear, patch_expanding, patch_merging, patchify, swin_block_pair, unpatchify, GridVar};
use super::params::SwinUnetParams;

/// `[c_in, h, w]` → `[c_out, h, w]`: patch embedding, encoder stages with
/// patch merging, bottleneck, decoder stages with patch expanding and skip
/// fusion, then projection back to pixels.
///
/// `e_pos` (`[tokens, dim]` at full token resolution) is added once, right
/// after the patch embedding, and again before the last decoder stage when
/// the geometry asks for re-injection.
pub fn swin_unet_forward(t: &mut Tape<'_>, input: Var, p: &SwinUnetParams, e_pos: Option<Var>) -> Result<Var> {
    let g = &p.geometry;
    let s = t.shape(input).to_vec();
    if s.len() != 3 || s[0] != g.in_channels {
        return Err(shape_err!("Swin-Unet expects [{}, h, w] input, got {s:?}", g.in_channels));
    }
    g.check_input(s[1], s[2])?;
    let mut x = patchify(t, input, g.patch, &p.embed)?;
    if let Some(e) = e_pos {
        if t.shape(e) != [x.tokens(), x.dim] {
            return Err(shape_err!("positional embedding {:?} for {} tokens of width {}", t.shape(e), x.tokens(), x.dim));
        }
        let v = t.add(x.var, e)?;
        x = GridVar { var: v, ..x };
    }
    let mut skips = Vec::with_capacity(p.encoders.len());
    for stage in &p.encoders {
        for pair in &stage.pairs {
            x = swin_block_pair(t, x, pair, g.window, g.ln_eps, None)?;
        }
        skips.push(x);
        x = patch_merging(t, x, &stage.merge)?;
    }
    for pair in &p.bottleneck {
        x = swin_block_pair(t, x, pair, g.window, g.ln_eps, None)?;
    }
    for stage in &p.decoders {
        let skip = skips.pop().ok_or_else(|| shape_err!("more decoder than encoder stages"))?;
        let up = patch_expanding(t, x, &stage.expand)?;
        if (up.rows, up.cols, up.dim) != (skip.rows, skip.cols, skip.dim) {
            return Err(shape_err!(
                "decoder grid {}x{}x{} does not match skip {}x{}x{}",
                up.rows,
                up.cols,
                up.dim,
                skip.rows,
                skip.cols,
                skip.dim
            ));
        }
        let cat = t.concat(&[up.var, skip.var], 1)?;
        let fused = linear(t, cat, &stage.fuse)?;
        x = GridVar::new(t, fused, up.rows, up.cols)?;
        let reinject = if skips.is_empty() && g.reinject_pos { e_pos } else { None };
        for (i, pair) in stage.pairs.iter().enumerate() {
            x = swin_block_pair(t, x, pair, g.window, g.ln_eps, if i == 0 { reinject } else { None })?;
        }
    }
    let out = linear(t, x.var, &p.head)?;
    let out = GridVar::new(t, out, x.rows, x.cols)?;
    unpatchify(t, out, g.out_channels, g.patch)
}
