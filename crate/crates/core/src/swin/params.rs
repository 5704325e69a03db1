//! Parameter containers for Swin blocks and Swin-Unets, plus their seeded
//! initialisation.

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::rng::SeededRng;

use super::window::WindowSpec;

/// Affine map `x·W + b` with `W: [fan_in, fan_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

/// One Swin transformer block: attention and MLP sub-blocks, each behind a
/// pre-norm and a residual connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwinBlockParams {
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// A regular-window block followed by a shifted-window block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPair {
    pub regular: SwinBlockParams,
    pub shifted: SwinBlockParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderStage {
    pub pairs: Vec<BlockPair>,
    /// `4·dim → 2·dim` reduction applied to each 2×2 token group.
    pub merge: Linear,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderStage {
    /// `2·dim → 4·dim`, rearranged into a 2×2 group of `dim`-wide tokens.
    pub expand: Linear,
    /// `2·dim → dim` fusion of the upsampled tokens with the skip tokens.
    pub fuse: Linear,
    pub pairs: Vec<BlockPair>,
}

/// Static shape of a Swin-Unet.
#[derive(Debug, Clone, PartialEq)]
pub struct UnetGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Token width at full resolution; doubles at each encoder stage.
    pub dim: usize,
    pub patch: usize,
    pub window: usize,
    /// Width of one attention head; `heads = dim / head_dim`.
    pub head_dim: usize,
    /// Blocks per encoder stage (mirrored by the decoder); each must be even.
    pub depths: Vec<usize>,
    pub bottleneck_depth: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
    /// Add the positional embedding again before the full-resolution
    /// decoder blocks, not only after the patch embedding.
    pub reinject_pos: bool,
    /// Start every block as the identity (see [`ParamInit::zero_residual`]).
    pub zero_residual_init: bool,
}

impl UnetGeometry {
    pub fn new(in_channels: usize, out_channels: usize, dim: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            dim,
            patch: 2,
            window: 4,
            head_dim: 16,
            depths: vec![2, 2],
            bottleneck_depth: 2,
            mlp_ratio: 4,
            ln_eps: 1e-5,
            reinject_pos: false,
            zero_residual_init: false,
        }
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    /// Head count for a token width.
    pub fn heads(&self, dim: usize) -> Result<usize> {
        let heads = (dim / self.head_dim.max(1)).max(1);
        if dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible into {heads} heads")));
        }
        Ok(heads)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.out_channels == 0 || self.dim == 0 {
            return bad("channels and width must be positive".into());
        }
        if self.patch == 0 || self.window == 0 || self.head_dim == 0 || self.mlp_ratio == 0 {
            return bad("patch, window, head_dim and mlp_ratio must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        for (i, &d) in self.depths.iter().chain([&self.bottleneck_depth]).enumerate() {
            if d == 0 || d % 2 != 0 {
                return bad(format!("stage {i} depth {d} must be a positive even number"));
            }
        }
        for s in 0..=self.stages() {
            self.heads(self.dim << s)?;
        }
        Ok(())
    }

    /// Check that an `h × w` input is legal at every stage.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(shape_err!("{h}x{w} input not divisible by patch {}", self.patch));
        }
        let (mut r, mut c) = (h / self.patch, w / self.patch);
        for s in 0..=self.stages() {
            WindowSpec::shifted(self.window).fit(r, c)?;
            if s < self.stages() {
                if r % 2 != 0 || c % 2 != 0 {
                    return Err(shape_err!("stage {s} grid {r}x{c} cannot be merged"));
                }
                r /= 2;
                c /= 2;
            }
        }
        Ok(())
    }
}

/// Seeded parameter factory writing into a [`ParamStore`].
///
/// Weights are uniform in `±1/√fan_in`, biases zero, layer-norm gains one;
/// all values land on the f32 grid so checkpoints round-trip exactly.
pub struct ParamInit<'s> {
    pub store: &'s mut ParamStore,
    pub rng: SeededRng,
    /// Zero the output affine of every attention and MLP branch, so each
    /// block starts as the identity map.
    pub zero_residual: bool,
}

impl<'s> ParamInit<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: SeededRng::new(seed),
            zero_residual: false,
        }
    }

    pub fn tensor(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        self.store.add(name, t.map(|v| v as f32 as f64))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let t = Tensor::from_fn(shape, |_| self.rng.uniform_range(-bound, bound));
        self.tensor(name, t)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        let w = self.uniform(&format!("{name}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())?;
        let b = if bias {
            Some(self.tensor(&format!("{name}.b"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b, fan_in, fan_out })
    }

    /// Output affine of a residual branch. The uniform draw is always made so
    /// the remaining parameters do not depend on `zero_residual`.
    fn residual_out(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let l = self.linear(name, fan_in, fan_out, true)?;
        if self.zero_residual {
            self.store.set(l.w, Tensor::zeros(&[fan_in, fan_out]))?;
        }
        Ok(l)
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gain: self.tensor(&format!("{name}.g"), Tensor::ones(&[dim]))?,
            bias: self.tensor(&format!("{name}.b"), Tensor::zeros(&[dim]))?,
            dim,
        })
    }

    pub fn block(&mut self, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<SwinBlockParams> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible into {heads} heads")));
        }
        let hidden = dim * mlp_ratio;
        Ok(SwinBlockParams {
            ln1: self.layer_norm(&format!("{name}.ln1"), dim)?,
            q: self.linear(&format!("{name}.q"), dim, dim, true)?,
            k: self.linear(&format!("{name}.k"), dim, dim, true)?,
            v: self.linear(&format!("{name}.v"), dim, dim, true)?,
            proj: self.residual_out(&format!("{name}.proj"), dim, dim)?,
            ln2: self.layer_norm(&format!("{name}.ln2"), dim)?,
            fc1: self.linear(&format!("{name}.fc1"), dim, hidden, true)?,
            fc2: self.residual_out(&format!("{name}.fc2"), hidden, dim)?,
            heads,
            dim,
        })
    }

    pub fn pairs(&mut self, name: &str, depth: usize, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Vec<BlockPair>> {
        (0..depth / 2)
            .map(|i| {
                Ok(BlockPair {
                    regular: self.block(&format!("{name}.pair{i}.w"), dim, heads, mlp_ratio)?,
                    shifted: self.block(&format!("{name}.pair{i}.sw"), dim, heads, mlp_ratio)?,
                })
            })
            .collect()
    }
}

/// All parameters of one Swin-Unet.
#[derive(Debug, Clone, PartialEq)]
pub struct SwinUnetParams {
    pub geometry: UnetGeometry,
    pub embed: Linear,
    pub encoders: Vec<EncoderStage>,
    pub bottleneck: Vec<BlockPair>,
    /// Ordered deepest first, i.e. in execution order.
    pub decoders: Vec<DecoderStage>,
    /// `dim → patch²·out_channels` projection back to pixels.
    pub head: Linear,
}

impl SwinUnetParams {
    /// Register a freshly initialised Swin-Unet under `prefix`.
    pub fn init(init: &mut ParamInit<'_>, prefix: &str, geometry: UnetGeometry) -> Result<Self> {
        geometry.validate()?;
        let g = &geometry;
        init.zero_residual = g.zero_residual_init;
        let p2 = g.patch * g.patch;
        let embed = init.linear(&format!("{prefix}.embed"), g.in_channels * p2, g.dim, true)?;
        let mut encoders = Vec::with_capacity(g.stages());
        for (s, &depth) in g.depths.iter().enumerate() {
            let d = g.dim << s;
            encoders.push(EncoderStage {
                pairs: init.pairs(&format!("{prefix}.enc{s}"), depth, d, g.heads(d)?, g.mlp_ratio)?,
                merge: init.linear(&format!("{prefix}.enc{s}.merge"), 4 * d, 2 * d, true)?,
            });
        }
        let deep = g.dim << g.stages();
        let bottleneck = init.pairs(&format!("{prefix}.mid"), g.bottleneck_depth, deep, g.heads(deep)?, g.mlp_ratio)?;
        let mut decoders = Vec::with_capacity(g.stages());
        for (s, &depth) in g.depths.iter().enumerate().rev() {
            let d = g.dim << s;
            decoders.push(DecoderStage {
                expand: init.linear(&format!("{prefix}.dec{s}.expand"), 2 * d, 4 * d, true)?,
                fuse: init.linear(&format!("{prefix}.dec{s}.fuse"), 2 * d, d, true)?,
                pairs: init.pairs(&format!("{prefix}.dec{s}"), depth, d, g.heads(d)?, g.mlp_ratio)?,
            });
        }
        let head = init.linear(&format!("{prefix}.head"), g.dim, p2 * g.out_channels, true)?;
        Ok(Self {
            geometry,
            embed,
            encoders,
            bottleneck,
            decoders,
            head,
        })
    }
}
