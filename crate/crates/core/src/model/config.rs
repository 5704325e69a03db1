//! Model configuration, ablation variants and the `key = value` text format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::MaskKind;
use crate::error::{Error, Result};
use crate::kspace::DcWeight;
use crate::swin::UnetGeometry;

/// Pipeline variants used to isolate each architectural component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// No multi-branch extractor: the cascade starts from the zero-filled image.
    A,
    /// Both branches see the full undersampled k-space; branch losses use the
    /// full reference.
    B,
    /// Complex-to-complex tail; the magnitude is taken after it.
    C,
    /// No PSF-guided embedding: `E_pos = E_abs`.
    D,
    /// Centered square low-frequency region instead of the line band.
    E,
    /// The full model.
    F,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [Ablation::A, Ablation::B, Ablation::C, Ablation::D, Ablation::E, Ablation::F];
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Ablation::A),
            "B" | "b" => Ok(Ablation::B),
            "C" | "c" => Ok(Ablation::C),
            "D" | "d" => Ok(Ablation::D),
            "E" | "e" => Ok(Ablation::E),
            "F" | "f" => Ok(Ablation::F),
            other => Err(Error::Config(format!("unknown ablation configuration '{other}'"))),
        }
    }
}

/// Which view of the PSF feeds the embedding projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsfInput {
    Magnitude,
    Real,
    /// Real and imaginary parts as two channels.
    Complex,
}

impl PsfInput {
    pub fn channels(self) -> usize {
        match self {
            PsfInput::Complex => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for PsfInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PsfInput::Magnitude => "magnitude",
            PsfInput::Real => "real",
            PsfInput::Complex => "complex",
        })
    }
}

impl FromStr for PsfInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "magnitude" => Ok(PsfInput::Magnitude),
            "real" => Ok(PsfInput::Real),
            "complex" => Ok(PsfInput::Complex),
            other => Err(Error::Config(format!("unknown PSF input '{other}'"))),
        }
    }
}

/// Cascade loss weighting across stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaSchedule {
    /// `β_t = t / Σk`.
    Linear,
    /// Only the last stage contributes.
    FinalOnly,
}

impl fmt::Display for BetaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BetaSchedule::Linear => "linear",
            BetaSchedule::FinalOnly => "final",
        })
    }
}

impl FromStr for BetaSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(BetaSchedule::Linear),
            "final" => Ok(BetaSchedule::FinalOnly),
            other => Err(Error::Config(format!("unknown beta schedule '{other}'"))),
        }
    }
}

/// Stage weights of the cascade loss.
pub fn beta_schedule(n: usize, schedule: BetaSchedule) -> Vec<f64> {
    match schedule {
        BetaSchedule::Linear => {
            let total = (n * (n + 1) / 2) as f64;
            (1..=n).map(|t| t as f64 / total).collect()
        }
        BetaSchedule::FinalOnly => (1..=n).map(|t| if t == n { 1.0 } else { 0.0 }).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McstraConfig {
    pub height: usize,
    pub width: usize,
    /// Number of cascade stages `N`.
    pub cascade_length: usize,
    pub branch_dim: usize,
    pub cascade_dim: usize,
    pub tail_dim: usize,
    pub dc_lambda: DcWeight,
    /// Learn `log λ` instead of keeping λ fixed.
    pub train_lambda: bool,
    pub alpha_l: f64,
    pub alpha_h: f64,
    pub gamma_branch: f64,
    pub gamma_cas: f64,
    pub gamma_tail: f64,
    pub beta: BetaSchedule,
    pub accel: usize,
    pub center_frac: f64,
    pub mask_kind: MaskKind,
    pub patch: usize,
    pub window: usize,
    pub head_dim: usize,
    pub depths: Vec<usize>,
    pub bottleneck_depth: usize,
    pub mlp_ratio: usize,
    /// Re-add the positional embedding before the last decoder stage.
    pub reinject_pos: bool,
    /// Zero the output affine of every attention/MLP branch at
    /// initialisation so each Swin block starts as the identity.
    pub zero_residual_init: bool,
    pub psf_input: PsfInput,
    pub ablation: Ablation,
    /// Parameter initialisation seed.
    pub seed: u64,
}

impl McstraConfig {
    /// Full-size settings: widths 48/96/48, five cascade stages.
    pub fn full_size(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cascade_length: 5,
            branch_dim: 48,
            cascade_dim: 96,
            tail_dim: 48,
            dc_lambda: DcWeight::Infinite,
            train_lambda: false,
            alpha_l: 0.5,
            alpha_h: 0.5,
            gamma_branch: 1.0 / 3.0,
            gamma_cas: 1.0 / 3.0,
            gamma_tail: 1.0 / 3.0,
            beta: BetaSchedule::Linear,
            accel: 4,
            center_frac: 0.08,
            mask_kind: MaskKind::Random,
            patch: 2,
            window: 4,
            head_dim: 16,
            depths: vec![2, 2],
            bottleneck_depth: 2,
            mlp_ratio: 4,
            reinject_pos: false,
            zero_residual_init: true,
            psf_input: PsfInput::Magnitude,
            ablation: Ablation::F,
            seed: 0,
        }
    }

    /// Desk-scale settings: 64×64, widths 16/32/16, three cascade stages.
    pub fn toy() -> Self {
        Self {
            cascade_length: 3,
            branch_dim: 16,
            cascade_dim: 32,
            tail_dim: 16,
            ..Self::full_size(64, 64)
        }
    }

    pub fn betas(&self) -> Vec<f64> {
        beta_schedule(self.cascade_length, self.beta)
    }

    pub fn unet_geometry(&self, in_channels: usize, out_channels: usize, dim: usize) -> UnetGeometry {
        UnetGeometry {
            in_channels,
            out_channels,
            dim,
            patch: self.patch,
            window: self.window,
            head_dim: self.head_dim,
            depths: self.depths.clone(),
            bottleneck_depth: self.bottleneck_depth,
            mlp_ratio: self.mlp_ratio,
            ln_eps: 1e-5,
            reinject_pos: self.reinject_pos,
            zero_residual_init: self.zero_residual_init,
        }
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch.max(1)) * (self.width / self.patch.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.cascade_length == 0 {
            return bad("cascade_length must be at least 1".into());
        }
        if !self.height.is_power_of_two() || !self.width.is_power_of_two() {
            return bad(format!("image size {}x{} must be powers of two", self.height, self.width));
        }
        for (name, g) in [
            ("alpha_l", self.alpha_l),
            ("alpha_h", self.alpha_h),
            ("gamma_branch", self.gamma_branch),
            ("gamma_cas", self.gamma_cas),
            ("gamma_tail", self.gamma_tail),
        ] {
            if !(g >= 0.0 && g.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {g}"));
            }
        }
        if self.accel == 0 {
            return bad("accel must be positive".into());
        }
        if !(self.center_frac > 0.0 && self.center_frac < 1.0) {
            return bad(format!("center_frac must lie in (0, 1), got {}", self.center_frac));
        }
        if self.train_lambda && !matches!(self.dc_lambda, DcWeight::Finite(l) if l > 0.0) {
            return bad("train_lambda needs a finite positive dc_lambda to start from".into());
        }
        for dim in [self.branch_dim, self.cascade_dim, self.tail_dim] {
            let g = self.unet_geometry(2, 2, dim);
            g.validate()?;
            g.check_input(self.height, self.width)
                .map_err(|e| Error::Config(format!("image size incompatible with the network: {e}")))?;
        }
        Ok(())
    }

    /// Set one field from its text form; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "height" => self.height = p(key, value)?,
            "width" => self.width = p(key, value)?,
            "cascade_length" => self.cascade_length = p(key, value)?,
            "branch_dim" => self.branch_dim = p(key, value)?,
            "cascade_dim" => self.cascade_dim = p(key, value)?,
            "tail_dim" => self.tail_dim = p(key, value)?,
            "dc_lambda" => self.dc_lambda = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "train_lambda" => self.train_lambda = p(key, value)?,
            "alpha_l" => self.alpha_l = p(key, value)?,
            "alpha_h" => self.alpha_h = p(key, value)?,
            "gamma_branch" => self.gamma_branch = p(key, value)?,
            "gamma_cas" => self.gamma_cas = p(key, value)?,
            "gamma_tail" => self.gamma_tail = p(key, value)?,
            "beta_schedule" => self.beta = value.parse()?,
            "accel" => self.accel = p(key, value)?,
            "center_frac" => self.center_frac = p(key, value)?,
            "mask_kind" => self.mask_kind = value.trim().parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "patch" => self.patch = p(key, value)?,
            "window" => self.window = p(key, value)?,
            "head_dim" => self.head_dim = p(key, value)?,
            "depths" => {
                self.depths = value
                    .split(',')
                    .map(|d| p(key, d))
                    .collect::<Result<Vec<usize>>>()?
            }
            "bottleneck_depth" => self.bottleneck_depth = p(key, value)?,
            "mlp_ratio" => self.mlp_ratio = p(key, value)?,
            "reinject_pos" => self.reinject_pos = p(key, value)?,
            "zero_residual_init" => self.zero_residual_init = p(key, value)?,
            "psf_input" => self.psf_input = value.parse()?,
            "ablation" => self.ablation = value.parse()?,
            "seed" => self.seed = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let depths: Vec<String> = self.depths.iter().map(|d| d.to_string()).collect();
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("cascade_length", self.cascade_length.to_string()),
            ("branch_dim", self.branch_dim.to_string()),
            ("cascade_dim", self.cascade_dim.to_string()),
            ("tail_dim", self.tail_dim.to_string()),
            ("dc_lambda", self.dc_lambda.to_string()),
            ("train_lambda", self.train_lambda.to_string()),
            ("alpha_l", self.alpha_l.to_string()),
            ("alpha_h", self.alpha_h.to_string()),
            ("gamma_branch", self.gamma_branch.to_string()),
            ("gamma_cas", self.gamma_cas.to_string()),
            ("gamma_tail", self.gamma_tail.to_string()),
            ("beta_schedule", self.beta.to_string()),
            ("accel", self.accel.to_string()),
            ("center_frac", self.center_frac.to_string()),
            ("mask_kind", self.mask_kind.to_string()),
            ("patch", self.patch.to_string()),
            ("window", self.window.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("depths", depths.join(",")),
            ("bottleneck_depth", self.bottleneck_depth.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("reinject_pos", self.reinject_pos.to_string()),
            ("zero_residual_init", self.zero_residual_init.to_string()),
            ("psf_input", self.psf_input.to_string()),
            ("ablation", self.ablation.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

impl Default for McstraConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Split `key = value` text into pairs, skipping blanks and `#` comments.
/// Duplicate keys are errors.
pub fn parse_kv(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(origin, format!("line {}: expected 'key = value'", n + 1)))?;
        let k = k.trim().to_string();
        if out.iter().any(|(e, _)| *e == k) {
            return Err(Error::format(origin, format!("line {}: duplicate key '{k}'", n + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

pub fn format_kv(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

impl FromStr for McstraConfig {
    type Err = Error;

    /// Start from [`McstraConfig::toy`] and override the listed keys.
    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = McstraConfig::toy();
        for (k, v) in parse_kv(s, Path::new("<config>"))? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }
}

impl fmt::Display for McstraConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_kv(&self.entries()))
    }
}

/// How the low/high branch inputs are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchMode {
    None,
    /// Band of `2·center` lines vs. its complement.
    Band,
    /// Centered square of equal area vs. its complement.
    Square,
    /// Both branches receive the full undersampled k-space.
    Unpartitioned,
}

/// The effective pipeline after applying an ablation tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pipeline {
    pub branches: BranchMode,
    /// Tail maps complex to complex (magnitude after) instead of magnitude
    /// to magnitude.
    pub complex_tail: bool,
    pub psf_embedding: bool,
}

pub fn ablation_apply(cfg: &McstraConfig) -> Pipeline {
    let full = Pipeline {
        branches: BranchMode::Band,
        complex_tail: false,
        psf_embedding: true,
    };
    match cfg.ablation {
        Ablation::A => Pipeline {
            branches: BranchMode::None,
            ..full
        },
        Ablation::B => Pipeline {
            branches: BranchMode::Unpartitioned,
            ..full
        },
        Ablation::C => Pipeline {
            complex_tail: true,
            ..full
        },
        Ablation::D => Pipeline {
            psf_embedding: false,
            ..full
        },
        Ablation::E => Pipeline {
            branches: BranchMode::Square,
            ..full
        },
        Ablation::F => full,
    }
}
