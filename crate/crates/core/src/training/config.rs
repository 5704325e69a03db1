//! Optimisation settings and the combined run configuration file.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{format_kv, parse_kv, McstraConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps_opt: f64,
    /// Start the RMSProp average at the first squared gradient.
    pub rms_warm_start: bool,
    /// Global-norm gradient clip; 0 disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    /// Keep one mask per volume for the whole run instead of redrawing
    /// random masks every epoch.
    pub fixed_masks: bool,
    /// Validate every this many steps (0 = only at the end of each epoch).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            rho: 0.99,
            eps_opt: 1e-8,
            rms_warm_start: true,
            clip_norm: 1.0,
            batch_size: 8,
            epochs: 50,
            max_steps: 0,
            fixed_masks: false,
            val_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config(format!("clip_norm must be nonnegative, got {}", self.clip_norm)));
        }
        Ok(())
    }

    /// Set one field; returns `Ok(false)` for keys this struct does not own.
    pub fn try_set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
        }
        match key {
            "lr" => self.lr = p(key, value)?,
            "rho" => self.rho = p(key, value)?,
            "eps_opt" => self.eps_opt = p(key, value)?,
            "rms_warm_start" => self.rms_warm_start = p(key, value)?,
            "clip_norm" => self.clip_norm = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "max_steps" => self.max_steps = p(key, value)?,
            "fixed_masks" => self.fixed_masks = p(key, value)?,
            "val_every" => self.val_every = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("rho", self.rho.to_string()),
            ("eps_opt", self.eps_opt.to_string()),
            ("rms_warm_start", self.rms_warm_start.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("fixed_masks", self.fixed_masks.to_string()),
            ("val_every", self.val_every.to_string()),
        ]
    }
}

/// Model and optimisation settings read from one `key = value` file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: McstraConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parse `text`, starting from the toy defaults.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut rc = RunConfig::default();
        for (k, v) in parse_kv(text, origin)? {
            let owned = rc
                .train
                .try_set(&k, &v)
                .map_err(|e| Error::format(origin, e.to_string()))?;
            if !owned {
                rc.model.set(&k, &v).map_err(|e| Error::format(origin, e.to_string()))?;
            }
        }
        rc.model.validate().map_err(|e| Error::format(origin, e.to_string()))?;
        rc.train.validate().map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(rc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_atomic(path, self.to_string().as_bytes())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut e = self.model.entries();
        e.extend(self.train.entries());
        f.write_str(&format_kv(&e))
    }
}
