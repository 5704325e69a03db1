//! RMSProp and gradient clipping.

use crate::autodiff::{Gradients, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};

/// Plain RMSProp: no momentum, no weight decay, constant learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    /// Running average of squared gradients, one tensor per parameter.
    pub sq_avg: Vec<Tensor>,
    /// Number of updates applied so far.
    pub steps: usize,
    /// Seed the running average with the first squared gradient instead of
    /// averaging it against zero. With a zero start the first updates are
    /// about `1/√(1−ρ)` times the learning rate (10× at ρ = 0.99).
    pub warm_start: bool,
}

impl RmsProp {
    pub fn new(store: &ParamStore, lr: f64, rho: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&rho) || !(eps > 0.0) {
            return Err(Error::Config(format!("invalid RMSProp settings lr={lr} rho={rho} eps={eps}")));
        }
        Ok(Self {
            lr,
            rho,
            eps,
            sq_avg: store.iter().map(|(_, _, p)| Tensor::zeros(p.shape())).collect(),
            steps: 0,
            warm_start: false,
        })
    }

    /// `v ← ρv + (1−ρ)g²` (`v ← g²` on a warm-started first step),
    /// `p ← p − η·g/(√v + ε)`.
    ///
    /// Parameters and accumulators are kept on the `f32` grid so that a
    /// checkpoint captures the exact training state. A non-finite gradient
    /// aborts the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != store.len() || self.sq_avg.len() != store.len() {
            return Err(shape_err!(
                "optimizer tracks {} tensors, store has {}, gradients {}",
                self.sq_avg.len(),
                store.len(),
                grads.len()
            ));
        }
        grads.ensure_finite(store)?;
        let first = self.warm_start && self.steps == 0;
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id);
            let p = store.get(id);
            if g.shape() != p.shape() || self.sq_avg[k].shape() != p.shape() {
                return Err(shape_err!("gradient/state shape mismatch for '{}'", store.name(id)));
            }
            let mut v = self.sq_avg[k].to_vec();
            let mut w = p.to_vec();
            for ((vi, wi), gi) in v.iter_mut().zip(w.iter_mut()).zip(g.data()) {
                let g2 = gi * gi;
                *vi = if first { g2 } else { self.rho * *vi + (1.0 - self.rho) * g2 } as f32 as f64;
                *wi = (*wi - self.lr * gi / (vi.sqrt() + self.eps)) as f32 as f64;
            }
            if !w.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("update made '{}' non-finite", store.name(id))));
            }
            let shape = p.shape().to_vec();
            store.set(id, Tensor::new(shape.clone(), w)?)?;
            self.sq_avg[k] = Tensor::new(shape, v)?;
        }
        self.steps += 1;
        Ok(())
    }
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let n = grads.global_norm();
    if n > max_norm && n.is_finite() {
        grads.scale(max_norm / n);
    }
    n
}
