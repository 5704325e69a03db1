//! Central-difference gradient oracle.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

fn scalar_loss(tape: &Tape<'_>, v: Var) -> Result<f64> {
    tape.value(v).item().map_err(|_| {
        Error::Tape(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(v)
        ))
    })
}

/// Compare tape gradients of a scalar function of `x` with central
/// differences at step `eps`. Returns the norm-wise relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.add("x", x.clone())?;
    let analytic = {
        let mut tape = Tape::new(&store);
        let xv = tape.param(id);
        let loss = f(&mut tape, xv)?;
        scalar_loss(&tape, loss)?;
        tape.backward(loss)?.get(id).to_vec()
    };
    let eval = |values: Vec<f64>| -> Result<f64> {
        let empty = ParamStore::new();
        let mut tape = Tape::new(&empty);
        let xv = tape.constant(Tensor::new(x.shape().to_vec(), values)?)?;
        let loss = f(&mut tape, xv)?;
        scalar_loss(&tape, loss)
    };
    let base = x.to_vec();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(relative_error(&analytic, &numeric))
}

/// One entry of a parameter-gradient check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// What was probed: an entry index or a random direction.
    pub probe: Probe,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Entry(usize),
    Direction,
}

impl ParamCheck {
    /// `|a − n| / max(|a|, |n|)`, with absolute fallback `floor`.
    pub fn rel_err(&self, floor: f64) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / denom
    }
}

fn loss_of<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let v = f(&mut tape)?;
    scalar_loss(&tape, v)
}

/// Check parameter gradients of `f` by finite differences.
///
/// For every id in `ids` the gradient is projected on a random Gaussian
/// direction (covering every entry at once) and `entries_per_param` randomly
/// chosen entries are checked individually.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    f: F,
    ids: &[ParamId],
    entries_per_param: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        scalar_loss(&tape, loss)?;
        tape.backward(loss)?
    };
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();
    for &id in ids {
        let p = store.get(id);
        let g = grads.get(id);
        let name = store.name(id).to_string();

        let dir: Vec<f64> = (0..p.len()).map(|_| rng.normal()).collect();
        let analytic: f64 = g.data().iter().zip(&dir).map(|(a, b)| a * b).sum();
        let shifted = |sign: f64| -> Result<f64> {
            let mut s = store.clone();
            let vals = p.data().iter().zip(&dir).map(|(v, d)| v + sign * eps * d).collect();
            s.set(id, Tensor::new(p.shape().to_vec(), vals)?)?;
            loss_of(&s, &f)
        };
        let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * eps);
        out.push(ParamCheck {
            name: name.clone(),
            probe: Probe::Direction,
            analytic,
            numeric,
        });

        for _ in 0..entries_per_param.min(p.len()) {
            let i = rng.below(p.len());
            let entry = |delta: f64| -> Result<f64> {
                let mut s = store.clone();
                let mut vals = p.to_vec();
                vals[i] += delta;
                s.set(id, Tensor::new(p.shape().to_vec(), vals)?)?;
                loss_of(&s, &f)
            };
            let numeric = (entry(eps)? - entry(-eps)?) / (2.0 * eps);
            out.push(ParamCheck {
                name: name.clone(),
                probe: Probe::Entry(i),
                analytic: g.data()[i],
                numeric,
            });
        }
    }
    Ok(out)
}
