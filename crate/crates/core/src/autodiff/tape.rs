//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value and enough context
//! to propagate gradients. [`Tape::backward`] walks the nodes in reverse
//! creation order, which is a valid reverse topological order because inputs
//! always precede outputs.

use std::sync::Arc;

use super::gemm::{gemm, View};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{numel, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// A user-defined differentiable operation.
///
/// `backward` receives the upstream gradient (same shape as the output) and
/// returns one optional gradient per input, shaped like that input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MatMul(Var, Var),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Reshape(Var),
    Gather {
        a: Var,
        index: Arc<Vec<usize>>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Magnitude(Var),
    L1(Var, Var),
    Custom {
        inputs: Vec<Var>,
        op: Arc<dyn CustomOp>,
    },
}

/// Gradient tape for one forward/backward pass over a read-only parameter
/// store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    param_vars: Vec<Option<Var>>,
    consumed: bool,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// Split `shape` around `axis` into (outer, dim, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Index table realizing an axis permutation as a gather.
pub fn permutation_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(shape_err!("invalid permutation {axes:?} for rank {rank}"));
    }
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n = numel(shape);
    let mut index = Vec::with_capacity(n);
    let mut coord = vec![0usize; rank];
    for _ in 0..n {
        index.push(coord.iter().zip(axes).map(|(&c, &a)| c * strides[a]).sum());
        for d in (0..rank).rev() {
            coord[d] += 1;
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    Ok((index, out_shape))
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            param_vars: vec![None; params.len()],
            consumed: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Drop all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.values.clear();
        self.ops.clear();
        self.needs_grad.clear();
        self.param_vars.iter_mut().for_each(|v| *v = None);
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "output of {} op at node {}",
                op_name(&op),
                self.values.len()
            )));
        }
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Ok(Var(self.values.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.params.get(id).clone();
        self.values.push(t);
        self.ops.push(Op::Param(id));
        self.needs_grad.push(true);
        let v = Var(self.values.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s and is broadcast over
    /// the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err!("add: {sb:?} does not broadcast onto {sa:?}"));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let m = vb.len();
        let out: Vec<f64> = va.iter().enumerate().map(|(i, x)| x + vb[i % m]).collect();
        let t = Tensor::from_vec_unchecked(sa.to_vec(), out);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("mul: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_vec_unchecked(self.shape(a).to_vec(), out);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// `a - b` for equal shapes.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("sub: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// `Σ_i c_i · v_i` over scalar (or equally shaped) terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, c) in terms {
            let s = self.scale(v, c)?;
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s)?,
            });
        }
        acc.ok_or_else(|| Error::InvalidArgument("weighted_sum of no terms".into()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: {sa:?} x {sb:?}"));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm(
            View::new(self.value(a).data(), n, k),
            View::new(self.value(b).data(), k, m),
            0.0,
            &mut out,
        );
        let t = Tensor::from_vec_unchecked(vec![n, m], out);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::MatMul(a, b), ng)
    }

    /// `x·W + b` over the last axis of `x`; `W` is `[k, m]`, `b` is `[m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(shape_err!("affine: input {sx:?} with weight {sw:?}"));
        }
        let (k, m) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(shape_err!("affine: bias {:?} for width {m}", self.shape(b)));
            }
        }
        let rows = self.value(x).len() / k;
        let mut out = vec![0.0; rows * m];
        if let Some(b) = b {
            let bias = self.value(b).data();
            out.chunks_exact_mut(m).for_each(|r| r.copy_from_slice(bias));
        }
        gemm(
            View::new(self.value(x).data(), rows, k),
            View::new(self.value(w).data(), k, m),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = m;
        let t = Tensor::from_vec_unchecked(shape, out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(t, Op::Affine { x, w, b }, ng)
    }

    /// Batched product of `[B, n, k]` with `[B, k, m]` (or `[B, m, k]` when
    /// `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err!("bmm: {sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let (batch, n, k) = (sa[0], sa[1], sa[2]);
        let m = if trans_b { sb[1] } else { sb[2] };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * n * m];
        for i in 0..batch {
            let av = View::new(&da[i * n * k..(i + 1) * n * k], n, k);
            let bslice = &db[i * k * m..(i + 1) * k * m];
            let bv = if trans_b {
                View::new(bslice, m, k).t()
            } else {
                View::new(bslice, k, m)
            };
            gemm(av, bv, 0.0, &mut out[i * n * m..(i + 1) * n * m]);
        }
        let t = Tensor::from_vec_unchecked(vec![batch, n, m], out);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Bmm { a, b, trans_b }, ng)
    }

    /// Row-wise softmax over the last axis, stabilised by max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err!("softmax of a scalar"))?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec_unchecked(shape, out), Op::Softmax(a), ng)
    }

    /// Layer normalisation over the last axis with affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err!("layer_norm of a scalar"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err!(
                "layer_norm: gain {:?} / bias {:?} for width {d}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            Tensor::from_vec_unchecked(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// `out[i] = a[index[i]]` (flat indices), reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if numel(shape) != index.len() {
            return Err(shape_err!(
                "gather: {} indices for shape {shape:?}",
                index.len()
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err!("gather: index {bad} out of range {}", src.len()));
        }
        let out = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::from_vec_unchecked(shape.to_vec(), out);
        let ng = self.ng(a);
        self.push(t, Op::Gather { a, index }, ng)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (index, shape) = permutation_index(self.shape(a), axes)?;
        self.gather(a, Arc::new(index), &shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {axis} for rank {}", first.len()));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == first.len();
            if !same_rank
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(shape_err!("concat: {s:?} incompatible with {first:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::from_vec_unchecked(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err!("narrow {start}+{len} on axis {axis} of {shape:?}"));
        }
        let (outer, dim, inner) = axis_extents(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let ng = self.ng(a);
        self.push(Tensor::from_vec_unchecked(s, out), Op::Narrow { a, axis, start }, ng)
    }

    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        if start != self.shape(a)[axis] {
            return Err(shape_err!("split sizes {sizes:?} do not cover axis {axis}"));
        }
        Ok(out)
    }

    /// `sqrt(re² + im² + eps²)` for a `[2, ...]` (real, imaginary) tensor.
    pub fn two_channel_magnitude(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || shape[0] != 2 {
            return Err(shape_err!("magnitude expects [2, ...], got {shape:?}"));
        }
        let d = self.value(a).data();
        let plane = d.len() / 2;
        let e2 = eps * eps;
        let out = (0..plane)
            .map(|i| (d[i] * d[i] + d[plane + i] * d[plane + i] + e2).sqrt())
            .collect();
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec_unchecked(shape[1..].to_vec(), out),
            Op::Magnitude(a),
            ng,
        )
    }

    /// Mean absolute error as a scalar.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("l1_loss: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let s = da.iter().zip(db).map(|(x, y)| (x - y).abs()).sum::<f64>() / da.len() as f64;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(s), Op::L1(a, b), ng)
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| &self.values[v.0]).collect();
        let t = op.forward(&vals)?;
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(
            t,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        )
    }

    /// Propagate gradients from a scalar `loss` to every parameter of the
    /// store. Parameters the loss does not reach get zero gradients. A tape
    /// supports a single backward pass until [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut param_grads: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.needs_grad[i] {
                continue;
            }
            self.backprop(i, g, &mut grads, &mut param_grads)?;
        }
        let out = param_grads
            .into_iter()
            .zip(self.params.ids())
            .map(|(g, id)| {
                let shape = self.params.get(id).shape().to_vec();
                match g {
                    Some(v) => Tensor::from_vec_unchecked(shape, v),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect();
        Ok(Gradients::from_vec(out))
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs_grad[v.0] {
            return None;
        }
        let len = self.values[v.0].len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(
        &self,
        node: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        param_grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        match &self.ops[node] {
            Op::Leaf => {}
            Op::Param(id) => {
                let slot = &mut param_grads[id.0];
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let m = gb.len();
                    for (i, y) in g.iter().enumerate() {
                        gb[i % m] += y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.values[a.0].data(), self.values[b.0].data());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.values[a.0].data(), self.values[b.0].data());
                let gv = View::new(&g, n, m);
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(gv, View::new(vb, k, m).t(), 1.0, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(View::new(va, n, k).t(), gv, 1.0, gb);
                }
            }
            Op::Affine { x, w, b } => {
                let sw = self.shape(*w);
                let (k, m) = (sw[0], sw[1]);
                let rows = g.len() / m;
                let (vx, vw) = (self.values[x.0].data(), self.values[w.0].data());
                let gv = View::new(&g, rows, m);
                if let Some(gx) = self.slot(grads, *x) {
                    gemm(gv, View::new(vw, k, m).t(), 1.0, gx);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    gemm(View::new(vx, rows, k).t(), gv, 1.0, gw);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for row in g.chunks_exact(m) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, n, k) = (sa[0], sa[1], sa[2]);
                let m = if *trans_b { sb[1] } else { sb[2] };
                let (va, vb) = (self.values[a.0].data(), self.values[b.0].data());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..batch {
                        let gv = View::new(&g[i * n * m..(i + 1) * n * m], n, m);
                        let bs = &vb[i * k * m..(i + 1) * k * m];
                        // dA = dC · op(B)^T
                        let bt = if *trans_b {
                            View::new(bs, m, k)
                        } else {
                            View::new(bs, k, m).t()
                        };
                        gemm(gv, bt, 1.0, &mut ga[i * n * k..(i + 1) * n * k]);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..batch {
                        let gv = View::new(&g[i * n * m..(i + 1) * n * m], n, m);
                        let av = View::new(&va[i * n * k..(i + 1) * n * k], n, k);
                        let out = &mut gb[i * k * m..(i + 1) * k * m];
                        if *trans_b {
                            // B is [m, k]: dB = dC^T · A
                            gemm(gv.t(), av, 1.0, out);
                        } else {
                            gemm(av.t(), gv, 1.0, out);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.values[node].data();
                let d = *self.shape(*a).last().unwrap();
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..y.len() / d {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            ga[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gain)[0];
                let gvals = self.values[gain.0].data();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * d;
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..d {
                            let dh = g[base + j] * gvals[j];
                            m1 += dh;
                            m2 += dh * xhat[base + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = g[base + j] * gvals[j];
                            gx[base + j] += rs * (dh - m1 - xhat[base + j] * m2);
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    for (i, v) in g.iter().enumerate() {
                        gg[i % d] += v * xhat[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % d] += v;
                    }
                }
            }
            Op::Gelu(a) => {
                let xs = self.values[a.0].data();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(xs[i]);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Gather { a, index } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (j, &i) in index.iter().enumerate() {
                        ga[i] += g[j];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.shape(Var(node));
                let (outer, total, inner) = axis_extents(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..][..len];
                            gp[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let in_shape = self.shape(*a);
                let (outer, dim, inner) = axis_extents(in_shape, *axis);
                let len = self.shape(Var(node))[*axis] * inner;
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        ga[base..base + len]
                            .iter_mut()
                            .zip(&g[o * len..(o + 1) * len])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Magnitude(a) => {
                let xs = self.values[a.0].data();
                let mag = self.values[node].data();
                let plane = mag.len();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..plane {
                        ga[i] += g[i] * xs[i] / mag[i];
                        ga[plane + i] += g[i] * xs[plane + i] / mag[i];
                    }
                }
            }
            Op::L1(a, b) => {
                let (va, vb) = (self.values[a.0].data(), self.values[b.0].data());
                let scale = g[0] / va.len() as f64;
                let sign = |x: f64| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..va.len() {
                        ga[i] += scale * sign(va[i] - vb[i]);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..va.len() {
                        gb[i] -= scale * sign(va[i] - vb[i]);
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.values[v.0]).collect();
                let out = &self.values[node];
                let gt = Tensor::from_vec_unchecked(out.shape().to_vec(), g);
                let contribs = op.backward(&vals, out, &gt)?;
                if contribs.len() != inputs.len() {
                    return Err(Error::Tape(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        contribs.len(),
                        inputs.len()
                    )));
                }
                for (&v, c) in inputs.iter().zip(contribs) {
                    let Some(c) = c else { continue };
                    if c.shape() != self.shape(v) {
                        return Err(Error::Tape(format!(
                            "custom op {} gradient shape {:?} != input shape {:?}",
                            op.name(),
                            c.shape(),
                            self.shape(v)
                        )));
                    }
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(c.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &str {
    match op {
        Op::Leaf => "constant",
        Op::Param(_) => "param",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
        Op::MatMul(..) => "matmul",
        Op::Affine { .. } => "affine",
        Op::Bmm { .. } => "bmm",
        Op::Softmax(_) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(_) => "gelu",
        Op::Reshape(_) => "reshape",
        Op::Gather { .. } => "gather",
        Op::Concat { .. } => "concat",
        Op::Narrow { .. } => "narrow",
        Op::Magnitude(_) => "magnitude",
        Op::L1(..) => "l1_loss",
        Op::Custom { op, .. } => op.name(),
    }
}
