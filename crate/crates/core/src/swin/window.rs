//! Token grids, window partitioning, cyclic shifts and the shifted-window
//! attention mask.
//!
//! Windows are enumerated row-major over the grid and tokens row-major within
//! each window. A shift `s` rolls the grid by `(-s, -s)` before partitioning.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::error::{shape_err, Result};

/// Additive logit penalty for token pairs that must not attend to each other.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowSpec {
    pub window: usize,
    pub shift: usize,
}

impl WindowSpec {
    /// Plain window attention.
    pub fn regular(window: usize) -> Self {
        Self { window, shift: 0 }
    }

    /// Shifted window attention with `shift = floor(window / 2)`.
    pub fn shifted(window: usize) -> Self {
        Self {
            window,
            shift: window / 2,
        }
    }

    /// The window actually used on a `rows × cols` grid: a grid no larger
    /// than the window is covered by a single unshifted window.
    pub fn fit(self, rows: usize, cols: usize) -> Result<WindowSpec> {
        let side = rows.min(cols);
        let spec = if side <= self.window {
            WindowSpec {
                window: side,
                shift: 0,
            }
        } else {
            self
        };
        if spec.window == 0 || rows % spec.window != 0 || cols % spec.window != 0 {
            return Err(shape_err!(
                "{rows}x{cols} token grid is not divisible by window {}",
                spec.window
            ));
        }
        if spec.shift >= spec.window.max(1) && spec.shift != 0 {
            return Err(shape_err!("shift {} must be < window {}", spec.shift, spec.window));
        }
        Ok(spec)
    }
}

/// `rows × cols` grid of `dim`-wide tokens, stored `[rows·cols, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub tokens: Tensor,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, tokens: Tensor) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 2 || s[0] != rows * cols {
            return Err(shape_err!("tokens {s:?} do not form a {rows}x{cols} grid"));
        }
        Ok(Self {
            rows,
            cols,
            dim: s[1],
            tokens,
        })
    }
}

/// For each (window, position) slot, the grid token it reads, after rolling
/// the grid by `(-shift, -shift)`.
pub fn window_index(rows: usize, cols: usize, window: usize, shift: usize) -> Vec<usize> {
    let (wr, wc) = (rows / window, cols / window);
    let mut out = Vec::with_capacity(rows * cols);
    for bi in 0..wr {
        for bj in 0..wc {
            for i in 0..window {
                for j in 0..window {
                    let r = (bi * window + i + shift) % rows;
                    let c = (bj * window + j + shift) % cols;
                    out.push(r * cols + c);
                }
            }
        }
    }
    out
}

fn invert(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (k, &t) in index.iter().enumerate() {
        inv[t] = k;
    }
    inv
}

fn gather_rows(src: &Tensor, index: &[usize], dim: usize) -> Vec<f64> {
    let d = src.data();
    let mut out = Vec::with_capacity(index.len() * dim);
    for &t in index {
        out.extend_from_slice(&d[t * dim..(t + 1) * dim]);
    }
    out
}

/// Split a grid into `[n_windows, window², dim]` windows.
pub fn window_partition(g: &TokenGrid, window: usize) -> Result<Tensor> {
    WindowSpec::regular(window).fit(g.rows, g.cols)?;
    if g.rows % window != 0 || g.cols % window != 0 {
        return Err(shape_err!("grid {}x{} not divisible by {window}", g.rows, g.cols));
    }
    let idx = window_index(g.rows, g.cols, window, 0);
    let nw = (g.rows / window) * (g.cols / window);
    Tensor::new(vec![nw, window * window, g.dim], gather_rows(&g.tokens, &idx, g.dim))
}

/// Inverse of [`window_partition`].
pub fn window_reverse(windows: &Tensor, rows: usize, cols: usize) -> Result<TokenGrid> {
    let s = windows.shape();
    if s.len() != 3 {
        return Err(shape_err!("windows must be rank 3, got {s:?}"));
    }
    let window = (s[1] as f64).sqrt().round() as usize;
    if window * window != s[1] || rows % window != 0 || cols % window != 0 || s[0] * s[1] != rows * cols {
        return Err(shape_err!("windows {s:?} do not tile a {rows}x{cols} grid"));
    }
    let inv = invert(&window_index(rows, cols, window, 0));
    let dim = s[2];
    let flat = windows.reshape(&[rows * cols, dim])?;
    TokenGrid::new(rows, cols, Tensor::new(vec![rows * cols, dim], gather_rows(&flat, &inv, dim))?)
}

/// Roll the grid by `(-shift, -shift)` on the torus.
pub fn cyclic_shift(g: &TokenGrid, shift: isize) -> TokenGrid {
    let (r, c) = (g.rows as isize, g.cols as isize);
    let idx: Vec<usize> = (0..r)
        .flat_map(|i| {
            (0..c).map(move |j| ((i + shift).rem_euclid(r) * c + (j + shift).rem_euclid(c)) as usize)
        })
        .collect();
    let data = gather_rows(&g.tokens, &idx, g.dim);
    TokenGrid {
        rows: g.rows,
        cols: g.cols,
        dim: g.dim,
        tokens: Tensor::new(vec![g.rows * g.cols, g.dim], data).expect("same size"),
    }
}

/// `[n_windows, window², window²]` additive mask for shifted windows: pairs
/// from different pre-shift regions get [`MASK_NEG`].
pub fn shifted_window_mask(rows: usize, cols: usize, window: usize, shift: usize) -> Tensor {
    let region = |x: usize, n: usize| -> usize {
        if x < n - window {
            0
        } else if x < n - shift {
            1
        } else {
            2
        }
    };
    let (wr, wc) = (rows / window, cols / window);
    let m2 = window * window;
    let mut data = Vec::with_capacity(wr * wc * m2 * m2);
    for bi in 0..wr {
        for bj in 0..wc {
            let labels: Vec<usize> = (0..m2)
                .map(|p| {
                    let (r, c) = (bi * window + p / window, bj * window + p % window);
                    region(r, rows) * 3 + region(c, cols)
                })
                .collect();
            for a in 0..m2 {
                for b in 0..m2 {
                    data.push(if labels[a] == labels[b] { 0.0 } else { MASK_NEG });
                }
            }
        }
    }
    Tensor::new(vec![wr * wc, m2, m2], data).expect("consistent mask size")
}

#[derive(Clone, PartialEq, Eq, Hash)]
enum CacheKey {
    Split {
        rows: usize,
        cols: usize,
        spec: WindowSpec,
        dim: usize,
        heads: usize,
    },
    Merge {
        rows: usize,
        cols: usize,
        spec: WindowSpec,
        dim: usize,
        heads: usize,
    },
}

thread_local! {
    static INDEX_CACHE: RefCell<HashMap<CacheKey, Arc<Vec<usize>>>> = RefCell::new(HashMap::new());
    static MASK_CACHE: RefCell<HashMap<(usize, usize, WindowSpec), Tensor>> = RefCell::new(HashMap::new());
}

fn cached(key: CacheKey, build: impl FnOnce() -> Vec<usize>) -> Arc<Vec<usize>> {
    INDEX_CACHE.with(|c| {
        c.borrow_mut()
            .entry(key)
            .or_insert_with(|| Arc::new(build()))
            .clone()
    })
}

/// Gather index taking grid tokens `[T, dim]` to per-head windows
/// `[heads·n_windows, window², dim/heads]`, shift included.
pub(crate) fn head_split_index(rows: usize, cols: usize, spec: WindowSpec, dim: usize, heads: usize) -> Arc<Vec<usize>> {
    cached(
        CacheKey::Split {
            rows,
            cols,
            spec,
            dim,
            heads,
        },
        || {
            let win = window_index(rows, cols, spec.window, spec.shift);
            let hd = dim / heads;
            let t = win.len();
            let mut out = Vec::with_capacity(t * dim);
            for h in 0..heads {
                for &tok in &win {
                    out.extend((0..hd).map(|j| tok * dim + h * hd + j));
                }
            }
            out
        },
    )
}

/// Inverse of [`head_split_index`]: per-head windows back to grid tokens.
pub(crate) fn head_merge_index(rows: usize, cols: usize, spec: WindowSpec, dim: usize, heads: usize) -> Arc<Vec<usize>> {
    cached(
        CacheKey::Merge {
            rows,
            cols,
            spec,
            dim,
            heads,
        },
        || {
            let inv = invert(&window_index(rows, cols, spec.window, spec.shift));
            let hd = dim / heads;
            let t = inv.len();
            let mut out = Vec::with_capacity(t * dim);
            for &k in &inv {
                for f in 0..dim {
                    let (h, j) = (f / hd, f % hd);
                    out.push((h * t + k) * hd + j);
                }
            }
            out
        },
    )
}

pub(crate) fn cached_mask(rows: usize, cols: usize, spec: WindowSpec) -> Tensor {
    MASK_CACHE.with(|c| {
        c.borrow_mut()
            .entry((rows, cols, spec))
            .or_insert_with(|| shifted_window_mask(rows, cols, spec.window, spec.shift))
            .clone()
    })
}
