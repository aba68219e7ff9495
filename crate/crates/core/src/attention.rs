//! Windowed multi-head self-attention: partitioning, cyclic shifting,
//! relative position bias, shift masking, and the window-attention
//! complexity estimator.
//!
//! W-MSA and SW-MSA share one code path; a shift of zero rolls by zero and
//! passes no mask, so the unshifted variant is bit-identical to plain
//! window attention by construction.

use crate::error::{Error, Result};
use crate::nn::{Linear, VisitFn, VisitMutFn};
use crate::rng::CounterRng;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Additive mask value for forbidden token pairs. Large enough to zero the
/// softmax weight, finite so gradients stay finite.
pub const MASK_OFF: f64 = -1e9;

/// Regroup `[N,H,W,C]` into non-overlapping M×M windows
/// `[N·(H/M)·(W/M), M², C]`. Window order is row-major over the grid.
pub fn window_partition<'t, E: Element>(x: Var<'t, E>, m: usize) -> Result<Var<'t, E>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("window_partition", format!("need rank-4, got {:?}", s)));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::shape(
            "window_partition",
            format!("window {} must divide H {} and W {}", m, h, w),
        ));
    }
    x.reshape(vec![n, h / m, m, w / m, m, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(vec![n * (h / m) * (w / m), m * m, c])
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse<'t, E: Element>(
    x: Var<'t, E>,
    m: usize,
    n: usize,
    h: usize,
    w: usize,
) -> Result<Var<'t, E>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != m * m {
        return Err(Error::shape("window_reverse", format!("need [win, {}, C], got {:?}", m * m, s)));
    }
    if m == 0 || h % m != 0 || w % m != 0 || s[0] != n * (h / m) * (w / m) {
        return Err(Error::shape(
            "window_reverse",
            format!("{} windows inconsistent with N={} H={} W={} M={}", s[0], n, h, w, m),
        ));
    }
    let c = s[2];
    x.reshape(vec![n, h / m, w / m, m, m, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(vec![n, h, w, c])
}

/// Roll rows and columns by `−s` (the forward shift before SW-MSA); pass a
/// negative `s` to undo. On a 1-D view, `s = 1` sends `[a,b,c,d]` to
/// `[b,c,d,a]`.
pub fn cyclic_shift<'t, E: Element>(x: Var<'t, E>, s: isize) -> Result<Var<'t, E>> {
    x.roll_hw(-s, -s)
}

/// Map from flattened (query, key) position pairs to rows of the
/// relative-bias table: `index[q·M² + k] = (Δr + M−1)·(2M−1) + (Δc + M−1)`.
pub fn relative_index_map(m: usize) -> Vec<usize> {
    let t = m * m;
    let side = 2 * m - 1;
    let mut map = Vec::with_capacity(t * t);
    for q in 0..t {
        let (qr, qc) = (q / m, q % m);
        for k in 0..t {
            let (kr, kc) = (k / m, k % m);
            let dr = qr + m - 1 - kr;
            let dc = qc + m - 1 - kc;
            map.push(dr * side + dc);
        }
    }
    map
}

/// Additive attention mask `[num_windows, M², M²]` for a shifted grid.
/// Tokens whose pre-shift regions differ may not attend to each other.
/// Region ids come from the standard three-slice labeling of the rolled
/// grid: rows `[0, H−M)`, `[H−M, H−s)`, `[H−s, H)` (and the same for
/// columns) partition it into at most nine contiguous blocks.
pub fn build_shift_mask<E: Element>(h: usize, w: usize, m: usize, s: usize) -> Result<Tensor<E>> {
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::shape("build_shift_mask", format!("window {} must divide {}x{}", m, h, w)));
    }
    if s >= m {
        return Err(Error::Config(format!("shift {} must be < window {}", s, m)));
    }
    let (nh, nw) = (h / m, w / m);
    let windows = nh * nw;
    let t = m * m;
    if s == 0 {
        return Ok(Tensor::zeros(vec![windows, t, t]));
    }
    let slice_of = |i: usize, len: usize| -> usize {
        if i < len - m {
            0
        } else if i < len - s {
            1
        } else {
            2
        }
    };
    let mut labels = vec![0usize; h * w];
    for r in 0..h {
        for c in 0..w {
            labels[r * w + c] = slice_of(r, h) * 3 + slice_of(c, w);
        }
    }
    let off = E::from_f64(MASK_OFF);
    let mut mask = vec![E::zero(); windows * t * t];
    for wh in 0..nh {
        for ww in 0..nw {
            let win = wh * nw + ww;
            let label_at = |p: usize| labels[(wh * m + p / m) * w + ww * m + p % m];
            for i in 0..t {
                for j in 0..t {
                    if label_at(i) != label_at(j) {
                        mask[(win * t + i) * t + j] = off;
                    }
                }
            }
        }
    }
    Tensor::new(vec![windows, t, t], mask)
}

/// Attention-core cost of one W-MSA pass over an `h×w` grid of
/// C-dimensional tokens with window M: `4hwC² + 2M²hwC`. Counts only the
/// QKV/projection and score terms of the formula; softmax is excluded.
pub fn wmsa_complexity(h: u128, w: u128, c: u128, m: u128) -> u128 {
    4 * h * w * c * c + 2 * m * m * h * w * c
}

/// Multi-head self-attention within fixed windows, with a learned relative
/// position bias per head. Input and output are `[num_win, M², C]`.
pub struct WindowAttention<E: Element> {
    pub qkv: Linear<E>,
    pub proj: Linear<E>,
    pub bias_table: Tensor<E>,
    index_map: Vec<usize>,
    pub dim: usize,
    pub heads: usize,
    pub m: usize,
}

impl<E: Element> WindowAttention<E> {
    pub fn new(base: &CounterRng, name: &str, dim: usize, heads: usize, m: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention {}: dim {} not divisible by heads {}",
                name, dim, heads
            )));
        }
        let side = 2 * m - 1;
        let mut tr = base.derive_named(&format!("{}.bias_table", name));
        Ok(WindowAttention {
            qkv: Linear::new(base, &format!("{}.qkv", name), dim, 3 * dim, true),
            proj: Linear::new(base, &format!("{}.proj", name), dim, dim, true),
            bias_table: Tensor::trunc_normal(vec![side * side, heads], 0.02, &mut tr),
            index_map: relative_index_map(m),
            dim,
            heads,
            m,
        })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<E>,
        x: Var<'t, E>,
        mask: Option<&Tensor<E>>,
    ) -> Result<Var<'t, E>> {
        Ok(self.forward_with_weights(tape, x, mask)?.0)
    }

    /// Forward pass that also returns the post-softmax attention weights
    /// `[num_win·heads, M², M²]` for weight-level assertions.
    pub fn forward_with_weights<'t>(
        &self,
        tape: &'t Tape<E>,
        x: Var<'t, E>,
        mask: Option<&Tensor<E>>,
    ) -> Result<(Var<'t, E>, Var<'t, E>)> {
        let s = x.shape();
        let t = self.m * self.m;
        if s.len() != 3 || s[1] != t || s[2] != self.dim {
            return Err(Error::shape(
                "window_attention",
                format!("need [win, {}, {}], got {:?}", t, self.dim, s),
            ));
        }
        let win = s[0];
        let (h, d) = (self.heads, self.dim / self.heads);
        let per_head = |v: Var<'t, E>| -> Result<Var<'t, E>> {
            v.reshape(vec![win, t, h, d])?.permute(&[0, 2, 1, 3])?.reshape(vec![win * h, t, d])
        };

        let qkv = self.qkv.forward(tape, x)?;
        let q = per_head(qkv.narrow(2, 0, self.dim)?)?;
        let k = per_head(qkv.narrow(2, self.dim, self.dim)?)?;
        let v = per_head(qkv.narrow(2, 2 * self.dim, self.dim)?)?;

        let mut attn = q.bmm(k, true)?.scale(1.0 / (d as f64).sqrt())?;
        let bias = tape
            .param(&self.bias_table)?
            .gather_rows(&self.index_map)?
            .reshape(vec![t, t, h])?
            .permute(&[2, 0, 1])?;
        attn = attn.add_broadcast_batch(bias)?;
        if let Some(mask) = mask {
            attn = attn.add_window_mask(mask, h)?;
        }
        let weights = attn.softmax_last()?;

        let out = weights
            .bmm(v, false)?
            .reshape(vec![win, h, t, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(vec![win, t, self.dim])?;
        Ok((self.proj.forward(tape, out)?, weights))
    }

    pub fn visit(&self, prefix: &str, f: &mut VisitFn<'_, E>) {
        self.qkv.visit(&format!("{}.qkv", prefix), f);
        self.proj.visit(&format!("{}.proj", prefix), f);
        f(&format!("{}.bias_table", prefix), &self.bias_table, true);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, E>) {
        self.qkv.visit_mut(&format!("{}.qkv", prefix), f);
        self.proj.visit_mut(&format!("{}.proj", prefix), f);
        f(&format!("{}.bias_table", prefix), &mut self.bias_table, true);
    }
}

/// Straight-line reference for window attention, used by tests to
/// cross-check the tape implementation. Plain nested loops over raw
/// slices; `mask` is `[nw, M², M²]` and window `i` uses entry `i % nw`.
#[allow(clippy::too_many_arguments)]
pub fn reference_window_attention(
    x: &[f64],
    windows: usize,
    m: usize,
    dim: usize,
    heads: usize,
    qkv_w: &[f64],
    qkv_b: &[f64],
    proj_w: &[f64],
    proj_b: &[f64],
    bias_table: &[f64],
    mask: Option<&[f64]>,
    mask_windows: usize,
) -> Vec<f64> {
    let t = m * m;
    let d = dim / heads;
    let index_map = relative_index_map(m);
    let mut out = vec![0.0; windows * t * dim];
    for win in 0..windows {
        let xw = &x[win * t * dim..(win + 1) * t * dim];
        // projections
        let project = |row0: usize, tok: usize, o: usize| -> f64 {
            let mut s = qkv_b[row0 + o];
            for i in 0..dim {
                s += xw[tok * dim + i] * qkv_w[(row0 + o) * dim + i];
            }
            s
        };
        let mut attended = vec![0.0; t * dim];
        for head in 0..heads {
            let mut weights = vec![0.0; t * t];
            for qi in 0..t {
                for kj in 0..t {
                    let mut score = 0.0;
                    for a in 0..d {
                        score += project(0, qi, head * d + a) * project(dim, kj, head * d + a);
                    }
                    score /= (d as f64).sqrt();
                    score += bias_table[index_map[qi * t + kj] * heads + head];
                    if let Some(mask) = mask {
                        score += mask[((win % mask_windows) * t + qi) * t + kj];
                    }
                    weights[qi * t + kj] = score;
                }
                // softmax over keys
                let row = &mut weights[qi * t..(qi + 1) * t];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            for qi in 0..t {
                for a in 0..d {
                    let mut s = 0.0;
                    for kj in 0..t {
                        s += weights[qi * t + kj] * project(2 * dim, kj, head * d + a);
                    }
                    attended[qi * dim + head * d + a] = s;
                }
            }
        }
        for tok in 0..t {
            for o in 0..dim {
                let mut s = proj_b[o];
                for i in 0..dim {
                    s += attended[tok * dim + i] * proj_w[o * dim + i];
                }
                out[(win * t + tok) * dim + o] = s;
            }
        }
    }
    out
}
