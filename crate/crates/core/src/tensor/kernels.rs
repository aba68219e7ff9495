//! Dense computational kernels behind the tape primitives.
//!
//! Everything here is deterministic: parallel loops split over output
//! locations only, and every reduction runs in a fixed sequential order
//! inside its output element.

use rayon::prelude::*;

use super::Element;

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `C[m,n] = A·B` with optional transposes; `A` is `[m,k]` (or `[k,m]`
/// when `ta`), `B` is `[k,n]` (or `[n,k]` when `tb`).
pub fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, r) in row.iter_mut().enumerate() {
            let mut s = E::zero();
            for p in 0..k {
                let av = if ta { a[p * m + i] } else { a[i * k + p] };
                let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                s = s + av * bv;
            }
            *r = s;
        }
    });
    out
}

/// Batched matmul over leading dimension: `A [B,m,k] × B [B,k,n]`,
/// with per-batch transposes (`ta`: A stored `[B,k,m]`, `tb`: B stored
/// `[B,n,k]`).
pub fn bmm<E: Element>(
    a: &[E],
    b: &[E],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<E> {
    let mut out = vec![E::zero(); batch * m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(idx, row)| {
        let bi = idx / m;
        let i = idx % m;
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * k * n..(bi + 1) * k * n];
        for (j, r) in row.iter_mut().enumerate() {
            let mut s = E::zero();
            for p in 0..k {
                let av = if ta { ab[p * m + i] } else { ab[i * k + p] };
                let bv = if tb { bb[j * k + p] } else { bb[p * n + j] };
                s = s + av * bv;
            }
            *r = s;
        }
    });
    out
}

pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub groups: usize,
}

impl ConvDims {
    fn pad(&self) -> isize {
        (self.k as isize - 1) / 2
    }
    fn ch_per_group(&self) -> usize {
        self.in_ch / self.groups
    }
    fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }
}

/// Stride-1 same-padded 2-D convolution (cross-correlation), grouped.
/// `x [N,Cin,H,W]`, `w [Cout, Cin/groups, k, k]` → `[N,Cout,H,W]`.
pub fn conv2d<E: Element>(x: &[E], w: &[E], bias: Option<&[E]>, d: &ConvDims) -> Vec<E> {
    let (h, wd, k) = (d.h, d.w, d.k);
    let p = d.pad();
    let cpg = d.ch_per_group();
    let opg = d.out_per_group();
    let mut out = vec![E::zero(); d.batch * d.out_ch * h * wd];
    out.par_chunks_mut(h * wd).enumerate().for_each(|(idx, plane)| {
        let n = idx / d.out_ch;
        let co = idx % d.out_ch;
        let g = co / opg;
        let b0 = bias.map(|b| b[co]).unwrap_or_else(E::zero);
        for r in 0..h {
            for c in 0..wd {
                let mut s = b0;
                for ci in 0..cpg {
                    let xin = &x[(n * d.in_ch + g * cpg + ci) * h * wd..];
                    let wk = &w[(co * cpg + ci) * k * k..];
                    for dy in 0..k {
                        let rr = r as isize + dy as isize - p;
                        if rr < 0 || rr >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let cc = c as isize + dx as isize - p;
                            if cc < 0 || cc >= wd as isize {
                                continue;
                            }
                            s = s + xin[rr as usize * wd + cc as usize] * wk[dy * k + dx];
                        }
                    }
                }
                plane[r * wd + c] = s;
            }
        }
    });
    out
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub fn conv2d_backward<E: Element>(
    g: &[E],
    x: &[E],
    w: &[E],
    has_bias: bool,
    d: &ConvDims,
) -> (Vec<E>, Vec<E>, Option<Vec<E>>) {
    let (h, wd, k) = (d.h, d.w, d.k);
    let p = d.pad();
    let cpg = d.ch_per_group();
    let opg = d.out_per_group();

    let mut gx = vec![E::zero(); x.len()];
    gx.par_chunks_mut(h * wd).enumerate().for_each(|(idx, plane)| {
        let n = idx / d.in_ch;
        let ci = idx % d.in_ch;
        let grp = ci / cpg;
        let ci_local = ci % cpg;
        for u in 0..h {
            for v in 0..wd {
                let mut s = E::zero();
                for co_local in 0..opg {
                    let co = grp * opg + co_local;
                    let gout = &g[(n * d.out_ch + co) * h * wd..];
                    let wk = &w[(co * cpg + ci_local) * k * k..];
                    for dy in 0..k {
                        let r = u as isize - dy as isize + p;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let c = v as isize - dx as isize + p;
                            if c < 0 || c >= wd as isize {
                                continue;
                            }
                            s = s + gout[r as usize * wd + c as usize] * wk[dy * k + dx];
                        }
                    }
                }
                plane[u * wd + v] = s;
            }
        }
    });

    let mut gw = vec![E::zero(); w.len()];
    gw.par_chunks_mut(cpg * k * k).enumerate().for_each(|(co, wslab)| {
        let grp = co / opg;
        for ci in 0..cpg {
            for dy in 0..k {
                for dx in 0..k {
                    let mut s = E::zero();
                    for n in 0..d.batch {
                        let gout = &g[(n * d.out_ch + co) * h * wd..];
                        let xin = &x[(n * d.in_ch + grp * cpg + ci) * h * wd..];
                        for r in 0..h {
                            let rr = r as isize + dy as isize - p;
                            if rr < 0 || rr >= h as isize {
                                continue;
                            }
                            for c in 0..wd {
                                let cc = c as isize + dx as isize - p;
                                if cc < 0 || cc >= wd as isize {
                                    continue;
                                }
                                s = s + gout[r * wd + c] * xin[rr as usize * wd + cc as usize];
                            }
                        }
                    }
                    wslab[(ci * k + dy) * k + dx] = s;
                }
            }
        }
    });

    let gb = if has_bias {
        let mut gb = vec![E::zero(); d.out_ch];
        for n in 0..d.batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                let gout = &g[(n * d.out_ch + co) * h * wd..][..h * wd];
                for &v in gout {
                    *acc = *acc + v;
                }
            }
        }
        Some(gb)
    } else {
        None
    };

    (gx, gw, gb)
}

/// Numerically stable softmax over contiguous rows of length `d`.
pub fn softmax_rows<E: Element>(x: &[E], d: usize) -> Vec<E> {
    let mut out = vec![E::zero(); x.len()];
    out.par_chunks_mut(d).zip(x.par_chunks(d)).for_each(|(o, row)| {
        let mut m = row[0];
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut s = E::zero();
        for (oi, &v) in o.iter_mut().zip(row) {
            let e = (v - m).exp();
            *oi = e;
            s = s + e;
        }
        for oi in o.iter_mut() {
            *oi = *oi / s;
        }
    });
    out
}

pub fn softmax_backward<E: Element>(g: &[E], y: &[E], d: usize) -> Vec<E> {
    let mut gx = vec![E::zero(); g.len()];
    gx.par_chunks_mut(d)
        .zip(g.par_chunks(d).zip(y.par_chunks(d)))
        .for_each(|(o, (gr, yr))| {
            let mut dot = E::zero();
            for (gi, yi) in gr.iter().zip(yr) {
                dot = dot + *gi * *yi;
            }
            for ((oi, gi), yi) in o.iter_mut().zip(gr).zip(yr) {
                *oi = *yi * (*gi - dot);
            }
        });
    gx
}

/// Per-slice statistics saved for normalization backward passes.
pub struct NormStats<E> {
    pub mean: Vec<E>,
    pub inv_std: Vec<E>,
}

/// Layer norm over trailing dimension `c`; population variance.
pub fn layer_norm<E: Element>(x: &[E], c: usize, gamma: &[E], beta: &[E], eps: f64) -> (Vec<E>, NormStats<E>) {
    let rows = x.len() / c;
    let mut out = vec![E::zero(); x.len()];
    let mut mean = vec![E::zero(); rows];
    let mut inv_std = vec![E::zero(); rows];
    let eps = E::from_f64(eps);
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mut m = E::zero();
        for &v in row {
            m = m + v;
        }
        m = m / E::from_f64(c as f64);
        let mut var = E::zero();
        for &v in row {
            let d = v - m;
            var = var + d * d;
        }
        var = var / E::from_f64(c as f64);
        let inv = (var + eps).sqrt().recip();
        mean[r] = m;
        inv_std[r] = inv;
        let o = &mut out[r * c..(r + 1) * c];
        for i in 0..c {
            o[i] = (row[i] - m) * inv * gamma[i] + beta[i];
        }
    }
    (out, NormStats { mean, inv_std })
}

pub fn layer_norm_backward<E: Element>(
    g: &[E],
    x: &[E],
    c: usize,
    gamma: &[E],
    stats: &NormStats<E>,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let rows = x.len() / c;
    let mut gx = vec![E::zero(); x.len()];
    let mut ggamma = vec![E::zero(); c];
    let mut gbeta = vec![E::zero(); c];
    let cn = E::from_f64(c as f64);
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let gr = &g[r * c..(r + 1) * c];
        let m = stats.mean[r];
        let inv = stats.inv_std[r];
        let mut sum_dxhat = E::zero();
        let mut sum_dxhat_xhat = E::zero();
        for i in 0..c {
            let xhat = (row[i] - m) * inv;
            let dxhat = gr[i] * gamma[i];
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
            ggamma[i] = ggamma[i] + gr[i] * xhat;
            gbeta[i] = gbeta[i] + gr[i];
        }
        let o = &mut gx[r * c..(r + 1) * c];
        for i in 0..c {
            let xhat = (row[i] - m) * inv;
            let dxhat = gr[i] * gamma[i];
            o[i] = inv * (dxhat - sum_dxhat / cn - xhat * sum_dxhat_xhat / cn);
        }
    }
    (gx, ggamma, gbeta)
}

/// Batch norm over `[N,C,H,W]` with per-channel statistics across
/// `N·H·W`. Returns `(y, mean, var, stats)`; variance is population.
pub fn batch_norm_train<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[E],
    beta: &[E],
    eps: f64,
) -> (Vec<E>, Vec<E>, Vec<E>, NormStats<E>) {
    let count = E::from_f64((n * hw) as f64);
    let epse = E::from_f64(eps);
    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for ch in 0..c {
        let mut m = E::zero();
        for ni in 0..n {
            let plane = &x[(ni * c + ch) * hw..][..hw];
            for &v in plane {
                m = m + v;
            }
        }
        m = m / count;
        let mut vv = E::zero();
        for ni in 0..n {
            let plane = &x[(ni * c + ch) * hw..][..hw];
            for &v in plane {
                let d = v - m;
                vv = vv + d * d;
            }
        }
        mean[ch] = m;
        var[ch] = vv / count;
    }
    let inv_std: Vec<E> = var.iter().map(|&v| (v + epse).sqrt().recip()).collect();
    let mut out = vec![E::zero(); x.len()];
    out.par_chunks_mut(hw).enumerate().for_each(|(idx, plane)| {
        let ch = idx % c;
        let xin = &x[idx * hw..][..hw];
        let (m, inv) = (mean[ch], inv_std[ch]);
        for (o, &v) in plane.iter_mut().zip(xin) {
            *o = (v - m) * inv * gamma[ch] + beta[ch];
        }
    });
    let stats = NormStats { mean: mean.clone(), inv_std };
    (out, mean, var, stats)
}

/// Backward through train-mode batch norm (statistics depend on x).
pub fn batch_norm_train_backward<E: Element>(
    g: &[E],
    x: &[E],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[E],
    stats: &NormStats<E>,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let count = E::from_f64((n * hw) as f64);
    let mut ggamma = vec![E::zero(); c];
    let mut gbeta = vec![E::zero(); c];
    let mut sum_dxhat = vec![E::zero(); c];
    let mut sum_dxhat_xhat = vec![E::zero(); c];
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * hw;
            let (m, inv) = (stats.mean[ch], stats.inv_std[ch]);
            for i in 0..hw {
                let xhat = (x[base + i] - m) * inv;
                let gv = g[base + i];
                let dxhat = gv * gamma[ch];
                ggamma[ch] = ggamma[ch] + gv * xhat;
                gbeta[ch] = gbeta[ch] + gv;
                sum_dxhat[ch] = sum_dxhat[ch] + dxhat;
                sum_dxhat_xhat[ch] = sum_dxhat_xhat[ch] + dxhat * xhat;
            }
        }
    }
    let mut gx = vec![E::zero(); x.len()];
    gx.par_chunks_mut(hw).enumerate().for_each(|(idx, plane)| {
        let ch = idx % c;
        let base = idx * hw;
        let (m, inv) = (stats.mean[ch], stats.inv_std[ch]);
        for (i, o) in plane.iter_mut().enumerate() {
            let xhat = (x[base + i] - m) * inv;
            let dxhat = g[base + i] * gamma[ch];
            *o = inv * (dxhat - sum_dxhat[ch] / count - xhat * sum_dxhat_xhat[ch] / count);
        }
    });
    (gx, ggamma, gbeta)
}

/// Eval-mode batch norm: fixed statistics, plain per-channel affine.
pub fn batch_norm_eval<E: Element>(
    x: &[E],
    c: usize,
    hw: usize,
    gamma: &[E],
    beta: &[E],
    mean: &[E],
    var: &[E],
    eps: f64,
) -> Vec<E> {
    let epse = E::from_f64(eps);
    let inv: Vec<E> = var.iter().map(|&v| (v + epse).sqrt().recip()).collect();
    let mut out = vec![E::zero(); x.len()];
    out.par_chunks_mut(hw).enumerate().for_each(|(idx, plane)| {
        let ch = idx % c;
        let xin = &x[idx * hw..][..hw];
        for (o, &v) in plane.iter_mut().zip(xin) {
            *o = (v - mean[ch]) * inv[ch] * gamma[ch] + beta[ch];
        }
    });
    out
}

pub fn batch_norm_eval_backward<E: Element>(
    g: &[E],
    x: &[E],
    c: usize,
    hw: usize,
    gamma: &[E],
    mean: &[E],
    var: &[E],
    eps: f64,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let epse = E::from_f64(eps);
    let inv: Vec<E> = var.iter().map(|&v| (v + epse).sqrt().recip()).collect();
    let planes = x.len() / hw;
    let mut gx = vec![E::zero(); x.len()];
    let mut ggamma = vec![E::zero(); c];
    let mut gbeta = vec![E::zero(); c];
    for idx in 0..planes {
        let ch = idx % c;
        let base = idx * hw;
        for i in 0..hw {
            let xhat = (x[base + i] - mean[ch]) * inv[ch];
            gx[base + i] = g[base + i] * gamma[ch] * inv[ch];
            ggamma[ch] = ggamma[ch] + g[base + i] * xhat;
            gbeta[ch] = gbeta[ch] + g[base + i];
        }
    }
    (gx, ggamma, gbeta)
}
