//! Reverse-mode automatic differentiation over an explicit tape.
//!
//! Every primitive pushes one node holding its output value plus whatever
//! the backward rule needs. Nodes are created in topological order, so the
//! backward pass is a single reverse sweep that visits each node once.
//! Each forward output is scanned for NaN/Inf immediately; a non-finite
//! value is a hard error naming the producing op.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;

use super::kernels::{self, ConvDims, NormStats};
use super::{Element, Tensor};
use crate::error::{Error, Result};
use crate::rng::CounterRng;

use rayon::prelude::*;

/// Below this element count parallel map is not worth the overhead.
const PAR_MIN: usize = 4096;

fn unary_map<E: Element>(x: &[E], f: impl Fn(E) -> E + Sync + Send) -> Vec<E> {
    if x.len() >= PAR_MIN {
        x.par_iter().map(|&v| f(v)).collect()
    } else {
        x.iter().map(|&v| f(v)).collect()
    }
}

fn binary_map<E: Element>(a: &[E], b: &[E], f: impl Fn(E, E) -> E + Sync + Send) -> Vec<E> {
    debug_assert_eq!(a.len(), b.len());
    if a.len() >= PAR_MIN {
        a.par_iter().zip(b.par_iter()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
    }
}

fn ensure_finite<E: Element>(op: &'static str, data: &[E]) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { op, index: i });
        }
    }
    Ok(())
}

/// Physically rearrange `x` (shape `in_shape`) by `perm`; returns data and
/// the permuted shape.
fn permute_data<E: Element>(x: &[E], in_shape: &[usize], perm: &[usize]) -> (Vec<E>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = kernels::strides(in_shape);
    let out_strides = kernels::strides(&out_shape);
    let gather = |o_idx: usize| {
        let mut rem = o_idx;
        let mut i_idx = 0;
        for d in 0..out_shape.len() {
            let c = rem / out_strides[d];
            rem %= out_strides[d];
            i_idx += c * in_strides[perm[d]];
        }
        x[i_idx]
    };
    let out: Vec<E> = if x.len() >= PAR_MIN {
        (0..x.len()).into_par_iter().map(gather).collect()
    } else {
        (0..x.len()).map(gather).collect()
    };
    (out, out_shape)
}

fn roll_hw_data<E: Element>(x: &[E], shape: &[usize], sh: isize, sw: isize) -> Vec<E> {
    let (_n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![E::zero(); x.len()];
    out.par_chunks_mut(w * c).enumerate().for_each(|(idx, row)| {
        let ni = idx / h;
        let hi = idx % h;
        let src_h = (hi as isize - sh).rem_euclid(h as isize) as usize;
        for wi in 0..w {
            let src_w = (wi as isize - sw).rem_euclid(w as isize) as usize;
            let src = ((ni * h + src_h) * w + src_w) * c;
            row[wi * c..(wi + 1) * c].copy_from_slice(&x[src..src + c]);
        }
    });
    out
}

enum Op<E: Element> {
    Leaf { trainable: bool },
    Add(usize, usize),
    AddBias { x: usize, b: usize },
    Mul(usize, usize),
    Scale { x: usize, c: E },
    Matmul { a: usize, b: usize, tb: bool },
    Bmm { a: usize, b: usize, tb: bool },
    Softmax { x: usize },
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    HSwish(usize),
    SumAll(usize),
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Narrow { x: usize, axis: usize, start: usize, len: usize },
    GatherRows { table: usize, index: Vec<usize> },
    Conv2d { x: usize, w: usize, b: Option<usize>, dims: ConvDims },
    BatchNormTrain { x: usize, gamma: usize, beta: usize, stats: NormStats<E> },
    BatchNormEval { x: usize, gamma: usize, beta: usize, mean: Vec<E>, var: Vec<E>, eps: f64 },
    LayerNorm { x: usize, gamma: usize, beta: usize, stats: NormStats<E> },
    Dropout { x: usize, mask: Vec<E> },
    GlobalAvgPool(usize),
    MulChannel { x: usize, s: usize },
    AddBroadcastBatch { x: usize, b: usize },
    AddWindowMask { x: usize },
    RollHw { x: usize, sh: isize, sw: isize },
    PadHw { x: usize, pad_b: usize, pad_r: usize },
    BcePerLabel { z: usize, targets: Vec<E> },
    IndexScalar { x: usize, index: usize },
}

impl<E: Element> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale { .. } => "scale",
            Op::Matmul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Softmax { .. } => "softmax",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::HSwish(..) => "h_swish",
            Op::SumAll(..) => "sum_all",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Narrow { .. } => "narrow",
            Op::GatherRows { .. } => "gather_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNormTrain { .. } => "batch_norm",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::MulChannel { .. } => "mul_channel",
            Op::AddBroadcastBatch { .. } => "add_broadcast_batch",
            Op::AddWindowMask { .. } => "add_window_mask",
            Op::RollHw { .. } => "roll_hw",
            Op::PadHw { .. } => "pad_hw",
            Op::BcePerLabel { .. } => "bce_per_label",
            Op::IndexScalar { .. } => "index_scalar",
        }
    }
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
    /// Populated by `backward` for trainable leaves only.
    grad: Option<Vec<E>>,
}

/// Records one forward pass; owns node values and, after `backward`, the
/// parameter gradients. Build a fresh tape per step.
pub struct Tape<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
    params: RefCell<HashMap<u64, usize>>,
    backward_done: Cell<bool>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> Result<Var<'_, E>> {
        ensure_finite(op.name(), value.as_slice())?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad, grad: None });
        Ok(Var { tape: self, idx: nodes.len() - 1 })
    }

    /// Register a trainable parameter. Registering the same tensor twice
    /// returns the same node, so gradients from multiple uses accumulate.
    pub fn param(&self, t: &Tensor<E>) -> Result<Var<'_, E>> {
        if let Some(&idx) = self.params.borrow().get(&t.id()) {
            return Ok(Var { tape: self, idx });
        }
        let v = self.push_node(t.clone(), Op::Leaf { trainable: true }, true)?;
        self.params.borrow_mut().insert(t.id(), v.idx);
        Ok(v)
    }

    /// Register a non-trainable input or constant.
    pub fn constant(&self, t: &Tensor<E>) -> Result<Var<'_, E>> {
        self.push_node(t.clone(), Op::Leaf { trainable: false }, false)
    }

    /// Gradient of the loss w.r.t. a registered parameter, if `backward`
    /// has run and the parameter participated in the loss.
    pub fn grad(&self, t: &Tensor<E>) -> Option<Tensor<E>> {
        let idx = *self.params.borrow().get(&t.id())?;
        let nodes = self.nodes.borrow();
        nodes[idx]
            .grad
            .as_ref()
            .map(|g| Tensor::new(t.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Reverse sweep from a scalar loss. Errors on a non-scalar loss, on a
    /// second call, and on any non-finite intermediate gradient.
    pub fn backward(&self, loss: Var<'_, E>) -> Result<()> {
        debug_assert!(std::ptr::eq(self, loss.tape), "loss from a different tape");
        if self.backward_done.get() {
            return Err(Error::Numeric("backward already called on this tape".into()));
        }
        self.backward_done.set(true);

        let nodes = self.nodes.borrow();
        if nodes[loss.idx].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", nodes[loss.idx].value.shape()),
            ));
        }

        let mut grads: Vec<Option<Vec<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(vec![E::one()]);
        let mut leaf_grads: Vec<(usize, Vec<E>)> = Vec::new();

        for idx in (0..=loss.idx).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            ensure_finite(node.op.name(), &g)?;

            // Accumulate `contrib` into the gradient slot of parent `p`.
            macro_rules! acc {
                ($p:expr, $len:expr, $f:expr) => {
                    if nodes[$p].needs_grad {
                        let slot = grads[$p].get_or_insert_with(|| vec![E::zero(); $len]);
                        #[allow(clippy::redundant_closure_call)]
                        ($f)(slot.as_mut_slice());
                    }
                };
            }

            match &node.op {
                Op::Leaf { trainable } => {
                    if *trainable {
                        leaf_grads.push((idx, g));
                    }
                }
                Op::Add(a, b) => {
                    acc!(*a, g.len(), |s: &mut [E]| for (o, &v) in s.iter_mut().zip(&g) {
                        *o = *o + v;
                    });
                    acc!(*b, g.len(), |s: &mut [E]| for (o, &v) in s.iter_mut().zip(&g) {
                        *o = *o + v;
                    });
                }
                Op::AddBias { x, b } => {
                    acc!(*x, g.len(), |s: &mut [E]| for (o, &v) in s.iter_mut().zip(&g) {
                        *o = *o + v;
                    });
                    let c = nodes[*b].value.numel();
                    acc!(*b, c, |s: &mut [E]| for (i, &v) in g.iter().enumerate() {
                        s[i % c] = s[i % c] + v;
                    });
                }
                Op::Mul(a, b) => {
                    let av = nodes[*a].value.as_slice();
                    let bv = nodes[*b].value.as_slice();
                    acc!(*a, g.len(), |s: &mut [E]| for i in 0..g.len() {
                        s[i] = s[i] + g[i] * bv[i];
                    });
                    acc!(*b, g.len(), |s: &mut [E]| for i in 0..g.len() {
                        s[i] = s[i] + g[i] * av[i];
                    });
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    acc!(*x, g.len(), |s: &mut [E]| for (o, &v) in s.iter_mut().zip(&g) {
                        *o = *o + v * c;
                    });
                }
                Op::Matmul { a, b, tb } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let m = av.shape()[0];
                    let k = av.shape()[1];
                    let n = node.value.shape()[1];
                    if nodes[*a].needs_grad {
                        let ga = kernels::matmul(&g, bv.as_slice(), m, n, k, false, !*tb);
                        acc!(*a, ga.len(), |s: &mut [E]| for i in 0..ga.len() {
                            s[i] = s[i] + ga[i];
                        });
                    }
                    if nodes[*b].needs_grad {
                        let gb = if *tb {
                            kernels::matmul(&g, av.as_slice(), n, m, k, true, false)
                        } else {
                            kernels::matmul(av.as_slice(), &g, k, m, n, true, false)
                        };
                        acc!(*b, gb.len(), |s: &mut [E]| for i in 0..gb.len() {
                            s[i] = s[i] + gb[i];
                        });
                    }
                }
                Op::Bmm { a, b, tb } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let batch = av.shape()[0];
                    let m = av.shape()[1];
                    let k = av.shape()[2];
                    let n = node.value.shape()[2];
                    if nodes[*a].needs_grad {
                        let ga = kernels::bmm(&g, bv.as_slice(), batch, m, n, k, false, !*tb);
                        acc!(*a, ga.len(), |s: &mut [E]| for i in 0..ga.len() {
                            s[i] = s[i] + ga[i];
                        });
                    }
                    if nodes[*b].needs_grad {
                        let gb = if *tb {
                            kernels::bmm(&g, av.as_slice(), batch, n, m, k, true, false)
                        } else {
                            kernels::bmm(av.as_slice(), &g, batch, k, m, n, true, false)
                        };
                        acc!(*b, gb.len(), |s: &mut [E]| for i in 0..gb.len() {
                            s[i] = s[i] + gb[i];
                        });
                    }
                }
                Op::Softmax { x } => {
                    let y = node.value.as_slice();
                    let d = *node.value.shape().last().unwrap();
                    let gx = kernels::softmax_backward(&g, y, d);
                    acc!(*x, gx.len(), |s: &mut [E]| for i in 0..gx.len() {
                        s[i] = s[i] + gx[i];
                    });
                }
                Op::Relu(x) => {
                    let xv = nodes[*x].value.as_slice();
                    acc!(*x, g.len(), |s: &mut [E]| for i in 0..g.len() {
                        if xv[i] > E::zero() {
                            s[i] = s[i] + g[i];
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = nodes[*x].value.as_slice();
                    let sc = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
                    let a3 = E::from_f64(0.044715);
                    let half = E::from_f64(0.5);
                    let three = E::from_f64(3.0);
                    acc!(*x, g.len(), |s: &mut [E]| for i in 0..g.len() {
                        let v = xv[i];
                        let u = sc * (v + a3 * v * v * v);
                        let t = u.tanh();
                        let d = half * (E::one() + t)
                            + half * v * (E::one() - t * t) * sc * (E::one() + three * a3 * v * v);
                        s[i] = s[i] + g[i] * d;
                    });
                }
                Op::Sigmoid(x) => {
                    let y = node.value.as_slice();
                    acc!(*x, g.len(), |s: &mut [E]| for i in 0..g.len() {
                        s[i] = s[i] + g[i] * y[i] * (E::one() - y[i]);
                    });
                }
                Op::HSwish(x) => {
                    let xv = nodes[*x].value.as_slice();
                    let three = E::from_f64(3.0);
                    let six = E::from_f64(6.0);
                    let two = E::from_f64(2.0);
                    acc!(*x, g.len(), |s: &mut [E]| for i in 0..g.len() {
                        let v = xv[i];
                        let d = if v <= -three {
                            E::zero()
                        } else if v >= three {
                            E::one()
                        } else {
                            (two * v + three) / six
                        };
                        s[i] = s[i] + g[i] * d;
                    });
                }
                Op::SumAll(x) => {
                    let n = nodes[*x].value.numel();
                    let gv = g[0];
                    acc!(*x, n, |s: &mut [E]| for o in s.iter_mut() {
                        *o = *o + gv;
                    });
                }
                Op::Reshape(x) => {
                    acc!(*x, g.len(), |s: &mut [E]| for (o, &v) in s.iter_mut().zip(&g) {
                        *o = *o + v;
                    });
                }
                Op::Permute { x, perm } => {
                    let mut inv = vec![0usize; perm.len()];
                    for (d, &p) in perm.iter().enumerate() {
                        inv[p] = d;
                    }
                    let (gx, _) = permute_data(&g, node.value.shape(), &inv);
                    acc!(*x, gx.len(), |s: &mut [E]| for i in 0..gx.len() {
                        s[i] = s[i] + gx[i];
                    });
                }
                Op::Narrow { x, axis, start, len } => {
                    let in_shape = nodes[*x].value.shape();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let mid = in_shape[*axis];
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    acc!(*x, nodes[*x].value.numel(), |s: &mut [E]| {
                        for o in 0..outer {
                            for j in 0..*len {
                                let dst = (o * mid + start + j) * inner;
                                let src = (o * len + j) * inner;
                                for i in 0..inner {
                                    s[dst + i] = s[dst + i] + g[src + i];
                                }
                            }
                        }
                    });
                }
                Op::GatherRows { table, index } => {
                    let cols = nodes[*table].value.shape()[1];
                    acc!(*table, nodes[*table].value.numel(), |s: &mut [E]| {
                        for (k, &r) in index.iter().enumerate() {
                            for i in 0..cols {
                                s[r * cols + i] = s[r * cols + i] + g[k * cols + i];
                            }
                        }
                    });
                }
                Op::Conv2d { x, w, b, dims } => {
                    let xv = nodes[*x].value.as_slice();
                    let wv = nodes[*w].value.as_slice();
                    let (gx, gw, gb) = kernels::conv2d_backward(&g, xv, wv, b.is_some(), dims);
                    acc!(*x, gx.len(), |s: &mut [E]| for i in 0..gx.len() {
                        s[i] = s[i] + gx[i];
                    });
                    acc!(*w, gw.len(), |s: &mut [E]| for i in 0..gw.len() {
                        s[i] = s[i] + gw[i];
                    });
                    if let (Some(bi), Some(gb)) = (b, gb) {
                        acc!(*bi, gb.len(), |s: &mut [E]| for i in 0..gb.len() {
                            s[i] = s[i] + gb[i];
                        });
                    }
                }
                Op::BatchNormTrain { x, gamma, beta, stats } => {
                    let xv = &nodes[*x].value;
                    let sh = xv.shape();
                    let (n, c, hw) = (sh[0], sh[1], sh[2] * sh[3]);
                    let gm = nodes[*gamma].value.as_slice();
                    let (gx, gg, gb) = kernels::batch_norm_train_backward(&g, xv.as_slice(), n, c, hw, gm, stats);
                    acc!(*x, gx.len(), |s: &mut [E]| for i in 0..gx.len() {
                        s[i] = s[i] + gx[i];
                    });
                    acc!(*gamma, gg.len(), |s: &mut [E]| for i in 0..gg.len() {
                        s[i] = s[i] + gg[i];
                    });
                    acc!(*beta, gb.len(), |s: &mut [E]| for i in 0..gb.len() {
                        s[i] = s[i] + gb[i];
                    });
                }
                Op::BatchNormEval { x, gamma, beta, mean, var, eps } => {
                    let xv = &nodes[*x].value;
                    let sh = xv.shape();
                    let (c, hw) = (sh[1], sh[2] * sh[3]);
                    let gm = nodes[*gamma].value.as_slice();
                    let (gx, gg, gb) =
                        kernels::batch_norm_eval_backward(&g, xv.as_slice(), c, hw, gm, mean, var, *eps);
                    acc!(*x, gx.len(), |s: &mut [E]| for i in 0..gx.len() {
                        s[i] = s[i] + gx[i];
                    });
                    acc!(*gamma, gg.len(), |s: &mut [E]| for i in 0..gg.len() {
                        s[i] = s[i] + gg[i];
                    });
                    acc!(*beta, gb.len(), |s: &mut [E]| for i in 0..gb.len() {
                        s[i] = s[i] + gb[i];
                    });
                }
                Op::LayerNorm { x, gamma, beta, stats } => {
                    let xv = &nodes[*x].value;
                    let c = *xv.shape().last().unwrap();
                    let gm = nodes[*gamma].value.as_slice();
                    let (gx, gg, gb) = kernels::layer_norm_backward(&g, xv.as_slice(), c, gm, stats);
                    acc!(*x, gx.len(), |s: &mut [E]| for i in 0..gx.len() {
                        s[i] = s[i] + gx[i];
                    });
                    acc!(*gamma, gg.len(), |s: &mut [E]| for i in 0..gg.len() {
                        s[i] = s[i] + gg[i];
                    });
                    acc!(*beta, gb.len(), |s: &mut [E]| for i in 0..gb.len() {
                        s[i] = s[i] + gb[i];
                    });
                }
                Op::Dropout { x, mask } => {
                    acc!(*x, g.len(), |s: &mut [E]| for i in 0..g.len() {
                        s[i] = s[i] + g[i] * mask[i];
                    });
                }
                Op::GlobalAvgPool(x) => {
                    let sh = nodes[*x].value.shape();
                    let hw = sh[2] * sh[3];
                    let inv = E::from_f64(1.0 / hw as f64);
                    acc!(*x, nodes[*x].value.numel(), |s: &mut [E]| {
                        for (plane, &gv) in s.chunks_mut(hw).zip(&g) {
                            for o in plane.iter_mut() {
                                *o = *o + gv * inv;
                            }
                        }
                    });
                }
                Op::MulChannel { x, s } => {
                    let xv = nodes[*x].value.as_slice();
                    let sv = nodes[*s].value.as_slice();
                    let sh = nodes[*x].value.shape();
                    let hw = sh[2] * sh[3];
                    acc!(*x, g.len(), |o: &mut [E]| for i in 0..g.len() {
                        o[i] = o[i] + g[i] * sv[i / hw];
                    });
                    acc!(*s, sv.len(), |o: &mut [E]| for i in 0..g.len() {
                        o[i / hw] = o[i / hw] + g[i] * xv[i];
                    });
                }
                Op::AddBroadcastBatch { x, b } => {
                    acc!(*x, g.len(), |s: &mut [E]| for (o, &v) in s.iter_mut().zip(&g) {
                        *o = *o + v;
                    });
                    let bn = nodes[*b].value.numel();
                    acc!(*b, bn, |s: &mut [E]| for (i, &v) in g.iter().enumerate() {
                        s[i % bn] = s[i % bn] + v;
                    });
                }
                Op::AddWindowMask { x } => {
                    acc!(*x, g.len(), |s: &mut [E]| for (o, &v) in s.iter_mut().zip(&g) {
                        *o = *o + v;
                    });
                }
                Op::RollHw { x, sh, sw } => {
                    let gx = roll_hw_data(&g, node.value.shape(), -sh, -sw);
                    acc!(*x, gx.len(), |s: &mut [E]| for i in 0..gx.len() {
                        s[i] = s[i] + gx[i];
                    });
                }
                Op::PadHw { x, pad_b, pad_r } => {
                    let in_shape = nodes[*x].value.shape().to_vec();
                    let (n, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                    let (ho, wo) = (h + pad_b, w + pad_r);
                    acc!(*x, nodes[*x].value.numel(), |s: &mut [E]| {
                        for ni in 0..n {
                            for hi in 0..h {
                                for wi in 0..w {
                                    let src = ((ni * ho + hi) * wo + wi) * c;
                                    let dst = ((ni * h + hi) * w + wi) * c;
                                    for i in 0..c {
                                        s[dst + i] = s[dst + i] + g[src + i];
                                    }
                                }
                            }
                        }
                    });
                }
                Op::BcePerLabel { z, targets } => {
                    let zv = nodes[*z].value.as_slice();
                    let labels = node.value.numel();
                    let rows = zv.len() / labels;
                    let inv_n = E::from_f64(1.0 / rows as f64);
                    acc!(*z, zv.len(), |s: &mut [E]| for i in 0..zv.len() {
                        let l = i % labels;
                        let sig = sigmoid_scalar(zv[i]);
                        s[i] = s[i] + g[l] * (sig - targets[i]) * inv_n;
                    });
                }
                Op::IndexScalar { x, index } => {
                    let gv = g[0];
                    acc!(*x, nodes[*x].value.numel(), |s: &mut [E]| {
                        s[*index] = s[*index] + gv;
                    });
                }
            }
        }
        drop(nodes);

        let mut nodes = self.nodes.borrow_mut();
        for (idx, g) in leaf_grads {
            nodes[idx].grad = Some(g);
        }
        Ok(())
    }
}

fn sigmoid_scalar<E: Element>(x: E) -> E {
    if x >= E::zero() {
        (E::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

/// Handle to one tape node. Copyable; all math ops live here.
#[derive(Clone, Copy)]
pub struct Var<'t, E: Element> {
    tape: &'t Tape<E>,
    idx: usize,
}

impl<E: Element> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("idx", &self.idx).field("shape", &self.shape()).finish()
    }
}

impl<'t, E: Element> Var<'t, E> {
    pub fn value(&self) -> Tensor<E> {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].needs_grad
    }

    fn same_tape(&self, o: &Var<'t, E>) {
        debug_assert!(std::ptr::eq(self.tape, o.tape), "vars from different tapes");
    }

    pub fn add(self, o: Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(&o);
        let (a, b) = (self.value(), o.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = binary_map(a.as_slice(), b.as_slice(), |x, y| x + y);
        let t = Tensor::new(a.shape().to_vec(), data)?;
        self.tape.push_node(t, Op::Add(self.idx, o.idx), self.needs_grad() || o.needs_grad())
    }

    /// Broadcast-add a rank-1 bias over the trailing dimension.
    pub fn add_bias(self, b: Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(&b);
        let (x, bv) = (self.value(), b.value());
        let c = *x.shape().last().ok_or_else(|| Error::shape("add_bias", "input is scalar"))?;
        if bv.rank() != 1 || bv.shape()[0] != c {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match trailing dim {}", bv.shape(), c),
            ));
        }
        let bs = bv.as_slice();
        let data: Vec<E> = x.as_slice().iter().enumerate().map(|(i, &v)| v + bs[i % c]).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.tape
            .push_node(t, Op::AddBias { x: self.idx, b: b.idx }, self.needs_grad() || b.needs_grad())
    }

    pub fn mul(self, o: Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(&o);
        let (a, b) = (self.value(), o.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = binary_map(a.as_slice(), b.as_slice(), |x, y| x * y);
        let t = Tensor::new(a.shape().to_vec(), data)?;
        self.tape.push_node(t, Op::Mul(self.idx, o.idx), self.needs_grad() || o.needs_grad())
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, E>> {
        let x = self.value();
        let ce = E::from_f64(c);
        let data = unary_map(x.as_slice(), |v| v * ce);
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.tape.push_node(t, Op::Scale { x: self.idx, c: ce }, self.needs_grad())
    }

    /// 2-D matmul; with `tb` the right operand is stored `[n, k]` and used
    /// as its transpose.
    pub fn matmul(self, o: Var<'t, E>, tb: bool) -> Result<Var<'t, E>> {
        self.same_tape(&o);
        let (a, b) = (self.value(), o.value());
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::shape("matmul", format!("need rank 2, got {:?} and {:?}", a.shape(), b.shape())));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (bk, n) = if tb { (b.shape()[1], b.shape()[0]) } else { (b.shape()[0], b.shape()[1]) };
        if k != bk {
            return Err(Error::shape("matmul", format!("inner dims {} vs {}", k, bk)));
        }
        let data = kernels::matmul(a.as_slice(), b.as_slice(), m, k, n, false, tb);
        let t = Tensor::new(vec![m, n], data)?;
        self.tape
            .push_node(t, Op::Matmul { a: self.idx, b: o.idx, tb }, self.needs_grad() || o.needs_grad())
    }

    /// Batched 3-D matmul over the leading dimension.
    pub fn bmm(self, o: Var<'t, E>, tb: bool) -> Result<Var<'t, E>> {
        self.same_tape(&o);
        let (a, b) = (self.value(), o.value());
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
            return Err(Error::shape("bmm", format!("need matching rank-3, got {:?} and {:?}", a.shape(), b.shape())));
        }
        let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bk, n) = if tb { (b.shape()[2], b.shape()[1]) } else { (b.shape()[1], b.shape()[2]) };
        if k != bk {
            return Err(Error::shape("bmm", format!("inner dims {} vs {}", k, bk)));
        }
        let data = kernels::bmm(a.as_slice(), b.as_slice(), batch, m, k, n, false, tb);
        let t = Tensor::new(vec![batch, m, n], data)?;
        self.tape
            .push_node(t, Op::Bmm { a: self.idx, b: o.idx, tb }, self.needs_grad() || o.needs_grad())
    }

    /// Softmax over the trailing dimension.
    pub fn softmax_last(self) -> Result<Var<'t, E>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| Error::shape("softmax", "input is scalar"))?;
        let data = kernels::softmax_rows(x.as_slice(), d);
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.tape.push_node(t, Op::Softmax { x: self.idx }, self.needs_grad())
    }

    pub fn relu(self) -> Result<Var<'t, E>> {
        let x = self.value();
        let data = unary_map(x.as_slice(), |v| if v > E::zero() { v } else { E::zero() });
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.tape.push_node(t, Op::Relu(self.idx), self.needs_grad())
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'t, E>> {
        let x = self.value();
        let sc = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let a3 = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let data = unary_map(x.as_slice(), |v| {
            let u = sc * (v + a3 * v * v * v);
            half * v * (E::one() + u.tanh())
        });
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.tape.push_node(t, Op::Gelu(self.idx), self.needs_grad())
    }

    pub fn sigmoid(self) -> Result<Var<'t, E>> {
        let x = self.value();
        let data = unary_map(x.as_slice(), sigmoid_scalar);
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.tape.push_node(t, Op::Sigmoid(self.idx), self.needs_grad())
    }

    /// `x * relu6(x + 3) / 6`.
    pub fn h_swish(self) -> Result<Var<'t, E>> {
        let x = self.value();
        let three = E::from_f64(3.0);
        let six = E::from_f64(6.0);
        let data = unary_map(x.as_slice(), |v| {
            if v <= -three {
                E::zero()
            } else if v >= three {
                v
            } else {
                v * (v + three) / six
            }
        });
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.tape.push_node(t, Op::HSwish(self.idx), self.needs_grad())
    }

    pub fn sum_all(self) -> Result<Var<'t, E>> {
        let x = self.value();
        let mut s = E::zero();
        for &v in x.as_slice() {
            s = s + v;
        }
        let t = Tensor::new(vec![], vec![s])?;
        self.tape.push_node(t, Op::SumAll(self.idx), self.needs_grad())
    }

    /// View under a new shape; storage is shared, no copy.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t, E>> {
        let t = self.value().with_shape(shape)?;
        self.tape.push_node(t, Op::Reshape(self.idx), self.needs_grad())
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, E>> {
        let x = self.value();
        if perm.len() != x.rank() {
            return Err(Error::shape("permute", format!("perm {:?} vs rank {}", perm, x.rank())));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::shape("permute", format!("invalid permutation {:?}", perm)));
            }
            seen[p] = true;
        }
        let (data, out_shape) = permute_data(x.as_slice(), x.shape(), perm);
        let t = Tensor::new(out_shape, data)?;
        self.tape
            .push_node(t, Op::Permute { x: self.idx, perm: perm.to_vec() }, self.needs_grad())
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, E>> {
        let x = self.value();
        if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {} range {}..{} out of {:?}", axis, start, start + len, x.shape()),
            ));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let mid = x.shape()[axis];
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        let xs = x.as_slice();
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            data.extend_from_slice(&xs[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        self.tape
            .push_node(t, Op::Narrow { x: self.idx, axis, start, len }, self.needs_grad())
    }

    /// `out[k, :] = self[index[k], :]` for a rank-2 table.
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t, E>> {
        let table = self.value();
        if table.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("need rank-2 table, got {:?}", table.shape())));
        }
        let (rows, cols) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = index.iter().find(|&&r| r >= rows) {
            return Err(Error::shape("gather_rows", format!("row {} out of {}", bad, rows)));
        }
        let ts = table.as_slice();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &r in index {
            data.extend_from_slice(&ts[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::new(vec![index.len(), cols], data)?;
        self.tape
            .push_node(t, Op::GatherRows { table: self.idx, index: index.to_vec() }, self.needs_grad())
    }

    /// Stride-1 same-padded grouped convolution; `self` is `[N,Cin,H,W]`,
    /// `w` is `[Cout, Cin/groups, k, k]` with odd `k`.
    pub fn conv2d(self, w: Var<'t, E>, b: Option<Var<'t, E>>, groups: usize) -> Result<Var<'t, E>> {
        self.same_tape(&w);
        let x = self.value();
        let wt = w.value();
        if x.rank() != 4 || wt.rank() != 4 {
            return Err(Error::shape("conv2d", format!("need rank-4, got {:?} and {:?}", x.shape(), wt.shape())));
        }
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, cpg, k, k2) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square and odd, got {}x{}", k, k2)));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cpg != cin / groups {
            return Err(Error::shape(
                "conv2d",
                format!("groups {} incompatible with cin {} cout {} cpg {}", groups, cin, cout, cpg),
            ));
        }
        let bias_t = b.map(|bv| bv.value());
        if let Some(bt) = &bias_t {
            if bt.rank() != 1 || bt.shape()[0] != cout {
                return Err(Error::shape("conv2d", format!("bias {:?} vs out_ch {}", bt.shape(), cout)));
            }
        }
        let dims = ConvDims { batch: n, in_ch: cin, out_ch: cout, h, w: wd, k, groups };
        let data = kernels::conv2d(x.as_slice(), wt.as_slice(), bias_t.as_ref().map(|t| t.as_slice()), &dims);
        let t = Tensor::new(vec![n, cout, h, wd], data)?;
        let ng = self.needs_grad() || w.needs_grad() || b.map(|bv| bv.needs_grad()).unwrap_or(false);
        self.tape.push_node(
            t,
            Op::Conv2d { x: self.idx, w: w.idx, b: b.map(|bv| bv.idx), dims },
            ng,
        )
    }

    /// Batch norm using the current batch statistics; also returns the
    /// per-channel batch mean and (population) variance so the caller can
    /// update running statistics.
    pub fn batch_norm_train(
        self,
        gamma: Var<'t, E>,
        beta: Var<'t, E>,
        eps: f64,
    ) -> Result<(Var<'t, E>, Tensor<E>, Tensor<E>)> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(Error::shape("batch_norm", format!("need rank-4, got {:?}", x.shape())));
        }
        let (n, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
        let (gt, bt) = (gamma.value(), beta.value());
        if gt.shape() != [c] || bt.shape() != [c] {
            return Err(Error::shape("batch_norm", format!("gamma/beta must be [{}]", c)));
        }
        let (y, mean, var, stats) = kernels::batch_norm_train(x.as_slice(), n, c, hw, gt.as_slice(), bt.as_slice(), eps);
        let t = Tensor::new(x.shape().to_vec(), y)?;
        let ng = self.needs_grad() || gamma.needs_grad() || beta.needs_grad();
        let v = self.tape.push_node(
            t,
            Op::BatchNormTrain { x: self.idx, gamma: gamma.idx, beta: beta.idx, stats },
            ng,
        )?;
        Ok((v, Tensor::new(vec![c], mean)?, Tensor::new(vec![c], var)?))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t, E>,
        beta: Var<'t, E>,
        mean: &Tensor<E>,
        var: &Tensor<E>,
        eps: f64,
    ) -> Result<Var<'t, E>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(Error::shape("batch_norm_eval", format!("need rank-4, got {:?}", x.shape())));
        }
        let (c, hw) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
        let (gt, bt) = (gamma.value(), beta.value());
        if gt.shape() != [c] || bt.shape() != [c] || mean.shape() != [c] || var.shape() != [c] {
            return Err(Error::shape("batch_norm_eval", format!("per-channel tensors must be [{}]", c)));
        }
        let y = kernels::batch_norm_eval(x.as_slice(), c, hw, gt.as_slice(), bt.as_slice(), mean.as_slice(), var.as_slice(), eps);
        let t = Tensor::new(x.shape().to_vec(), y)?;
        let ng = self.needs_grad() || gamma.needs_grad() || beta.needs_grad();
        self.tape.push_node(
            t,
            Op::BatchNormEval {
                x: self.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                mean: mean.as_slice().to_vec(),
                var: var.as_slice().to_vec(),
                eps,
            },
            ng,
        )
    }

    /// Layer norm over the trailing dimension.
    pub fn layer_norm(self, gamma: Var<'t, E>, beta: Var<'t, E>, eps: f64) -> Result<Var<'t, E>> {
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "input is scalar"))?;
        let (gt, bt) = (gamma.value(), beta.value());
        if gt.shape() != [c] || bt.shape() != [c] {
            return Err(Error::shape("layer_norm", format!("gamma/beta must be [{}]", c)));
        }
        let (y, stats) = kernels::layer_norm(x.as_slice(), c, gt.as_slice(), bt.as_slice(), eps);
        let t = Tensor::new(x.shape().to_vec(), y)?;
        let ng = self.needs_grad() || gamma.needs_grad() || beta.needs_grad();
        self.tape.push_node(
            t,
            Op::LayerNorm { x: self.idx, gamma: gamma.idx, beta: beta.idx, stats },
            ng,
        )
    }

    /// Inverted dropout: keeps with probability `1-p` and scales kept
    /// activations by `1/(1-p)`. `p == 0` is the identity.
    pub fn dropout(self, p: f64, rng: &mut CounterRng) -> Result<Var<'t, E>> {
        if p == 0.0 {
            return Ok(self);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {} outside [0, 1)", p)));
        }
        let x = self.value();
        let keep = E::from_f64(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..x.numel())
            .map(|_| if rng.next_f64() >= p { keep } else { E::zero() })
            .collect();
        let data: Vec<E> = x.as_slice().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.tape.push_node(t, Op::Dropout { x: self.idx, mask }, self.needs_grad())
    }

    /// `[N,C,H,W]` → per-channel spatial mean `[N,C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t, E>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(Error::shape("global_avg_pool", format!("need rank-4, got {:?}", x.shape())));
        }
        let (n, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
        let inv = E::from_f64(1.0 / hw as f64);
        let xs = x.as_slice();
        let data: Vec<E> = (0..n * c)
            .map(|i| {
                let mut s = E::zero();
                for &v in &xs[i * hw..(i + 1) * hw] {
                    s = s + v;
                }
                s * inv
            })
            .collect();
        let t = Tensor::new(vec![n, c], data)?;
        self.tape.push_node(t, Op::GlobalAvgPool(self.idx), self.needs_grad())
    }

    /// Reweight feature maps channel-wise: `[N,C,H,W] * [N,C]`.
    pub fn mul_channel(self, s: Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(&s);
        let x = self.value();
        let sv = s.value();
        if x.rank() != 4 || sv.rank() != 2 || x.shape()[0] != sv.shape()[0] || x.shape()[1] != sv.shape()[1] {
            return Err(Error::shape("mul_channel", format!("{:?} vs {:?}", x.shape(), sv.shape())));
        }
        let hw = x.shape()[2] * x.shape()[3];
        let ss = sv.as_slice();
        let data: Vec<E> = x
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * ss[i / hw])
            .collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.tape
            .push_node(t, Op::MulChannel { x: self.idx, s: s.idx }, self.needs_grad() || s.needs_grad())
    }

    /// Add a rank-3 `[B0, m, n]` tensor to `[A*B0, m, n]`, broadcast over
    /// the leading factor with `B0` fastest-varying.
    pub fn add_broadcast_batch(self, b: Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(&b);
        let x = self.value();
        let bv = b.value();
        if x.rank() != 3
            || bv.rank() != 3
            || x.shape()[1..] != bv.shape()[1..]
            || x.shape()[0] % bv.shape()[0] != 0
        {
            return Err(Error::shape("add_broadcast_batch", format!("{:?} vs {:?}", x.shape(), bv.shape())));
        }
        let bn = bv.numel();
        let bs = bv.as_slice();
        let data: Vec<E> = x.as_slice().iter().enumerate().map(|(i, &v)| v + bs[i % bn]).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.tape
            .push_node(t, Op::AddBroadcastBatch { x: self.idx, b: b.idx }, self.needs_grad() || b.needs_grad())
    }

    /// Add a constant per-window attention mask. `self` is
    /// `[N*nw*heads, T, T]`, `mask` is `[nw, T, T]`; batch `i` uses window
    /// `(i / heads) % nw`.
    pub fn add_window_mask(self, mask: &Tensor<E>, heads: usize) -> Result<Var<'t, E>> {
        let x = self.value();
        if x.rank() != 3 || mask.rank() != 3 || x.shape()[1..] != mask.shape()[1..] {
            return Err(Error::shape("add_window_mask", format!("{:?} vs {:?}", x.shape(), mask.shape())));
        }
        let nw = mask.shape()[0];
        if heads == 0 || x.shape()[0] % (nw * heads) != 0 {
            return Err(Error::shape(
                "add_window_mask",
                format!("batch {} not divisible by nw {} * heads {}", x.shape()[0], nw, heads),
            ));
        }
        let tt = x.shape()[1] * x.shape()[2];
        let ms = mask.as_slice();
        let data: Vec<E> = x
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let w = (i / (tt * heads)) % nw;
                v + ms[w * tt + i % tt]
            })
            .collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.tape
            .push_node(t, Op::AddWindowMask { x: self.idx }, self.needs_grad())
    }

    /// Cyclic roll of the H and W axes of `[N,H,W,C]`:
    /// `out[h] = x[(h - sh) mod H]` (same convention for W).
    pub fn roll_hw(self, sh: isize, sw: isize) -> Result<Var<'t, E>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(Error::shape("roll_hw", format!("need rank-4, got {:?}", x.shape())));
        }
        if sh == 0 && sw == 0 {
            return Ok(self);
        }
        let data = roll_hw_data(x.as_slice(), x.shape(), sh, sw);
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.tape.push_node(t, Op::RollHw { x: self.idx, sh, sw }, self.needs_grad())
    }

    /// Zero-pad the bottom/right of `[N,H,W,C]`.
    pub fn pad_hw(self, pad_b: usize, pad_r: usize) -> Result<Var<'t, E>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(Error::shape("pad_hw", format!("need rank-4, got {:?}", x.shape())));
        }
        if pad_b == 0 && pad_r == 0 {
            return Ok(self);
        }
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = (h + pad_b, w + pad_r);
        let xs = x.as_slice();
        let mut data = vec![E::zero(); n * ho * wo * c];
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let src = ((ni * h + hi) * w + wi) * c;
                    let dst = ((ni * ho + hi) * wo + wi) * c;
                    data[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                }
            }
        }
        let t = Tensor::new(vec![n, ho, wo, c], data)?;
        self.tape
            .push_node(t, Op::PadHw { x: self.idx, pad_b, pad_r }, self.needs_grad())
    }

    /// Numerically stable binary cross-entropy with logits, averaged over
    /// the batch separately for each label column: `[N,L]` → `[L]`.
    pub fn bce_per_label(self, targets: &Tensor<E>) -> Result<Var<'t, E>> {
        let z = self.value();
        if z.rank() != 2 || targets.shape() != z.shape() {
            return Err(Error::shape("bce_per_label", format!("{:?} vs {:?}", z.shape(), targets.shape())));
        }
        let (n, labels) = (z.shape()[0], z.shape()[1]);
        let ts = targets.as_slice();
        if let Some((i, _)) = ts
            .iter()
            .enumerate()
            .find(|(_, &t)| t < E::zero() || t > E::one())
        {
            return Err(Error::shape("bce_per_label", format!("target at {} outside [0, 1]", i)));
        }
        let zs = z.as_slice();
        let inv_n = E::from_f64(1.0 / n as f64);
        let mut out = vec![E::zero(); labels];
        for (i, &zv) in zs.iter().enumerate() {
            let y = ts[i];
            // max(z,0) - z*y + ln(1 + e^{-|z|})
            let pos = if zv > E::zero() { zv } else { E::zero() };
            let term = pos - zv * y + (-zv.abs()).exp().ln_1p();
            out[i % labels] = out[i % labels] + term;
        }
        for v in out.iter_mut() {
            *v = *v * inv_n;
        }
        let t = Tensor::new(vec![labels], out)?;
        self.tape.push_node(
            t,
            Op::BcePerLabel { z: self.idx, targets: ts.to_vec() },
            self.needs_grad(),
        )
    }

    /// Extract one element of a rank-1 tensor as a scalar.
    pub fn index_scalar(self, index: usize) -> Result<Var<'t, E>> {
        let x = self.value();
        if x.rank() != 1 || index >= x.shape()[0] {
            return Err(Error::shape("index_scalar", format!("index {} in shape {:?}", index, x.shape())));
        }
        let t = Tensor::new(vec![], vec![x.as_slice()[index]])?;
        self.tape.push_node(t, Op::IndexScalar { x: self.idx, index }, self.needs_grad())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape.to_vec(), vals).unwrap()
    }

    #[test]
    fn softmax_of_log_integers() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&t64(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()])).unwrap();
        let y = x.softmax_last().unwrap().value();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (a, b) in y.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape: Tape<f64> = Tape::new();
        let p = t64(&[2], &[1.0, 2.0]);
        let x = tape.param(&p).unwrap();
        let loss = x.mul(x).unwrap().sum_all().unwrap();
        assert_eq!(loss.value().item(), 5.0);
        tape.backward(loss).unwrap();
        let g = tape.grad(&p).unwrap();
        assert_eq!(g.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_frozen_case_and_grad() {
        let tape: Tape<f64> = Tape::new();
        let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t64(&[2, 1], &[1.0, 1.0]);
        let va = tape.param(&a).unwrap();
        let vb = tape.constant(&b).unwrap();
        let c = va.matmul(vb, false).unwrap();
        assert_eq!(c.value().as_slice(), &[3.0, 7.0]);
        let loss = c.sum_all().unwrap();
        tape.backward(loss).unwrap();
        // d(sum(A·b))/dA = 1·bᵀ per row
        assert_eq!(tape.grad(&a).unwrap().as_slice(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape: Tape<f64> = Tape::new();
        let p = t64(&[1], &[2.0]);
        let x = tape.param(&p).unwrap();
        let loss = x.sum_all().unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Numeric(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape: Tape<f64> = Tape::new();
        let p = t64(&[2], &[1.0, 2.0]);
        let x = tape.param(&p).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_forward_is_hard_error() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&t64(&[1], &[1e308])).unwrap();
        let err = x.scale(1e10).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale", .. }));
    }

    #[test]
    fn h_swish_frozen_point() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&t64(&[1], &[1.0])).unwrap();
        let y = x.h_swish().unwrap().value();
        assert!((y.as_slice()[0] - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn global_avg_pool_frozen_point() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = x.global_avg_pool().unwrap().value();
        assert_eq!(y.shape(), &[1, 1]);
        assert!((y.as_slice()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_two_point_row() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&t64(&[1, 2], &[1.0, 3.0])).unwrap();
        let gamma = tape.constant(&t64(&[2], &[1.0, 1.0])).unwrap();
        let beta = tape.constant(&t64(&[2], &[0.0, 0.0])).unwrap();
        let y = x.layer_norm(gamma, beta, 1e-12).unwrap().value();
        assert!((y.as_slice()[0] + 1.0).abs() < 1e-5);
        assert!((y.as_slice()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn roll_round_trips_and_shifts() {
        let tape: Tape<f64> = Tape::new();
        // [1, 2, 2, 1] grid: [[1,2],[3,4]]
        let x = tape.constant(&t64(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let r = x.roll_hw(-1, -1).unwrap();
        assert_eq!(r.value().as_slice(), &[4.0, 3.0, 2.0, 1.0]);
        let back = r.roll_hw(1, 1).unwrap();
        assert_eq!(back.value().as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn bce_uniform_logits_give_ln2() {
        let tape: Tape<f64> = Tape::new();
        let z = tape.constant(&t64(&[2, 4], &[0.0; 8])).unwrap();
        let targets = t64(&[2, 4], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let l = z.bce_per_label(&targets).unwrap().value();
        for &v in l.as_slice() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn narrow_then_scatter_grad() {
        let tape: Tape<f64> = Tape::new();
        let p = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = tape.param(&p).unwrap();
        let mid = x.narrow(1, 1, 1).unwrap();
        assert_eq!(mid.value().as_slice(), &[2.0, 5.0]);
        let loss = mid.sum_all().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(&p).unwrap().as_slice(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn permute_grad_returns_to_input_layout() {
        let tape: Tape<f64> = Tape::new();
        let p = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = tape.param(&p).unwrap();
        let xt = x.permute(&[1, 0]).unwrap();
        assert_eq!(xt.value().as_slice(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let w = tape.constant(&t64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0])).unwrap();
        let loss = xt.mul(w).unwrap().sum_all().unwrap();
        tape.backward(loss).unwrap();
        // grad in original [2,3] layout equals wᵀ
        assert_eq!(tape.grad(&p).unwrap().as_slice(), &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
    }
}
