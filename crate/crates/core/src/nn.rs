//! Neural-network layers: thin parameter holders whose `forward` methods
//! chain tape primitives.
//!
//! Initialization draws from a stream derived from the parameter's full
//! name, so adding or removing sibling layers never changes the values
//! another layer starts from.

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Forward-pass mode. Train mode uses batch statistics in batch norm and
/// applies dropout; eval mode uses running statistics and no dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Visitor callbacks used for optimizer steps, checkpointing and counting.
/// `trainable == false` marks buffers (batch-norm running statistics) that
/// persist in checkpoints but receive no gradient updates.
pub type VisitFn<'v, E> = dyn FnMut(&str, &Tensor<E>, bool) + 'v;
pub type VisitMutFn<'v, E> = dyn FnMut(&str, &mut Tensor<E>, bool) + 'v;

pub(crate) fn join(prefix: &str, local: &str) -> String {
    if prefix.is_empty() {
        local.to_string()
    } else {
        format!("{}.{}", prefix, local)
    }
}

/// Fully connected layer; weight stored `[out, in]`, applied over the
/// trailing dimension of any rank ≥ 2 input.
pub struct Linear<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
}

impl<E: Element> Linear<E> {
    pub fn new(base: &CounterRng, name: &str, in_f: usize, out_f: usize, bias: bool) -> Self {
        let mut wr = base.derive_named(&join(name, "weight"));
        Linear {
            weight: Tensor::trunc_normal(vec![out_f, in_f], 0.02, &mut wr),
            bias: bias.then(|| Tensor::zeros(vec![out_f])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let shape = x.shape();
        let in_f = self.weight.shape()[1];
        let out_f = self.weight.shape()[0];
        if shape.last() != Some(&in_f) {
            return Err(Error::shape(
                "linear",
                format!("input {:?} does not end in {}", shape, in_f),
            ));
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let w = tape.param(&self.weight)?;
        let mut y = x.reshape(vec![rows, in_f])?.matmul(w, true)?;
        if let Some(b) = &self.bias {
            y = y.add_bias(tape.param(b)?)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_f;
        y.reshape(out_shape)
    }

    pub fn visit(&self, prefix: &str, f: &mut VisitFn<'_, E>) {
        f(&join(prefix, "weight"), &self.weight, true);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, true);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, E>) {
        f(&join(prefix, "weight"), &mut self.weight, true);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, true);
        }
    }
}

/// Stride-1 same-padded convolution. `groups == in_ch == out_ch` gives the
/// depthwise case.
pub struct Conv2d<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub groups: usize,
}

impl<E: Element> Conv2d<E> {
    pub fn new(
        base: &CounterRng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(Error::Config(format!(
                "conv2d {}: groups {} must divide in {} and out {}",
                name, groups, in_ch, out_ch
            )));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d {}: kernel {} must be odd", name, k)));
        }
        let mut wr = base.derive_named(&join(name, "weight"));
        Ok(Conv2d {
            weight: Tensor::kaiming_fan_out(vec![out_ch, in_ch / groups, k, k], &mut wr),
            bias: bias.then(|| Tensor::zeros(vec![out_ch])),
            groups,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let w = tape.param(&self.weight)?;
        let b = match &self.bias {
            Some(b) => Some(tape.param(b)?),
            None => None,
        };
        x.conv2d(w, b, self.groups)
    }

    pub fn visit(&self, prefix: &str, f: &mut VisitFn<'_, E>) {
        f(&join(prefix, "weight"), &self.weight, true);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, true);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, E>) {
        f(&join(prefix, "weight"), &mut self.weight, true);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, true);
        }
    }
}

/// Layer norm over the trailing (channel) dimension.
pub struct LayerNorm<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub eps: f64,
}

impl<E: Element> LayerNorm<E> {
    pub fn new(dim: usize) -> Self {
        LayerNorm { gamma: Tensor::ones(vec![dim]), beta: Tensor::zeros(vec![dim]), eps: 1e-5 }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        x.layer_norm(tape.param(&self.gamma)?, tape.param(&self.beta)?, self.eps)
    }

    pub fn visit(&self, prefix: &str, f: &mut VisitFn<'_, E>) {
        f(&join(prefix, "gamma"), &self.gamma, true);
        f(&join(prefix, "beta"), &self.beta, true);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, E>) {
        f(&join(prefix, "gamma"), &mut self.gamma, true);
        f(&join(prefix, "beta"), &mut self.beta, true);
    }
}

/// Batch norm over `[N,C,H,W]`. Running statistics start undefined: they
/// are set to the first batch's statistics and then updated by EMA, and
/// eval mode before any train-mode pass is a hard error.
pub struct BatchNorm2d<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Option<Tensor<E>>,
    pub running_var: Option<Tensor<E>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<E: Element> BatchNorm2d<E> {
    pub fn new(ch: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::ones(vec![ch]),
            beta: Tensor::zeros(vec![ch]),
            running_mean: None,
            running_var: None,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<'t>(&mut self, tape: &'t Tape<E>, x: Var<'t, E>, mode: Mode) -> Result<Var<'t, E>> {
        let gamma = tape.param(&self.gamma)?;
        let beta = tape.param(&self.beta)?;
        match mode {
            Mode::Train => {
                let (y, mean, var) = x.batch_norm_train(gamma, beta, self.eps)?;
                self.update_running(&mean, &var);
                Ok(y)
            }
            Mode::Eval => {
                let (mean, var) = match (&self.running_mean, &self.running_var) {
                    (Some(m), Some(v)) => (m, v),
                    _ => {
                        return Err(Error::Numeric(
                            "batch norm has no running statistics: eval before any training step".into(),
                        ))
                    }
                };
                x.batch_norm_eval(gamma, beta, mean, var, self.eps)
            }
        }
    }

    fn update_running(&mut self, mean: &Tensor<E>, var: &Tensor<E>) {
        match (&mut self.running_mean, &mut self.running_var) {
            (Some(rm), Some(rv)) => {
                let m = E::from_f64(self.momentum);
                let one_m = E::from_f64(1.0 - self.momentum);
                let new_m: Vec<E> = rm
                    .as_slice()
                    .iter()
                    .zip(mean.as_slice())
                    .map(|(&r, &b)| one_m * r + m * b)
                    .collect();
                let new_v: Vec<E> = rv
                    .as_slice()
                    .iter()
                    .zip(var.as_slice())
                    .map(|(&r, &b)| one_m * r + m * b)
                    .collect();
                rm.set_data(new_m).expect("running mean shape");
                rv.set_data(new_v).expect("running var shape");
            }
            _ => {
                self.running_mean = Some(mean.clone());
                self.running_var = Some(var.clone());
            }
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut VisitFn<'_, E>) {
        f(&join(prefix, "gamma"), &self.gamma, true);
        f(&join(prefix, "beta"), &self.beta, true);
        if let Some(rm) = &self.running_mean {
            f(&join(prefix, "running_mean"), rm, false);
        }
        if let Some(rv) = &self.running_var {
            f(&join(prefix, "running_var"), rv, false);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, E>) {
        f(&join(prefix, "gamma"), &mut self.gamma, true);
        f(&join(prefix, "beta"), &mut self.beta, true);
        if let Some(rm) = &mut self.running_mean {
            f(&join(prefix, "running_mean"), rm, false);
        }
        if let Some(rv) = &mut self.running_var {
            f(&join(prefix, "running_var"), rv, false);
        }
    }

    /// Install running statistics restored from a checkpoint.
    pub fn set_running(&mut self, mean: Tensor<E>, var: Tensor<E>) {
        self.running_mean = Some(mean);
        self.running_var = Some(var);
    }
}

/// Inverted dropout wrapper; identity in eval mode or at `p == 0`.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        Dropout { p }
    }

    pub fn forward<'t, E: Element>(
        &self,
        x: Var<'t, E>,
        mode: Mode,
        rng: &mut CounterRng,
    ) -> Result<Var<'t, E>> {
        if mode == Mode::Eval || self.p == 0.0 {
            Ok(x)
        } else {
            x.dropout(self.p, rng)
        }
    }
}

/// Transformer feed-forward: expand by `ratio`, GELU, project back, with
/// dropout after each projection.
pub struct Mlp<E: Element> {
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
    pub drop: Dropout,
}

impl<E: Element> Mlp<E> {
    pub fn new(base: &CounterRng, name: &str, dim: usize, ratio: usize, drop_p: f64) -> Self {
        Mlp {
            fc1: Linear::new(base, &join(name, "fc1"), dim, dim * ratio, true),
            fc2: Linear::new(base, &join(name, "fc2"), dim * ratio, dim, true),
            drop: Dropout::new(drop_p),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<E>,
        x: Var<'t, E>,
        mode: Mode,
        rng: &mut CounterRng,
    ) -> Result<Var<'t, E>> {
        let h = self.fc1.forward(tape, x)?.gelu()?;
        let h = self.drop.forward(h, mode, rng)?;
        let y = self.fc2.forward(tape, h)?;
        self.drop.forward(y, mode, rng)
    }

    pub fn visit(&self, prefix: &str, f: &mut VisitFn<'_, E>) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, E>) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, GradCheckOpts};

    fn rng() -> CounterRng {
        CounterRng::new(42)
    }

    fn t64(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape.to_vec(), vals).unwrap()
    }

    #[test]
    fn linear_identity_weight_passes_input_through() {
        let mut lin: Linear<f64> = Linear::new(&rng(), "l", 2, 2, true);
        lin.weight = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        lin.bias = Some(t64(&[2], &[10.0, 20.0]));
        let tape = Tape::new();
        let x = tape.constant(&t64(&[1, 2], &[3.0, 4.0])).unwrap();
        let y = lin.forward(&tape, x).unwrap().value();
        assert_eq!(y.as_slice(), &[13.0, 24.0]);
    }

    #[test]
    fn linear_applies_over_trailing_dim_of_rank3() {
        let mut lin: Linear<f64> = Linear::new(&rng(), "l", 2, 1, false);
        lin.weight = t64(&[1, 2], &[1.0, 1.0]);
        let tape = Tape::new();
        let x = tape.constant(&t64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = lin.forward(&tape, x).unwrap().value();
        assert_eq!(y.shape(), &[1, 2, 1]);
        assert_eq!(y.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn depthwise_conv_keeps_channels_separate() {
        // groups == channels: each output channel sees only its own input
        let mut conv: Conv2d<f64> = Conv2d::new(&rng(), "c", 2, 2, 1, 2, false).unwrap();
        conv.weight = t64(&[2, 1, 1, 1], &[2.0, 3.0]);
        let tape = Tape::new();
        let x = tape.constant(&t64(&[1, 2, 1, 1], &[5.0, 7.0])).unwrap();
        let y = conv.forward(&tape, x).unwrap().value();
        assert_eq!(y.as_slice(), &[10.0, 21.0]);
    }

    #[test]
    fn batch_norm_train_normalizes_and_seeds_running_stats() {
        let mut bn: BatchNorm2d<f64> = BatchNorm2d::new(1);
        let tape = Tape::new();
        let x = tape.constant(&t64(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = bn.forward(&tape, x, Mode::Train).unwrap().value();
        // mean 2.5, population var 1.25
        let rm = bn.running_mean.as_ref().unwrap().as_slice()[0];
        let rv = bn.running_var.as_ref().unwrap().as_slice()[0];
        assert!((rm - 2.5).abs() < 1e-12);
        assert!((rv - 1.25).abs() < 1e-12);
        let mean_y: f64 = y.as_slice().iter().sum::<f64>() / 4.0;
        assert!(mean_y.abs() < 1e-12);
    }

    #[test]
    fn batch_norm_running_stats_use_ema_after_first_batch() {
        let mut bn: BatchNorm2d<f64> = BatchNorm2d::new(1);
        let tape = Tape::new();
        let x1 = tape.constant(&t64(&[1, 1, 1, 2], &[0.0, 2.0])).unwrap();
        bn.forward(&tape, x1, Mode::Train).unwrap();
        assert!((bn.running_mean.as_ref().unwrap().as_slice()[0] - 1.0).abs() < 1e-12);
        let x2 = tape.constant(&t64(&[1, 1, 1, 2], &[10.0, 12.0])).unwrap();
        bn.forward(&tape, x2, Mode::Train).unwrap();
        // 0.9·1 + 0.1·11 = 2.0
        assert!((bn.running_mean.as_ref().unwrap().as_slice()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_without_stats_is_an_error() {
        let mut bn: BatchNorm2d<f64> = BatchNorm2d::new(1);
        let tape = Tape::new();
        let x = tape.constant(&t64(&[1, 1, 1, 1], &[1.0])).unwrap();
        assert!(matches!(bn.forward(&tape, x, Mode::Eval), Err(Error::Numeric(_))));
    }

    #[test]
    fn dropout_eval_is_identity_train_is_masked_and_scaled() {
        let drop = Dropout::new(0.5);
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(&Tensor::ones(vec![64])).unwrap();
        let mut r = rng();
        let eval = drop.forward(x, Mode::Eval, &mut r).unwrap().value();
        assert!(eval.as_slice().iter().all(|&v| v == 1.0));
        let train = drop.forward(x, Mode::Train, &mut r).unwrap().value();
        assert!(train.as_slice().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(train.as_slice().iter().any(|&v| v == 0.0));
        assert!(train.as_slice().iter().any(|&v| v == 2.0));
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let base = rng();
        let lin: Linear<f64> = Linear::new(&base, "l", 3, 2, true);
        let mut x_rng = base.derive_named("x");
        let x = Tensor::rand_uniform(vec![2, 3], -1.0, 1.0, &mut x_rng);
        let proj = Tensor::rand_uniform(vec![2, 2], 0.2, 1.0, &mut x_rng);
        let params = vec![
            ("weight".to_string(), lin.weight.clone()),
            ("bias".to_string(), lin.bias.clone().unwrap()),
            ("x".to_string(), x),
        ];
        check_gradients(
            |tape, ps| {
                let lin = Linear { weight: ps[0].1.clone(), bias: Some(ps[1].1.clone()) };
                let xv = tape.param(&ps[2].1)?;
                lin.forward(tape, xv)?.mul(tape.constant(&proj)?)?.sum_all()
            },
            &params,
            &GradCheckOpts::default(),
        )
        .unwrap()
        .assert_pass();
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let base = rng();
        for groups in [1usize, 2] {
            let conv: Conv2d<f64> = Conv2d::new(&base, "c", 2, 2, 3, groups, true).unwrap();
            let mut x_rng = base.derive_named("cx");
            let x = Tensor::rand_uniform(vec![1, 2, 4, 4], -1.0, 1.0, &mut x_rng);
            let proj = Tensor::rand_uniform(vec![1, 2, 4, 4], 0.2, 1.0, &mut x_rng);
            let params = vec![
                ("weight".to_string(), conv.weight.clone()),
                ("bias".to_string(), conv.bias.clone().unwrap()),
                ("x".to_string(), x),
            ];
            check_gradients(
                |tape, ps| {
                    let conv = Conv2d { weight: ps[0].1.clone(), bias: Some(ps[1].1.clone()), groups };
                    let xv = tape.param(&ps[2].1)?;
                    conv.forward(tape, xv)?.mul(tape.constant(&proj)?)?.sum_all()
                },
                &params,
                &GradCheckOpts::default(),
            )
            .unwrap()
            .assert_pass();
        }
    }

    #[test]
    fn norm_layer_gradients_match_finite_differences() {
        let base = rng();
        let mut x_rng = base.derive_named("nx");
        let x = Tensor::rand_uniform(vec![4, 1, 2, 3], -2.0, 2.0, &mut x_rng);
        let proj = Tensor::rand_uniform(vec![4, 1, 2, 3], 0.2, 1.0, &mut x_rng);
        // layer norm over trailing dim as [rows, c] view
        let ln_params = vec![
            ("gamma".to_string(), Tensor::rand_uniform(vec![3], 0.5, 1.5, &mut x_rng)),
            ("beta".to_string(), Tensor::rand_uniform(vec![3], -0.5, 0.5, &mut x_rng)),
            ("x".to_string(), x.clone()),
        ];
        check_gradients(
            |tape, ps| {
                let xv = tape.param(&ps[2].1)?.reshape(vec![8, 3])?;
                xv.layer_norm(tape.param(&ps[0].1)?, tape.param(&ps[1].1)?, 1e-5)?
                    .mul(tape.constant(&proj.with_shape(vec![8, 3]).unwrap())?)?
                    .sum_all()
            },
            &ln_params,
            &GradCheckOpts::default(),
        )
        .unwrap()
        .assert_pass();
        // batch norm, train mode
        let bn_params = vec![
            ("gamma".to_string(), Tensor::rand_uniform(vec![1], 0.5, 1.5, &mut x_rng)),
            ("beta".to_string(), Tensor::rand_uniform(vec![1], -0.5, 0.5, &mut x_rng)),
            ("x".to_string(), x),
        ];
        check_gradients(
            |tape, ps| {
                let xv = tape.param(&ps[2].1)?;
                let (y, _, _) = xv.batch_norm_train(tape.param(&ps[0].1)?, tape.param(&ps[1].1)?, 1e-5)?;
                y.mul(tape.constant(&proj)?)?.sum_all()
            },
            &bn_params,
            &GradCheckOpts::default(),
        )
        .unwrap()
        .assert_pass();
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let base = rng();
        let mlp: Mlp<f64> = Mlp::new(&base, "m", 3, 2, 0.0);
        let mut x_rng = base.derive_named("mx");
        let x = Tensor::rand_uniform(vec![2, 3], -1.0, 1.0, &mut x_rng);
        let proj = Tensor::rand_uniform(vec![2, 3], 0.2, 1.0, &mut x_rng);
        let params = vec![
            ("fc1.weight".to_string(), mlp.fc1.weight.clone()),
            ("fc1.bias".to_string(), mlp.fc1.bias.clone().unwrap()),
            ("fc2.weight".to_string(), mlp.fc2.weight.clone()),
            ("fc2.bias".to_string(), mlp.fc2.bias.clone().unwrap()),
            ("x".to_string(), x),
        ];
        check_gradients(
            |tape, ps| {
                let mlp = Mlp {
                    fc1: Linear { weight: ps[0].1.clone(), bias: Some(ps[1].1.clone()) },
                    fc2: Linear { weight: ps[2].1.clone(), bias: Some(ps[3].1.clone()) },
                    drop: Dropout::new(0.0),
                };
                let xv = tape.param(&ps[4].1)?;
                let mut r = CounterRng::new(0);
                mlp.forward(tape, xv, Mode::Train, &mut r)?
                    .mul(tape.constant(&proj)?)?
                    .sum_all()
            },
            &params,
            &GradCheckOpts::default(),
        )
        .unwrap()
        .assert_pass();
    }
}
