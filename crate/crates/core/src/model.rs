//! The full classification network: a four-stage windowed-attention backbone
//! where each of the first three stages is followed by a depthwise-convolution
//! block and a channel-reweighting gate, finished by a small residual head that
//! emits one logit per tissue label.
//!
//! Logit and target columns follow the fixed label order
//! `(interstitial_area, necrosis, non_tumor, tumor)`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{build_shift_mask, cyclic_shift, window_partition, window_reverse, WindowAttention};
use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Dropout, LayerNorm, Linear, Mlp, Mode, VisitFn, VisitMutFn};
use crate::rng::CounterRng;
use crate::tensor::{check_gradients, Element, GradCheckOpts, GradCheckReport, Tape, Tensor, Var};

/// Architecture hyperparameters. `Default` is the full-size network
/// (224×224 inputs, embed width 96); [`ModelConfig::toy`] is a miniature used
/// by fast tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input images are `img_size × img_size` RGB.
    pub img_size: usize,
    /// Side of the square patch flattened into one token.
    pub patch_size: usize,
    /// Channel width C of stage 1; stages run C, 2C, 4C, 8C.
    pub embed_dim: usize,
    /// Attention blocks per stage (each must be even so plain and shifted
    /// blocks alternate).
    pub depths: Vec<usize>,
    /// Attention heads per stage.
    pub heads: Vec<usize>,
    /// Attention window side M.
    pub window: usize,
    /// Feed-forward expansion ratio inside each attention block.
    pub mlp_ratio: usize,
    /// Include the depthwise-convolution block after stages 1–3.
    pub ldc_enabled: bool,
    /// Include the channel-reweighting gate after stages 1–3.
    pub fr_enabled: bool,
    /// Depthwise kernel side (odd).
    pub ldc_kernel: usize,
    /// Bottleneck reduction of the channel gate.
    pub fr_reduction: usize,
    /// Output labels; the loss and label vocabulary fix this at 4.
    pub num_labels: usize,
    /// Dropout probability in the classification head.
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            img_size: 224,
            patch_size: 4,
            embed_dim: 96,
            depths: vec![2, 2, 2, 2],
            heads: vec![3, 6, 12, 24],
            window: 7,
            mlp_ratio: 4,
            ldc_enabled: true,
            fr_enabled: true,
            ldc_kernel: 3,
            fr_reduction: 4,
            num_labels: 4,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    /// Miniature network for tests: 32×32 inputs, width 8, window 2. The final
    /// stage runs on a 1×1 token grid, which exercises the pad-then-crop path.
    pub fn toy() -> Self {
        Self {
            img_size: 32,
            embed_dim: 8,
            heads: vec![1, 2, 4, 8],
            window: 2,
            ..Self::default()
        }
    }

    /// Tokens per row/column after patch embedding.
    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    /// Channel width of stage `i` (0-based).
    pub fn stage_dim(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    /// Token-grid side of stage `i` (0-based).
    pub fn stage_side(&self, i: usize) -> usize {
        self.grid() >> i
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.img_size == 0 || self.embed_dim == 0 || self.window == 0 {
            return fail("img_size, patch_size, embed_dim and window must be positive".into());
        }
        if self.img_size % self.patch_size != 0 {
            return fail(format!(
                "patch_size {} must divide img_size {}",
                self.patch_size, self.img_size
            ));
        }
        if self.grid() % 8 != 0 {
            return fail(format!(
                "token grid {} must be divisible by 8 so three downsamplings stay even",
                self.grid()
            ));
        }
        if self.depths.len() != 4 || self.heads.len() != 4 {
            return fail("depths and heads must list exactly 4 stages".into());
        }
        for (i, &d) in self.depths.iter().enumerate() {
            if d == 0 || d % 2 != 0 {
                return fail(format!("depths[{i}] = {d}; each stage depth must be even and positive"));
            }
        }
        for i in 0..4 {
            let dim = self.stage_dim(i);
            if self.heads[i] == 0 || dim % self.heads[i] != 0 {
                return fail(format!(
                    "stage {} width {} not divisible by heads[{}] = {}",
                    i + 1,
                    dim,
                    i,
                    self.heads[i]
                ));
            }
            if self.fr_enabled && i < 3 && (self.fr_reduction == 0 || dim % self.fr_reduction != 0) {
                return fail(format!(
                    "stage {} width {} not divisible by fr_reduction {}",
                    i + 1,
                    dim,
                    self.fr_reduction
                ));
            }
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be at least 1".into());
        }
        if self.ldc_kernel % 2 == 0 {
            return fail(format!("ldc_kernel {} must be odd", self.ldc_kernel));
        }
        if self.num_labels != 4 {
            return fail(format!(
                "num_labels is fixed at 4 by the label vocabulary, got {}",
                self.num_labels
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

/// `[N, side², C]` tokens → `[N, C, side, side]` feature map.
fn seq_to_img<'t, E: Element>(x: Var<'t, E>, side: usize) -> Result<Var<'t, E>> {
    let s = x.shape();
    let (n, c) = (s[0], s[2]);
    x.reshape(vec![n, side, side, c])?.permute(&[0, 3, 1, 2])
}

/// `[N, C, H, W]` feature map → `[N, H·W, C]` tokens.
fn img_to_seq<'t, E: Element>(x: Var<'t, E>) -> Result<Var<'t, E>> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    x.permute(&[0, 2, 3, 1])?.reshape(vec![n, h * w, c])
}

/// Flattens non-overlapping `patch × patch` RGB blocks into tokens and
/// projects them to the embedding width, with a layer norm after projection.
struct PatchEmbed<E: Element> {
    proj: Linear<E>,
    norm: LayerNorm<E>,
    patch: usize,
}

impl<E: Element> PatchEmbed<E> {
    fn new(base: &CounterRng, name: &str, patch: usize, dim: usize) -> Self {
        Self {
            proj: Linear::new(base, &join(name, "proj"), patch * patch * 3, dim, true),
            norm: LayerNorm::new(dim),
            patch,
        }
    }

    fn forward<'t>(&self, tape: &'t Tape<E>, img: Var<'t, E>) -> Result<Var<'t, E>> {
        let s = img.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let p = self.patch;
        let (gh, gw) = (h / p, w / p);
        let x = img.permute(&[0, 2, 3, 1])?;
        let x = x.reshape(vec![n, gh, p, gw, p, c])?;
        let x = x.permute(&[0, 1, 3, 2, 4, 5])?;
        let x = x.reshape(vec![n, gh * gw, p * p * c])?;
        let x = self.proj.forward(tape, x)?;
        self.norm.forward(tape, x)
    }

    fn visit(&self, prefix: &str, f: &mut VisitFn<'_, E>) {
        self.proj.visit(&join(prefix, "proj"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, E>) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// One attention block: pre-norm windowed attention with a residual skip, then
/// a pre-norm feed-forward with a residual skip. A nonzero `shift` rolls the
/// token grid before windowing so neighbouring windows exchange information;
/// grids not divisible by the window are zero-padded and cropped afterwards.
struct SwinBlock<E: Element> {
    norm1: LayerNorm<E>,
    attn: WindowAttention<E>,
    norm2: LayerNorm<E>,
    mlp: Mlp<E>,
    window: usize,
    shift: usize,
}

impl<E: Element> SwinBlock<E> {
    fn new(
        base: &CounterRng,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(dim),
            attn: WindowAttention::new(base, &join(name, "attn"), dim, heads, window)?,
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(base, &join(name, "mlp"), dim, mlp_ratio, 0.0),
            window,
            shift,
        })
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape<E>,
        x: Var<'t, E>,
        side: usize,
        mask: Option<&Tensor<E>>,
        mode: Mode,
        rng: &mut CounterRng,
    ) -> Result<Var<'t, E>> {
        let s = x.shape();
        let (n, l, c) = (s[0], s[1], s[2]);
        if l != side * side {
            return Err(Error::shape(
                "swin_block",
                format!("token count {l} does not match grid side {side}"),
            ));
        }
        let pad = (self.window - side % self.window) % self.window;
        let padded = side + pad;

        let h = self.norm1.forward(tape, x)?;
        let h = h.reshape(vec![n, side, side, c])?;
        let h = h.pad_hw(pad, pad)?;
        let h = cyclic_shift(h, self.shift as isize)?;
        let h = window_partition(h, self.window)?;
        let h = self.attn.forward(tape, h, mask)?;
        let h = window_reverse(h, self.window, n, padded, padded)?;
        let h = cyclic_shift(h, -(self.shift as isize))?;
        let h = if pad > 0 {
            h.narrow(1, 0, side)?.narrow(2, 0, side)?
        } else {
            h
        };
        let h = h.reshape(vec![n, l, c])?;
        let x = x.add(h)?;

        let y = self.norm2.forward(tape, x)?;
        let y = self.mlp.forward(tape, y, mode, rng)?;
        x.add(y)
    }

    fn visit(&self, prefix: &str, f: &mut VisitFn<'_, E>) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, E>) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Inverted-bottleneck convolution block applied to the token grid: pointwise
/// expand to 4× width, depthwise k×k, pointwise project back, each followed by
/// batch norm (hard-swish after the first two), with a residual skip.
struct Ldc<E: Element> {
    expand: Conv2d<E>,
    bn1: BatchNorm2d<E>,
    depthwise: Conv2d<E>,
    bn2: BatchNorm2d<E>,
    project: Conv2d<E>,
    bn3: BatchNorm2d<E>,
}

impl<E: Element> Ldc<E> {
    fn new(base: &CounterRng, name: &str, dim: usize, kernel: usize) -> Result<Self> {
        let hidden = 4 * dim;
        Ok(Self {
            expand: Conv2d::new(base, &join(name, "expand"), dim, hidden, 1, 1, false)?,
            bn1: BatchNorm2d::new(hidden),
            depthwise: Conv2d::new(base, &join(name, "depthwise"), hidden, hidden, kernel, hidden, false)?,
            bn2: BatchNorm2d::new(hidden),
            project: Conv2d::new(base, &join(name, "project"), hidden, dim, 1, 1, false)?,
            bn3: BatchNorm2d::new(dim),
        })
    }

    fn forward<'t>(
        &mut self,
        tape: &'t Tape<E>,
        x: Var<'t, E>,
        side: usize,
        mode: Mode,
    ) -> Result<Var<'t, E>> {
        let img = seq_to_img(x, side)?;
        let y = self.expand.forward(tape, img)?;
        let y = self.bn1.forward(tape, y, mode)?.h_swish()?;
        let y = self.depthwise.forward(tape, y)?;
        let y = self.bn2.forward(tape, y, mode)?.h_swish()?;
        let y = self.project.forward(tape, y)?;
        let y = self.bn3.forward(tape, y, mode)?;
        img_to_seq(y.add(img)?)
    }

    fn visit(&self, prefix: &str, f: &mut VisitFn<'_, E>) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.depthwise.visit(&join(prefix, "depthwise"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.project.visit(&join(prefix, "project"), f);
        self.bn3.visit(&join(prefix, "bn3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, E>) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.depthwise.visit_mut(&join(prefix, "depthwise"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
        self.bn3.visit_mut(&join(prefix, "bn3"), f);
    }

    fn visit_bn_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut BatchNorm2d<E>)) {
        f(&join(prefix, "bn1"), &mut self.bn1);
        f(&join(prefix, "bn2"), &mut self.bn2);
        f(&join(prefix, "bn3"), &mut self.bn3);
    }
}

/// Squeeze-and-excitation channel gate: global average pool, bottleneck MLP
/// (ReLU then sigmoid), channel-wise multiply. Gates are strictly inside
/// (0, 1), so no channel is ever fully erased or amplified.
struct Fr<E: Element> {
    fc1: Linear<E>,
    fc2: Linear<E>,
}

impl<E: Element> Fr<E> {
    fn new(base: &CounterRng, name: &str, dim: usize, reduction: usize) -> Self {
        Self {
            fc1: Linear::new(base, &join(name, "fc1"), dim, dim / reduction, true),
            fc2: Linear::new(base, &join(name, "fc2"), dim / reduction, dim, true),
        }
    }

    /// Per-sample channel gates for a `[N, C, H, W]` feature map.
    fn gate<'t>(&self, tape: &'t Tape<E>, fmap: Var<'t, E>) -> Result<Var<'t, E>> {
        let s = fmap.global_avg_pool()?;
        let g = self.fc1.forward(tape, s)?.relu()?;
        self.fc2.forward(tape, g)?.sigmoid()
    }

    fn forward<'t>(&self, tape: &'t Tape<E>, fmap: Var<'t, E>) -> Result<Var<'t, E>> {
        let g = self.gate(tape, fmap)?;
        fmap.mul_channel(g)
    }

    fn visit(&self, prefix: &str, f: &mut VisitFn<'_, E>) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, E>) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Downsampling between stages: concatenate each 2×2 block of tokens
/// (row-major within the block) into 4C channels, layer-norm, and project to
/// 2C. Halves the grid side, quarters the token count, doubles the width.
struct PatchMerging<E: Element> {
    norm: LayerNorm<E>,
    reduce: Linear<E>,
}

impl<E: Element> PatchMerging<E> {
    fn new(base: &CounterRng, name: &str, dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(4 * dim),
            reduce: Linear::new(base, &join(name, "reduce"), 4 * dim, 2 * dim, false),
        }
    }

    fn forward<'t>(&self, tape: &'t Tape<E>, x: Var<'t, E>, side: usize) -> Result<Var<'t, E>> {
        let s = x.shape();
        let (n, c) = (s[0], s[2]);
        if side % 2 != 0 {
            return Err(Error::shape("patch_merging", format!("odd grid side {side}")));
        }
        let h = side / 2;
        let x = x.reshape(vec![n, h, 2, h, 2, c])?;
        let x = x.permute(&[0, 1, 3, 2, 4, 5])?;
        let x = x.reshape(vec![n, h * h, 4 * c])?;
        let x = self.norm.forward(tape, x)?;
        self.reduce.forward(tape, x)
    }

    fn visit(&self, prefix: &str, f: &mut VisitFn<'_, E>) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.reduce.visit(&join(prefix, "reduce"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, E>) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
    }
}

/// One residual unit of the head: two 3×3 conv + batch-norm + ReLU rounds on
/// the branch, added back onto the identity skip.
struct ResUnit<E: Element> {
    conv1: Conv2d<E>,
    bn1: BatchNorm2d<E>,
    conv2: Conv2d<E>,
    bn2: BatchNorm2d<E>,
}

impl<E: Element> ResUnit<E> {
    fn new(base: &CounterRng, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(base, &join(name, "conv1"), dim, dim, 3, 1, false)?,
            bn1: BatchNorm2d::new(dim),
            conv2: Conv2d::new(base, &join(name, "conv2"), dim, dim, 3, 1, false)?,
            bn2: BatchNorm2d::new(dim),
        })
    }

    fn forward<'t>(&mut self, tape: &'t Tape<E>, x: Var<'t, E>, mode: Mode) -> Result<Var<'t, E>> {
        let f = self.conv1.forward(tape, x)?;
        let f = self.bn1.forward(tape, f, mode)?.relu()?;
        let f = self.conv2.forward(tape, f)?;
        let f = self.bn2.forward(tape, f, mode)?.relu()?;
        x.add(f)
    }

    fn visit(&self, prefix: &str, f: &mut VisitFn<'_, E>) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, E>) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
    }

    fn visit_bn_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut BatchNorm2d<E>)) {
        f(&join(prefix, "bn1"), &mut self.bn1);
        f(&join(prefix, "bn2"), &mut self.bn2);
    }
}

/// Classification head: two residual conv units on the final 8C feature map,
/// global average pool, dropout, and a linear map to the label logits.
struct ResHead<E: Element> {
    unit1: ResUnit<E>,
    unit2: ResUnit<E>,
    drop: Dropout,
    fc: Linear<E>,
}

impl<E: Element> ResHead<E> {
    fn new(base: &CounterRng, name: &str, dim: usize, labels: usize, drop_p: f64) -> Result<Self> {
        Ok(Self {
            unit1: ResUnit::new(base, &join(name, "unit1"), dim)?,
            unit2: ResUnit::new(base, &join(name, "unit2"), dim)?,
            drop: Dropout::new(drop_p),
            fc: Linear::new(base, &join(name, "fc"), dim, labels, true),
        })
    }

    fn forward<'t>(
        &mut self,
        tape: &'t Tape<E>,
        tokens: Var<'t, E>,
        side: usize,
        mode: Mode,
        rng: &mut CounterRng,
    ) -> Result<Var<'t, E>> {
        let img = seq_to_img(tokens, side)?;
        let y = self.unit1.forward(tape, img, mode)?;
        let y = self.unit2.forward(tape, y, mode)?;
        let y = y.global_avg_pool()?;
        let y = self.drop.forward(y, mode, rng)?;
        self.fc.forward(tape, y)
    }

    fn visit(&self, prefix: &str, f: &mut VisitFn<'_, E>) {
        self.unit1.visit(&join(prefix, "unit1"), f);
        self.unit2.visit(&join(prefix, "unit2"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, E>) {
        self.unit1.visit_mut(&join(prefix, "unit1"), f);
        self.unit2.visit_mut(&join(prefix, "unit2"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }

    fn visit_bn_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut BatchNorm2d<E>)) {
        self.unit1.visit_bn_mut(&join(prefix, "unit1"), f);
        self.unit2.visit_bn_mut(&join(prefix, "unit2"), f);
    }
}

/// One backbone stage: attention blocks (plain/shifted alternating), then the
/// optional convolution block and channel gate, then downsampling (absent in
/// the last stage). The shift mask is precomputed once for the padded grid.
struct Stage<E: Element> {
    blocks: Vec<SwinBlock<E>>,
    ldc: Option<Ldc<E>>,
    fr: Option<Fr<E>>,
    merge: Option<PatchMerging<E>>,
    mask: Option<Tensor<E>>,
    side: usize,
    dim: usize,
}

impl<E: Element> Stage<E> {
    fn new(base: &CounterRng, name: &str, cfg: &ModelConfig, index: usize) -> Result<Self> {
        let dim = cfg.stage_dim(index);
        let side = cfg.stage_side(index);
        let window = cfg.window;
        let padded = side.div_ceil(window) * window;
        // A single-window grid has no neighbouring windows to connect, so the
        // shifted blocks degenerate to plain ones.
        let shift = if padded <= window { 0 } else { window / 2 };

        let mut blocks = Vec::with_capacity(cfg.depths[index]);
        for j in 0..cfg.depths[index] {
            let block_shift = if j % 2 == 1 { shift } else { 0 };
            blocks.push(SwinBlock::new(
                base,
                &join(name, &format!("block{j}")),
                dim,
                cfg.heads[index],
                window,
                block_shift,
                cfg.mlp_ratio,
            )?);
        }
        let mask = if shift > 0 {
            Some(build_shift_mask::<E>(padded, padded, window, shift)?)
        } else {
            None
        };
        let last = index == 3;
        Ok(Self {
            blocks,
            ldc: (cfg.ldc_enabled && !last)
                .then(|| Ldc::new(base, &join(name, "ldc"), dim, cfg.ldc_kernel))
                .transpose()?,
            fr: (cfg.fr_enabled && !last).then(|| Fr::new(base, &join(name, "fr"), dim, cfg.fr_reduction)),
            merge: (!last).then(|| PatchMerging::new(base, &join(name, "merge"), dim)),
            mask,
            side,
            dim,
        })
    }

    fn forward<'t>(
        &mut self,
        tape: &'t Tape<E>,
        mut x: Var<'t, E>,
        mode: Mode,
        rng: &mut CounterRng,
    ) -> Result<Var<'t, E>> {
        for b in &self.blocks {
            let mask = if b.shift > 0 { self.mask.as_ref() } else { None };
            x = b.forward(tape, x, self.side, mask, mode, rng)?;
        }
        if let Some(ldc) = self.ldc.as_mut() {
            x = ldc.forward(tape, x, self.side, mode)?;
        }
        if let Some(fr) = &self.fr {
            let img = seq_to_img(x, self.side)?;
            x = img_to_seq(fr.forward(tape, img)?)?;
        }
        if let Some(merge) = &self.merge {
            x = merge.forward(tape, x, self.side)?;
        }
        Ok(x)
    }

    fn visit(&self, prefix: &str, f: &mut VisitFn<'_, E>) {
        for (j, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{j}")), f);
        }
        if let Some(ldc) = &self.ldc {
            ldc.visit(&join(prefix, "ldc"), f);
        }
        if let Some(fr) = &self.fr {
            fr.visit(&join(prefix, "fr"), f);
        }
        if let Some(merge) = &self.merge {
            merge.visit(&join(prefix, "merge"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMutFn<'_, E>) {
        for (j, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{j}")), f);
        }
        if let Some(ldc) = self.ldc.as_mut() {
            ldc.visit_mut(&join(prefix, "ldc"), f);
        }
        if let Some(fr) = self.fr.as_mut() {
            fr.visit_mut(&join(prefix, "fr"), f);
        }
        if let Some(merge) = self.merge.as_mut() {
            merge.visit_mut(&join(prefix, "merge"), f);
        }
    }

    fn visit_bn_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut BatchNorm2d<E>)) {
        if let Some(ldc) = self.ldc.as_mut() {
            ldc.visit_bn_mut(&join(prefix, "ldc"), f);
        }
    }
}

/// Token count and channel width observed at one stage of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShape {
    pub tokens: usize,
    pub dim: usize,
}

/// The assembled network. Forward passes record batch-norm running statistics
/// in train mode, so the model is `&mut` during any forward.
pub struct LdcsfModel<E: Element> {
    cfg: ModelConfig,
    embed: PatchEmbed<E>,
    stages: Vec<Stage<E>>,
    head: ResHead<E>,
}

impl<E: Element> LdcsfModel<E> {
    /// Build a freshly initialised model. Every parameter draws from an RNG
    /// stream derived from `seed` and the parameter's own name, so two models
    /// built from the same seed agree parameter-by-parameter even when one of
    /// them omits optional blocks.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let base = CounterRng::new(seed).derive_named("init");
        let embed = PatchEmbed::new(&base, "patch_embed", cfg.patch_size, cfg.embed_dim);
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            stages.push(Stage::new(&base, &format!("stage{}", i + 1), &cfg, i)?);
        }
        let head = ResHead::new(
            &base,
            "head",
            cfg.embed_dim * 8,
            cfg.num_labels,
            cfg.dropout_rate,
        )?;
        Ok(Self { cfg, embed, stages, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Forward pass from an `[N, 3, S, S]` image batch to `[N, 4]` logits.
    pub fn forward<'t>(
        &mut self,
        tape: &'t Tape<E>,
        img: &Tensor<E>,
        mode: Mode,
        rng: &mut CounterRng,
    ) -> Result<Var<'t, E>> {
        self.forward_traced(tape, img, mode, rng).map(|(v, _)| v)
    }

    /// Forward pass that also reports the token count and width of each stage.
    pub fn forward_traced<'t>(
        &mut self,
        tape: &'t Tape<E>,
        img: &Tensor<E>,
        mode: Mode,
        rng: &mut CounterRng,
    ) -> Result<(Var<'t, E>, Vec<StageShape>)> {
        let s = img.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.cfg.img_size || s[3] != self.cfg.img_size {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "need [N, 3, {0}, {0}] input, got {s:?}",
                    self.cfg.img_size
                ),
            ));
        }
        let x = tape.constant(img)?;
        let mut x = self.embed.forward(tape, x)?;
        let mut trace = Vec::with_capacity(4);
        for stage in self.stages.iter_mut() {
            trace.push(StageShape { tokens: stage.side * stage.side, dim: stage.dim });
            x = stage.forward(tape, x, mode, rng)?;
        }
        let final_side = self.cfg.stage_side(3);
        let logits = self.head.forward(tape, x, final_side, mode, rng)?;
        Ok((logits, trace))
    }

    pub fn visit(&self, f: &mut VisitFn<'_, E>) {
        self.embed.visit("patch_embed", f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&format!("stage{}", i + 1), f);
        }
        self.head.visit("head", f);
    }

    pub fn visit_mut(&mut self, f: &mut VisitMutFn<'_, E>) {
        self.embed.visit_mut("patch_embed", f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&format!("stage{}", i + 1), f);
        }
        self.head.visit_mut("head", f);
    }

    fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&str, &mut BatchNorm2d<E>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_bn_mut(&format!("stage{}", i + 1), f);
        }
        self.head.visit_bn_mut("head", f);
    }

    /// Names of all trainable parameters, in visit order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _, trainable| {
            if trainable {
                names.push(name.to_string());
            }
        });
        names
    }

    /// Total number of trainable scalar parameters.
    pub fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, trainable| {
            if trainable {
                n += t.numel();
            }
        });
        n
    }

    /// Snapshot of all trainable parameters as owned `(name, tensor)` pairs.
    pub fn trainable_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t, trainable| {
            if trainable {
                out.push((name.to_string(), t.clone()));
            }
        });
        out
    }

    /// Overwrite parameters by name. Unknown names are an error, as are shape
    /// mismatches; parameters absent from `values` keep their current data.
    pub fn load_params(&mut self, values: &HashMap<String, Tensor<E>>) -> Result<()> {
        let mut remaining: HashMap<&String, &Tensor<E>> = values.iter().collect();
        let mut problems = Vec::new();
        self.visit_mut(&mut |name, t, _| {
            if let Some(v) = remaining.remove(&name.to_string()) {
                if v.shape() != t.shape() {
                    problems.push(format!("{name}: expected shape {:?}, got {:?}", t.shape(), v.shape()));
                } else {
                    *t = v.clone();
                }
            }
        });
        for (name, _) in remaining {
            problems.push(format!("{name}: no such parameter"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// The four per-label loss terms and their sum, all on the same tape.
///
/// `total` is built by summing in the fixed order interstitial → non-tumor →
/// tumor → necrosis, and the reported components are the very scalars that
/// formed the sum, so `total == l_i + l_m + l_t + l_n` holds bit-exactly.
pub struct LossTerms<'t, E: Element> {
    pub total: Var<'t, E>,
    /// Interstitial-area term (logit column 0).
    pub l_i: Var<'t, E>,
    /// Necrosis term (logit column 1).
    pub l_n: Var<'t, E>,
    /// Non-tumor term (logit column 2).
    pub l_m: Var<'t, E>,
    /// Tumor term (logit column 3).
    pub l_t: Var<'t, E>,
}

/// Multi-label loss: per-column mean binary cross-entropy of the logits
/// against multi-hot targets, summed over the four labels.
pub fn multilabel_loss<'t, E: Element>(
    logits: Var<'t, E>,
    targets: &Tensor<E>,
) -> Result<LossTerms<'t, E>> {
    let per_label = logits.bce_per_label(targets)?;
    let l_i = per_label.index_scalar(0)?;
    let l_n = per_label.index_scalar(1)?;
    let l_m = per_label.index_scalar(2)?;
    let l_t = per_label.index_scalar(3)?;
    let total = l_i.add(l_m)?.add(l_t)?.add(l_n)?;
    Ok(LossTerms { total, l_i, l_n, l_m, l_t })
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
    /// Byte length.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    /// The first `model_entries` manifest rows are model tensors; the rest
    /// belong to the caller (e.g. optimizer state).
    model_entries: usize,
    manifest: Vec<ManifestEntry>,
    extra_meta: Option<serde_json::Value>,
}

/// An extra tensor stored alongside the model: `(name, shape, values)`.
pub type ExtraTensor = (String, Vec<usize>, Vec<f32>);

/// A checkpoint read back from disk.
pub struct LoadedCheckpoint<E: Element> {
    pub model: LdcsfModel<E>,
    pub extras: Vec<ExtraTensor>,
    pub extra_meta: Option<serde_json::Value>,
}

/// Write the model (and optional caller-owned tensors such as optimizer
/// velocities) to `path`. Layout: an 8-byte little-endian header length, a
/// JSON header with the config and tensor manifest, then raw little-endian
/// f32 data. Values already in f32 round-trip bit-exactly.
pub fn save_checkpoint<E: Element>(
    path: impl AsRef<Path>,
    model: &LdcsfModel<E>,
    extras: &[ExtraTensor],
    extra_meta: Option<serde_json::Value>,
) -> Result<()> {
    let mut entries: Vec<ExtraTensor> = Vec::new();
    model.visit(&mut |name, t, _| {
        entries.push((name.to_string(), t.shape().to_vec(), t.to_f32_vec()));
    });
    let model_entries = entries.len();
    entries.extend(extras.iter().cloned());

    let mut manifest = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for (name, shape, data) in &entries {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        let len = (data.len() * 4) as u64;
        manifest.push(ManifestEntry { name: name.clone(), shape: shape.clone(), offset, len });
        offset += len;
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: model.cfg.clone(),
        model_entries,
        manifest,
        extra_meta,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, _, data) in &entries {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`], rebuilding the model from
/// the stored config and installing every stored tensor (including batch-norm
/// running statistics when present).
pub fn load_checkpoint<E: Element>(path: impl AsRef<Path>) -> Result<LoadedCheckpoint<E>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("file shorter than its header length field".into()));
    }
    let hlen = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let data_start = 8usize.checked_add(hlen).filter(|&e| e <= bytes.len());
    let Some(data_start) = data_start else {
        return Err(Error::Checkpoint("header length field exceeds file size".into()));
    };
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..data_start])?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            header.format_version
        )));
    }
    let data = &bytes[data_start..];
    let decode = |e: &ManifestEntry| -> Result<Vec<f32>> {
        let (o, l) = (e.offset as usize, e.len as usize);
        if l % 4 != 0 || o.checked_add(l).map_or(true, |end| end > data.len()) {
            return Err(Error::Checkpoint(format!("{}: data range out of bounds", e.name)));
        }
        Ok(data[o..o + l]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    if header.model_entries > header.manifest.len() {
        return Err(Error::Checkpoint("model_entries exceeds manifest length".into()));
    }

    let mut model = LdcsfModel::<E>::new(header.config.clone(), 0)?;
    let mut by_name: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    for e in &header.manifest[..header.model_entries] {
        by_name.insert(e.name.clone(), (e.shape.clone(), decode(e)?));
    }
    let mut problems = Vec::new();
    model.visit_mut(&mut |name, t, _| match by_name.remove(name) {
        Some((shape, values)) => {
            if shape != t.shape() {
                problems.push(format!("{name}: shape {:?} vs {:?}", shape, t.shape()));
            } else if t.set_data(values.iter().map(|&v| E::from_f32(v)).collect()).is_err() {
                problems.push(format!("{name}: length mismatch"));
            }
        }
        None => problems.push(format!("{name}: missing from checkpoint")),
    });
    // A fresh model has no batch-norm running statistics, so stored ones are
    // still unclaimed; install them directly.
    model.visit_bn_mut(&mut |name, bn| {
        let mean = by_name.remove(&join(name, "running_mean"));
        let var = by_name.remove(&join(name, "running_var"));
        match (mean, var) {
            (Some((ms, mv)), Some((vs, vv))) => {
                let mean = Tensor::new(ms, mv.iter().map(|&v| E::from_f32(v)).collect());
                let var = Tensor::new(vs, vv.iter().map(|&v| E::from_f32(v)).collect());
                match (mean, var) {
                    (Ok(m), Ok(v)) => bn.set_running(m, v),
                    _ => problems.push(format!("{name}: malformed running statistics")),
                }
            }
            (None, None) => {}
            _ => problems.push(format!("{name}: running statistics half-missing")),
        }
    });
    for name in by_name.keys() {
        problems.push(format!("{name}: not a model tensor"));
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(problems.join("; ")));
    }
    let extras = header.manifest[header.model_entries..]
        .iter()
        .map(|e| Ok((e.name.clone(), e.shape.clone(), decode(e)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedCheckpoint { model, extras, extra_meta: header.extra_meta })
}

/// Central-difference gradient verification over every differentiable layer
/// kind in the network, optionally finishing with the miniature end-to-end
/// model (`include_end_to_end`, the most expensive row by far).
///
/// Each row names a layer kind and carries its comparison report; rows run at
/// f64 precision. Layers are rebuilt from fixed seeds inside the comparison
/// closures, and dropout draws from a stream rebuilt per call, so every
/// re-execution of a perturbed forward pass sees identical masks and initial
/// values. The per-layer rows also treat the layer input as a checked
/// parameter, which exercises each operation's input-gradient path; the
/// end-to-end row checks model parameters only, since whole-model forward
/// holds the image constant.
///
/// Shared by the test suite and the `gradcheck` command-line table.
pub fn gradient_suite(include_end_to_end: bool) -> Result<Vec<(String, GradCheckReport)>> {
    fn input(label: &str, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::rand_uniform(shape, lo, hi, &mut CounterRng::new(5).derive_named(label))
    }

    fn seed_rng(label: &str) -> CounterRng {
        CounterRng::new(17).derive_named(label)
    }

    /// Boilerplate for one row: collect `input` plus the layer's trainable
    /// tensors as named parameters, then let the checker rebuild the layer,
    /// install each perturbed parameter set by name, and reduce the layer
    /// output to a scalar.
    fn layer_report<L>(
        label: &str,
        input: Tensor<f64>,
        build: impl Fn() -> Result<L>,
        visit: impl Fn(&L, &mut VisitFn<'_, f64>),
        install: impl Fn(&mut L, &mut VisitMutFn<'_, f64>),
        forward: impl for<'t> Fn(&mut L, &'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
        opts: &GradCheckOpts,
    ) -> Result<(String, GradCheckReport)> {
        let proto = build()?;
        let mut params = vec![("input".to_string(), input)];
        visit(&proto, &mut |name, t, trainable| {
            if trainable {
                params.push((name.to_string(), t.clone()));
            }
        });
        let report = check_gradients(
            |tape, ps| {
                let mut layer = build()?;
                let mut by_name: HashMap<&str, &Tensor<f64>> =
                    ps[1..].iter().map(|(n, t)| (n.as_str(), t)).collect();
                install(&mut layer, &mut |name, t, _| {
                    if let Some(v) = by_name.remove(name) {
                        *t = v.clone();
                    }
                });
                let x = tape.param(&ps[0].1)?;
                forward(&mut layer, tape, x)?.sum_all()
            },
            &params,
            opts,
        )?;
        Ok((label.to_string(), report))
    }

    let opts = GradCheckOpts::default();
    let mut rows = Vec::new();

    rows.push(layer_report(
        "linear",
        input("linear", vec![3, 5], -1.0, 1.0),
        || Ok(Linear::<f64>::new(&seed_rng("linear"), "linear", 5, 4, true)),
        |l, f| l.visit("linear", f),
        |l, f| l.visit_mut("linear", f),
        |l, tape, x| l.forward(tape, x),
        &opts,
    )?);

    rows.push(layer_report(
        "conv2d",
        input("conv2d", vec![2, 3, 4, 4], -1.0, 1.0),
        || Conv2d::<f64>::new(&seed_rng("conv2d"), "conv", 3, 4, 3, 1, true),
        |l, f| l.visit("conv", f),
        |l, f| l.visit_mut("conv", f),
        |l, tape, x| l.forward(tape, x),
        &opts,
    )?);

    rows.push(layer_report(
        "conv2d_depthwise",
        input("conv2d_depthwise", vec![2, 4, 4, 4], -1.0, 1.0),
        || Conv2d::<f64>::new(&seed_rng("conv2d_depthwise"), "dw", 4, 4, 3, 4, false),
        |l, f| l.visit("dw", f),
        |l, f| l.visit_mut("dw", f),
        |l, tape, x| l.forward(tape, x),
        &opts,
    )?);

    rows.push(layer_report(
        "batch_norm",
        input("batch_norm", vec![2, 3, 2, 2], -1.0, 1.0),
        || Ok(BatchNorm2d::<f64>::new(3)),
        |l, f| l.visit("bn", f),
        |l, f| l.visit_mut("bn", f),
        |l, tape, x| l.forward(tape, x, Mode::Train),
        &opts,
    )?);

    rows.push(layer_report(
        "layer_norm",
        input("layer_norm", vec![2, 3, 6], -1.0, 1.0),
        || Ok(LayerNorm::<f64>::new(6)),
        |l, f| l.visit("ln", f),
        |l, f| l.visit_mut("ln", f),
        |l, tape, x| l.forward(tape, x),
        &opts,
    )?);

    rows.push(layer_report(
        "gelu_mlp",
        input("gelu_mlp", vec![2, 3, 6], -1.0, 1.0),
        || Ok(Mlp::<f64>::new(&seed_rng("gelu_mlp"), "mlp", 6, 4, 0.0)),
        |l, f| l.visit("mlp", f),
        |l, f| l.visit_mut("mlp", f),
        |l, tape, x| l.forward(tape, x, Mode::Train, &mut CounterRng::new(0)),
        &opts,
    )?);

    let mask = build_shift_mask::<f64>(4, 4, 2, 1)?;
    rows.push(layer_report(
        "window_attention",
        input("window_attention", vec![4, 4, 6], -1.0, 1.0),
        || WindowAttention::<f64>::new(&seed_rng("window_attention"), "attn", 6, 3, 2),
        |l, f| l.visit("attn", f),
        |l, f| l.visit_mut("attn", f),
        move |l, tape, x| l.forward(tape, x, Some(&mask)),
        &opts,
    )?);

    rows.push(layer_report(
        "ldc",
        input("ldc", vec![2, 4, 3], -1.0, 1.0),
        || Ldc::<f64>::new(&seed_rng("ldc"), "ldc", 3, 3),
        |l, f| l.visit("ldc", f),
        |l, f| l.visit_mut("ldc", f),
        |l, tape, x| l.forward(tape, x, 2, Mode::Train),
        &opts,
    )?);

    rows.push(layer_report(
        "fr",
        input("fr", vec![2, 8, 2, 2], -1.0, 1.0),
        || Ok(Fr::<f64>::new(&seed_rng("fr"), "fr", 8, 4)),
        |l, f| l.visit("fr", f),
        |l, f| l.visit_mut("fr", f),
        |l, tape, x| l.forward(tape, x),
        &opts,
    )?);

    rows.push(layer_report(
        "patch_merging",
        input("patch_merging", vec![1, 16, 3], -1.0, 1.0),
        || Ok(PatchMerging::<f64>::new(&seed_rng("patch_merging"), "merge", 3)),
        |l, f| l.visit("merge", f),
        |l, f| l.visit_mut("merge", f),
        |l, tape, x| l.forward(tape, x, 4),
        &opts,
    )?);

    rows.push(layer_report(
        "patch_embed",
        input("patch_embed", vec![1, 3, 8, 8], 0.0, 1.0),
        || Ok(PatchEmbed::<f64>::new(&seed_rng("patch_embed"), "embed", 4, 6)),
        |l, f| l.visit("embed", f),
        |l, f| l.visit_mut("embed", f),
        |l, tape, x| l.forward(tape, x),
        &opts,
    )?);

    rows.push(layer_report(
        "res_head",
        input("res_head", vec![1, 4, 6], -1.0, 1.0),
        || ResHead::<f64>::new(&seed_rng("res_head"), "head", 6, 4, 0.0),
        |l, f| l.visit("head", f),
        |l, f| l.visit_mut("head", f),
        |l, tape, x| l.forward(tape, x, 2, Mode::Train, &mut CounterRng::new(0)),
        &opts,
    )?);

    // End to end: the miniature model, all parameter tensors, two sampled
    // coordinates each, against the four-term training loss. The final stage
    // runs on a 1×1 token grid, so its batch norms normalise over only
    // `batch` values; a batch of 8 and a smaller step keep the central
    // difference inside the region where the loss is locally quadratic.
    if include_end_to_end {
        let cfg = ModelConfig::toy();
        let model = LdcsfModel::<f64>::new(cfg.clone(), 3)?;
        let params = model.trainable_params();
        let image = input("toy_model_image", vec![8, 3, cfg.img_size, cfg.img_size], 0.0, 1.0);
        let mut target_rows = Vec::with_capacity(32);
        for i in 0..8 {
            for l in 0..4 {
                target_rows.push(if (i + l) % 2 == 0 { 1.0 } else { 0.0 });
            }
        }
        let targets = Tensor::from_f64s(vec![8, 4], &target_rows)?;
        let e2e_opts =
            GradCheckOpts { max_per_param: 2, h: 1e-6, ..GradCheckOpts::default() };
        let report = check_gradients(
            |tape, ps| {
                let mut m = LdcsfModel::<f64>::new(cfg.clone(), 3)?;
                let values: HashMap<String, Tensor<f64>> = ps.iter().cloned().collect();
                m.load_params(&values)?;
                let logits = m.forward(tape, &image, Mode::Train, &mut CounterRng::new(99))?;
                Ok(multilabel_loss(logits, &targets)?.total)
            },
            &params,
            &e2e_opts,
        )?;
        rows.push(("toy_model_end_to_end".to_string(), report));
    }

    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, GradCheckOpts};

    fn toy_input_f32(n: usize, seed: u64) -> Tensor<f32> {
        Tensor::rand_uniform(vec![n, 3, 32, 32], 0.0, 1.0, &mut CounterRng::new(seed))
    }

    #[test]
    fn gradient_suite_covers_every_layer_kind_and_passes() {
        let rows = gradient_suite(true).unwrap();
        let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
        for expect in [
            "linear",
            "conv2d",
            "conv2d_depthwise",
            "batch_norm",
            "layer_norm",
            "gelu_mlp",
            "window_attention",
            "ldc",
            "fr",
            "patch_merging",
            "patch_embed",
            "res_head",
            "toy_model_end_to_end",
        ] {
            assert!(names.contains(&expect), "missing row {expect}");
        }
        let total: usize = rows.iter().map(|(_, r)| r.checked).sum();
        assert!(total >= 200, "only {total} coordinates sampled");
        for (name, r) in &rows {
            assert!(
                r.is_pass(),
                "{name}: {} of {} coordinates failed, max rel err {:.3e}",
                r.failures.len(),
                r.checked,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn config_validation_rejects_bad_combinations() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::toy().validate().is_ok());

        let mut c = ModelConfig::toy();
        c.heads = vec![3, 2, 4, 8];
        assert!(c.validate().is_err(), "width 8 is not divisible by 3 heads");

        let mut c = ModelConfig::toy();
        c.depths = vec![2, 3, 2, 2];
        assert!(c.validate().is_err(), "odd depth breaks block alternation");

        let mut c = ModelConfig::toy();
        c.img_size = 20;
        assert!(c.validate().is_err(), "grid 5 cannot be halved three times");

        let mut c = ModelConfig::toy();
        c.num_labels = 3;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::toy();
        c.ldc_kernel = 4;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::toy();
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toy_forward_shape_ladder() {
        let mut model = LdcsfModel::<f32>::new(ModelConfig::toy(), 3).unwrap();
        let img = toy_input_f32(2, 11);
        let tape = Tape::new();
        let mut rng = CounterRng::new(0).derive_named("dropout");
        let (logits, trace) = model
            .forward_traced(&tape, &img, Mode::Train, &mut rng)
            .unwrap();
        assert_eq!(logits.shape(), &[2, 4]);
        let expect = [(64, 8), (16, 16), (4, 32), (1, 64)];
        for (got, (tokens, dim)) in trace.iter().zip(expect) {
            assert_eq!((got.tokens, got.dim), (tokens, dim));
        }
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let mut model = LdcsfModel::<f32>::new(ModelConfig::toy(), 3).unwrap();
        let tape = Tape::new();
        let mut rng = CounterRng::new(0);
        let bad = Tensor::<f32>::zeros(vec![2, 3, 16, 16]);
        assert!(model.forward(&tape, &bad, Mode::Train, &mut rng).is_err());
        let bad = Tensor::<f32>::zeros(vec![2, 1, 32, 32]);
        assert!(model.forward(&tape, &bad, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn constant_image_embeds_to_identical_tokens() {
        let base = CounterRng::new(5).derive_named("init");
        let embed = PatchEmbed::<f64>::new(&base, "pe", 4, 8);
        let tape = Tape::new();
        let img = tape.constant(&Tensor::full(vec![1, 3, 8, 8], 0.25)).unwrap();
        let tokens = embed.forward(&tape, img).unwrap();
        assert_eq!(tokens.shape(), &[1, 4, 8]);
        let v = tokens.value().to_f64_vec();
        for t in 1..4 {
            assert_eq!(v[t * 8..(t + 1) * 8], v[0..8], "token {t} differs");
        }
    }

    #[test]
    fn block_with_zeroed_projections_is_identity() {
        for shift in [0usize, 1] {
            let base = CounterRng::new(9).derive_named("init");
            let mut block = SwinBlock::<f64>::new(&base, "b", 8, 2, 2, shift, 4).unwrap();
            block.visit_mut("b", &mut |name, t, _| {
                if name.contains("attn.proj") || name.contains("mlp.fc2") {
                    *t = Tensor::zeros(t.shape().to_vec());
                }
            });
            let mask = build_shift_mask::<f64>(4, 4, 2, 1).unwrap();
            let tape = Tape::new();
            let x = Tensor::rand_uniform(vec![2, 16, 8], -1.0, 1.0, &mut CounterRng::new(1));
            let xv = tape.constant(&x).unwrap();
            let mut rng = CounterRng::new(0);
            let m = (shift > 0).then_some(&mask);
            let y = block.forward(&tape, xv, 4, m, Mode::Eval, &mut rng).unwrap();
            assert_eq!(y.value().max_abs_diff(&x), 0.0, "shift {shift}");
        }
    }

    #[test]
    fn ldc_with_zero_weights_is_identity() {
        let base = CounterRng::new(2).derive_named("init");
        let mut ldc = Ldc::<f64>::new(&base, "ldc", 4, 3).unwrap();
        ldc.visit_mut("ldc", &mut |name, t, _| {
            if name.contains("weight") && !name.contains("bn") {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        });
        let tape = Tape::new();
        let x = Tensor::rand_uniform(vec![2, 16, 4], -1.0, 1.0, &mut CounterRng::new(3));
        let xv = tape.constant(&x).unwrap();
        let y = ldc.forward(&tape, xv, 4, Mode::Train).unwrap();
        assert_eq!(y.value().max_abs_diff(&x), 0.0);
    }

    #[test]
    fn ldc_gradcheck() {
        let base = CounterRng::new(21).derive_named("init");
        let ldc = Ldc::<f64>::new(&base, "ldc", 3, 3).unwrap();
        let mut params = vec![(
            "input".to_string(),
            Tensor::rand_uniform(vec![2, 4, 3], -1.0, 1.0, &mut CounterRng::new(8)),
        )];
        ldc.visit("ldc", &mut |name, t, trainable| {
            if trainable {
                params.push((name.to_string(), t.clone()));
            }
        });
        let report = check_gradients(
            |tape, ps| {
                let base = CounterRng::new(21).derive_named("init");
                let mut ldc = Ldc::<f64>::new(&base, "ldc", 3, 3)?;
                let mut by_name: HashMap<&str, &Tensor<f64>> =
                    ps.iter().map(|(n, t)| (n.as_str(), t)).collect();
                let input = by_name.remove("input").unwrap();
                ldc.visit_mut("ldc", &mut |name, t, _| {
                    if let Some(v) = by_name.remove(name) {
                        *t = v.clone();
                    }
                });
                let x = tape.param(input)?;
                ldc.forward(tape, x, 2, Mode::Train)?.sum_all()
            },
            &params,
            &GradCheckOpts::default(),
        )
        .unwrap();
        report.assert_pass();
    }

    #[test]
    fn saturated_gate_passes_features_through() {
        let base = CounterRng::new(4).derive_named("init");
        let mut fr = Fr::<f64>::new(&base, "fr", 8, 4);
        fr.visit_mut("fr", &mut |name, t, _| {
            if name.ends_with("fc2.weight") {
                *t = Tensor::zeros(t.shape().to_vec());
            } else if name.ends_with("fc2.bias") {
                *t = Tensor::full(t.shape().to_vec(), 40.0);
            }
        });
        let tape = Tape::new();
        let x = Tensor::rand_uniform(vec![2, 8, 3, 3], -2.0, 2.0, &mut CounterRng::new(6));
        let y = fr.forward(&tape, tape.constant(&x).unwrap()).unwrap();
        assert_eq!(y.value().max_abs_diff(&x), 0.0);
    }

    #[test]
    fn zero_excitation_halves_every_channel() {
        let base = CounterRng::new(4).derive_named("init");
        let mut fr = Fr::<f64>::new(&base, "fr", 8, 4);
        fr.visit_mut("fr", &mut |_, t, _| *t = Tensor::zeros(t.shape().to_vec()));
        let tape = Tape::new();
        let x = Tensor::rand_uniform(vec![2, 8, 3, 3], -2.0, 2.0, &mut CounterRng::new(6));
        let y = fr.forward(&tape, tape.constant(&x).unwrap()).unwrap();
        let mut expect = x.clone();
        expect.apply(|v| *v *= 0.5);
        assert_eq!(y.value().max_abs_diff(&expect), 0.0);
    }

    #[test]
    fn gate_values_stay_strictly_inside_unit_interval() {
        let base = CounterRng::new(77).derive_named("init");
        let fr = Fr::<f64>::new(&base, "fr", 8, 4);
        let tape = Tape::new();
        for seed in 0..5 {
            let x = Tensor::rand_uniform(vec![3, 8, 4, 4], -3.0, 3.0, &mut CounterRng::new(seed));
            let g = fr.gate(&tape, tape.constant(&x).unwrap()).unwrap();
            for &v in g.value().as_slice() {
                assert!(v > 0.0 && v < 1.0, "gate {v} escaped (0, 1)");
            }
        }
    }

    #[test]
    fn merging_quarters_tokens_and_doubles_width() {
        let base = CounterRng::new(13).derive_named("init");
        let merge = PatchMerging::<f64>::new(&base, "m", 4);
        let tape = Tape::new();
        let x = Tensor::rand_uniform(vec![2, 16, 4], -1.0, 1.0, &mut CounterRng::new(1));
        let y = merge.forward(&tape, tape.constant(&x).unwrap(), 4).unwrap();
        assert_eq!(y.shape(), &[2, 4, 8]);

        let params = vec![("x".to_string(), x)];
        let report = check_gradients(
            |tape, ps| {
                let base = CounterRng::new(13).derive_named("init");
                let merge = PatchMerging::<f64>::new(&base, "m", 4);
                let x = tape.param(&ps[0].1)?;
                merge.forward(tape, x, 4)?.sum_all()
            },
            &params,
            &GradCheckOpts::default(),
        )
        .unwrap();
        report.assert_pass();
    }

    #[test]
    fn head_with_zero_convs_is_pool_then_linear() {
        let base = CounterRng::new(31).derive_named("init");
        let mut head = ResHead::<f64>::new(&base, "head", 8, 4, 0.0).unwrap();
        head.visit_mut("head", &mut |name, t, _| {
            if name.contains("conv") {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        });
        let tokens = Tensor::rand_uniform(vec![2, 9, 8], -1.0, 1.0, &mut CounterRng::new(2));
        let tape = Tape::new();
        let mut rng = CounterRng::new(0);
        let y = head
            .forward(&tape, tape.constant(&tokens).unwrap(), 3, Mode::Train, &mut rng)
            .unwrap();

        let direct = {
            let x = seq_to_img(tape.constant(&tokens).unwrap(), 3).unwrap();
            let pooled = x.global_avg_pool().unwrap();
            head.fc.forward(&tape, pooled).unwrap()
        };
        assert_eq!(y.value().max_abs_diff(&direct.value()), 0.0);
    }

    #[test]
    fn loss_components_sum_exactly_to_total() {
        let tape = Tape::<f64>::new();
        let logits = Tensor::rand_uniform(vec![5, 4], -4.0, 4.0, &mut CounterRng::new(40));
        let targets = Tensor::from_f64s(
            vec![5, 4],
            &[
                1.0, 0.0, 0.0, 1.0, //
                0.0, 1.0, 0.0, 0.0, //
                1.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, //
                0.0, 0.0, 1.0, 0.0,
            ],
        )
        .unwrap();
        let z = tape.constant(&logits).unwrap();
        let terms = multilabel_loss(z, &targets).unwrap();
        let sum = terms.l_i.value().item()
            + terms.l_m.value().item()
            + terms.l_t.value().item()
            + terms.l_n.value().item();
        assert_eq!(terms.total.value().item(), sum, "decomposition must be exact");
    }

    #[test]
    fn zero_logits_cost_four_times_ln_two() {
        let tape = Tape::new();
        let z = tape.constant(&Tensor::<f64>::zeros(vec![3, 4])).unwrap();
        let targets = Tensor::from_f64s(
            vec![3, 4],
            &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let terms = multilabel_loss(z, &targets).unwrap();
        let total = terms.total.value().item();
        assert!((total - 4.0 * std::f64::consts::LN_2).abs() < 1e-12, "got {total}");
    }

    #[test]
    fn confident_correct_logits_cost_almost_nothing() {
        let tape = Tape::new();
        let targets =
            Tensor::<f64>::from_f64s(vec![2, 4], &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let mut logits = targets.clone();
        logits.apply(|t| *t = if *t > 0.5 { 20.0 } else { -20.0 });
        let z = tape.constant(&logits).unwrap();
        let terms = multilabel_loss(z, &targets).unwrap();
        assert!(terms.total.value().item() < 1e-6);
    }

    #[test]
    fn tumor_term_gradient_ignores_other_columns() {
        let tape = Tape::<f64>::new();
        let logits = Tensor::rand_uniform(vec![3, 4], -2.0, 2.0, &mut CounterRng::new(17));
        let targets = Tensor::from_f64s(
            vec![3, 4],
            &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0],
        )
        .unwrap();
        let z = tape.param(&logits).unwrap();
        let terms = multilabel_loss(z, &targets).unwrap();
        tape.backward(terms.l_t).unwrap();
        let g = tape.grad(&logits).unwrap();
        let gv = g.to_f64_vec();
        for row in 0..3 {
            for col in 0..3 {
                assert_eq!(gv[row * 4 + col], 0.0, "row {row} col {col}");
            }
            assert_ne!(gv[row * 4 + 3], 0.0, "tumor column must carry gradient");
        }
    }

    #[test]
    fn eval_forward_commutes_with_batch_permutation() {
        let mut model = LdcsfModel::<f32>::new(ModelConfig::toy(), 6).unwrap();
        let mut rng = CounterRng::new(0).derive_named("dropout");
        // Seed batch-norm running statistics with one training pass.
        {
            let tape = Tape::new();
            model
                .forward(&tape, &toy_input_f32(4, 50), Mode::Train, &mut rng)
                .unwrap();
        }
        let a = toy_input_f32(1, 51);
        let b = toy_input_f32(1, 52);
        let cat = |x: &Tensor<f32>, y: &Tensor<f32>| {
            let mut d = x.as_slice().to_vec();
            d.extend_from_slice(y.as_slice());
            Tensor::new(vec![2, 3, 32, 32], d).unwrap()
        };
        let tape = Tape::new();
        let ab = model.forward(&tape, &cat(&a, &b), Mode::Eval, &mut rng).unwrap();
        let ba = model.forward(&tape, &cat(&b, &a), Mode::Eval, &mut rng).unwrap();
        let abv = ab.value().to_f32_vec();
        let bav = ba.value().to_f32_vec();
        assert_eq!(abv[0..4], bav[4..8]);
        assert_eq!(abv[4..8], bav[0..4]);
    }

    #[test]
    fn ablation_removes_exactly_the_optional_groups() {
        let full = LdcsfModel::<f32>::new(ModelConfig::toy(), 42).unwrap();
        let mut no_ldc_cfg = ModelConfig::toy();
        no_ldc_cfg.ldc_enabled = false;
        let no_ldc = LdcsfModel::<f32>::new(no_ldc_cfg, 42).unwrap();
        let mut no_fr_cfg = ModelConfig::toy();
        no_fr_cfg.fr_enabled = false;
        let no_fr = LdcsfModel::<f32>::new(no_fr_cfg, 42).unwrap();

        let collect = |m: &LdcsfModel<f32>| {
            let mut map = HashMap::new();
            m.visit(&mut |name, t, _| {
                map.insert(name.to_string(), t.clone());
            });
            map
        };
        let (f, nl, nf) = (collect(&full), collect(&no_ldc), collect(&no_fr));

        for (ablated, tag) in [(&nl, ".ldc."), (&nf, ".fr.")] {
            assert!(ablated.len() < f.len());
            for (name, t) in ablated {
                let ft = f.get(name).unwrap_or_else(|| panic!("{name} missing from full model"));
                assert!(t.bit_eq(ft), "{name} initialised differently across configs");
            }
            for name in f.keys() {
                if !ablated.contains_key(name) {
                    assert!(name.contains(tag), "{name} unexpectedly removed");
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = LdcsfModel::<f32>::new(ModelConfig::toy(), 8).unwrap();
        let mut rng = CounterRng::new(0).derive_named("dropout");
        let img = toy_input_f32(2, 60);
        {
            let tape = Tape::new();
            model.forward(&tape, &img, Mode::Train, &mut rng).unwrap();
        }
        let extras = vec![("optim.step".to_string(), vec![1], vec![42.0f32])];
        let meta = Some(serde_json::json!({"epoch": 3}));
        save_checkpoint(&path, &model, &extras, meta.clone()).unwrap();

        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.model.config(), model.config());
        assert_eq!(loaded.extras, extras);
        assert_eq!(loaded.extra_meta, meta);

        let mut original = Vec::new();
        model.visit(&mut |name, t, _| original.push((name.to_string(), t.clone())));
        let mut restored = Vec::new();
        loaded.model.visit(&mut |name, t, _| restored.push((name.to_string(), t.clone())));
        assert_eq!(original.len(), restored.len());
        for ((an, at), (bn, bt)) in original.iter().zip(&restored) {
            assert_eq!(an, bn);
            assert!(at.bit_eq(bt), "{an} changed across the round trip");
        }

        // Restored running stats make eval mode work immediately, and the two
        // models agree bit-for-bit on a fresh batch.
        let mut loaded_model = loaded.model;
        let tape = Tape::new();
        let a = model.forward(&tape, &img, Mode::Eval, &mut rng).unwrap();
        let b = loaded_model.forward(&tape, &img, Mode::Eval, &mut rng).unwrap();
        assert!(a.value().bit_eq(&b.value()));
    }

    #[test]
    fn checkpoint_rejects_unknown_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = LdcsfModel::<f32>::new(ModelConfig::toy(), 8).unwrap();
        save_checkpoint(&path, &model, &[], None).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());

        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
