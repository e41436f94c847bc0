//! Network building blocks: patch embedding, conditional batch norm, layer
//! norm, the token/channel mixer layer, its depthwise variant, PatchSplit
//! upsampling, and per-token channel projection.
//!
//! Feature maps are [B, C, Gh, Gw] token grids with Gw = 2*Gh everywhere, so
//! the panorama aspect survives every scale. Index maps for token reshuffles
//! are built once per batch size and cached inside each layer.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcheck::{check_fn, randn_t, GradCheckReport, TOL_COMPOSITE, TOL_PRIMITIVE};
use crate::params::{join, Param, ParamSet};
use crate::rng::he_uniform;
use crate::scalar::Scalar;
use crate::tensor::maps::PermuteMap;
use crate::tensor::{PaddingMode, Tensor, UnaryFn};

/// Scene class id, bounds-checked where it selects normalization rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneLabel(pub usize);

pub(crate) fn label_rows(labels: &[SceneLabel], num_classes: usize) -> Arc<Vec<usize>> {
    Arc::new(
        labels
            .iter()
            .map(|l| if num_classes == 1 { 0 } else { l.0 })
            .collect(),
    )
}

/// Per-layer cache of batch-size-dependent permutation maps.
#[derive(Default)]
pub(crate) struct MapCache {
    inner: RefCell<HashMap<(u8, usize), Rc<PermuteMap>>>,
}

impl MapCache {
    fn get(&self, role: u8, b: usize, build: impl FnOnce() -> PermuteMap) -> Rc<PermuteMap> {
        let mut inner = self.inner.borrow_mut();
        Rc::clone(inner.entry((role, b)).or_insert_with(|| Rc::new(build())))
    }
}

// ---------------------------------------------------------------------------
// affine
// ---------------------------------------------------------------------------

/// Fully connected map with bias, applied to row-major [rows, in_dim].
pub struct Affine<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_dim: usize,
    out_dim: usize,
}

impl<T: Scalar> Affine<T> {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        Self::new_scaled(rng, in_dim, out_dim, 1.0)
    }

    /// Fan-in init with an extra gain; output projections use a small gain
    /// so the multi-scale sum starts inside tanh's linear range.
    pub fn new_scaled(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, gain: f64) -> Self {
        let w = he_uniform::<T>(rng, &[in_dim, out_dim], in_dim);
        let w = if gain == 1.0 {
            w
        } else {
            w.scale(T::from_f64(gain)).detach()
        };
        Affine {
            weight: Param::new(w),
            bias: Param::new(Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        crate::tensor::matmul_bias(x, &self.weight.get(), &self.bias.get())
    }
}

impl<T: Scalar> ParamSet<T> for Affine<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

// ---------------------------------------------------------------------------
// patch embedding
// ---------------------------------------------------------------------------

/// Cuts [B, C, H, W] into non-overlapping patch x patch tiles and maps each
/// flattened tile through one shared affine to `dim` channels.
pub struct PatchEmbed<T: Scalar> {
    pub affine: Affine<T>,
    in_channels: usize,
    patch: usize,
    dim: usize,
    cache: MapCache,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new(rng: &mut ChaCha8Rng, in_channels: usize, patch: usize, dim: usize) -> Self {
        let flat = in_channels * patch * patch;
        PatchEmbed {
            affine: Affine::new(rng, flat, dim),
            in_channels,
            patch,
            dim,
            cache: MapCache::default(),
        }
    }

    pub fn forward(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let s = img.shape();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::Dimension {
                op: "patch_embed (input must be [B,C,H,W])",
                lhs: s.to_vec(),
                rhs: vec![self.in_channels],
            });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch size {} does not divide spatial size {}x{}",
                self.patch, h, w
            )));
        }
        let (gh, gw) = (h / self.patch, w / self.patch);
        let t = gh * gw;
        let patchify = self
            .cache
            .get(0, b, || PermuteMap::patchify(b, c, h, w, self.patch));
        let to_map = self
            .cache
            .get(1, b, || PermuteMap::map_to_tokens(b, self.dim, gh, gw).inverse());
        let flat = img
            .permute(&patchify)?
            .reshape(&[b * t, c * self.patch * self.patch])?;
        let tokens = self.affine.apply(&flat)?;
        tokens.reshape(&[b, t, self.dim])?.permute(&to_map)
    }
}

impl<T: Scalar> ParamSet<T> for PatchEmbed<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.affine.visit(prefix, f);
    }
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

/// Batch normalization whose gain and bias rows are selected by a class
/// label. With one class (or the plain-BN ablation) the label is ignored.
pub struct CondBatchNorm<T: Scalar> {
    pub gain: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    num_classes: usize,
    channels: usize,
    epsilon: f64,
    momentum: f64,
}

impl<T: Scalar> CondBatchNorm<T> {
    pub fn new(num_classes: usize, channels: usize, epsilon: f64, momentum: f64) -> Self {
        CondBatchNorm {
            gain: Param::new(Tensor::ones(&[num_classes, channels])),
            bias: Param::new(Tensor::zeros(&[num_classes, channels])),
            running_mean: Param::buffer(Tensor::zeros(&[channels])),
            running_var: Param::buffer(Tensor::ones(&[channels])),
            num_classes,
            channels,
            epsilon,
            momentum,
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        labels: &[SceneLabel],
        training: bool,
    ) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Dimension {
                op: "cond_batch_norm",
                lhs: s.to_vec(),
                rhs: vec![self.channels],
            });
        }
        let b = s[0];
        if labels.len() != b {
            return Err(Error::Contract(format!(
                "got {} labels for batch of {b}",
                labels.len()
            )));
        }
        let eps = T::from_f64(self.epsilon);
        let xhat = if training {
            let (xhat, mu_c, var_c) = crate::tensor::batch_norm_core(x, self.epsilon)?;
            crate::tensor::autograd::no_grad(|| -> Result<()> {
                let m = T::from_f64(self.momentum);
                let keep = T::one() - m;
                let rm = self.running_mean.get();
                let rv = self.running_var.get();
                self.running_mean.set(rm.scale(keep).add(&mu_c.scale(m))?);
                self.running_var.set(rv.scale(keep).add(&var_c.scale(m))?);
                Ok(())
            })?;
            xhat
        } else {
            let rm = self.running_mean.get().reshape(&[self.channels, 1, 1])?;
            let rv = self.running_var.get().reshape(&[self.channels, 1, 1])?;
            x.sub(&rm)?
                .mul(&rv.add_scalar(eps).unary(UnaryFn::Pow { c: 1.0, e: -0.5 })?)?
        };
        let rows = label_rows(labels, self.num_classes);
        let g = self.gain.get().gather_rows(Arc::clone(&rows))?;
        let be = self.bias.get().gather_rows(rows)?;
        crate::tensor::scale_shift(&xhat, &g, &be)
    }
}

impl<T: Scalar> ParamSet<T> for CondBatchNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }
}

/// Per-token normalization across channels with learnable gain/bias.
pub struct LayerNorm<T: Scalar> {
    pub gain: Param<T>,
    pub bias: Param<T>,
    channels: usize,
    epsilon: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(channels: usize, epsilon: f64) -> Self {
        LayerNorm {
            gain: Param::new(Tensor::ones(&[channels])),
            bias: Param::new(Tensor::zeros(&[channels])),
            channels,
            epsilon,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mu = x.mean_axes(&[1])?;
        let centered = x.sub(&mu)?;
        let var = centered.square().mean_axes(&[1])?;
        let xhat = centered.mul(
            &var.add_scalar(T::from_f64(self.epsilon))
                .unary(UnaryFn::Pow { c: 1.0, e: -0.5 })?,
        )?;
        let g = self.gain.get().reshape(&[self.channels, 1, 1])?;
        let b = self.bias.get().reshape(&[self.channels, 1, 1])?;
        xhat.mul(&g)?.add(&b)
    }
}

impl<T: Scalar> ParamSet<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }
}

/// Either norm behind one call surface, so mixer layers can serve both the
/// generator (conditional BN) and the discriminator (layer norm).
pub enum Norm<T: Scalar> {
    Cond(CondBatchNorm<T>),
    Layer(LayerNorm<T>),
}

impl<T: Scalar> Norm<T> {
    pub fn forward(
        &self,
        x: &Tensor<T>,
        labels: &[SceneLabel],
        training: bool,
    ) -> Result<Tensor<T>> {
        match self {
            Norm::Cond(n) => n.forward(x, labels, training),
            Norm::Layer(n) => n.forward(x),
        }
    }
}

impl<T: Scalar> ParamSet<T> for Norm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        match self {
            Norm::Cond(n) => n.visit(prefix, f),
            Norm::Layer(n) => n.visit(prefix, f),
        }
    }
}

/// Which normalization a mixer-style layer should build.
#[derive(Debug, Clone, Copy)]
pub enum NormKind {
    CondBatch {
        num_classes: usize,
        epsilon: f64,
        momentum: f64,
    },
    Layer {
        epsilon: f64,
    },
}

impl NormKind {
    fn build<T: Scalar>(self, channels: usize) -> Norm<T> {
        match self {
            NormKind::CondBatch {
                num_classes,
                epsilon,
                momentum,
            } => Norm::Cond(CondBatchNorm::new(num_classes, channels, epsilon, momentum)),
            NormKind::Layer { epsilon } => Norm::Layer(LayerNorm::new(channels, epsilon)),
        }
    }
}

// ---------------------------------------------------------------------------
// channel-mixing half (shared by mixer and depthwise layers)
// ---------------------------------------------------------------------------

struct ChannelMix<T: Scalar> {
    norm: Norm<T>,
    fc1: Affine<T>,
    fc2: Affine<T>,
    channels: usize,
    grid: (usize, usize),
    cache: MapCache,
}

impl<T: Scalar> ChannelMix<T> {
    fn new(rng: &mut ChaCha8Rng, channels: usize, grid: (usize, usize), norm: NormKind) -> Self {
        let hidden = 2 * channels;
        ChannelMix {
            norm: norm.build(channels),
            fc1: Affine::new(rng, channels, hidden),
            fc2: Affine::new(rng, hidden, channels),
            channels,
            grid,
            cache: MapCache::default(),
        }
    }

    fn forward(&self, x: &Tensor<T>, labels: &[SceneLabel], training: bool) -> Result<Tensor<T>> {
        let (gh, gw) = self.grid;
        let (b, c, t) = (x.shape()[0], self.channels, gh * gw);
        let to_tokens = self
            .cache
            .get(0, b, || PermuteMap::map_to_tokens(b, c, gh, gw));
        let n = self.norm.forward(x, labels, training)?;
        let tok = n.permute(&to_tokens)?.reshape(&[b * t, c])?;
        let h = self.fc1.apply(&tok)?.gelu();
        let o = self.fc2.apply(&h)?;
        let o = o.reshape(&[b, t, c])?.permute(&to_tokens.inverse())?;
        x.add(&o)
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.norm.visit(&join(prefix, "channel_norm"), f);
        self.fc1.visit(&join(prefix, "channel_fc1"), f);
        self.fc2.visit(&join(prefix, "channel_fc2"), f);
    }
}

// ---------------------------------------------------------------------------
// mixer layer
// ---------------------------------------------------------------------------

/// Two residual sublayers: an MLP across token positions applied per channel,
/// then an MLP across channels applied per token; both pre-normalized.
pub struct MixerLayer<T: Scalar> {
    token_norm: Norm<T>,
    token_fc1: Affine<T>,
    token_fc2: Affine<T>,
    channel: ChannelMix<T>,
    channels: usize,
    grid: (usize, usize),
}

impl<T: Scalar> MixerLayer<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        channels: usize,
        grid: (usize, usize),
        norm: NormKind,
    ) -> Self {
        let t = grid.0 * grid.1;
        MixerLayer {
            token_norm: norm.build(channels),
            token_fc1: Affine::new(rng, t, t),
            token_fc2: Affine::new(rng, t, t),
            channel: ChannelMix::new(rng, channels, grid, norm),
            channels,
            grid,
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        labels: &[SceneLabel],
        training: bool,
    ) -> Result<Tensor<T>> {
        let (gh, gw) = self.grid;
        let t = gh * gw;
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels || s[2] != gh || s[3] != gw {
            return Err(Error::Config(format!(
                "mixer layer built for C={} grid {}x{} got input {s:?}",
                self.channels, gh, gw
            )));
        }
        let b = s[0];
        // token mixing, per channel across all T positions
        let n = self.token_norm.forward(x, labels, training)?;
        let flat = n.reshape(&[b * self.channels, t])?;
        let h = self.token_fc1.apply(&flat)?.gelu();
        let o = self
            .token_fc2
            .apply(&h)?
            .reshape(&[b, self.channels, gh, gw])?;
        let x = x.add(&o)?;
        // channel mixing, per token across channels
        self.channel.forward(&x, labels, training)
    }
}

impl<T: Scalar> ParamSet<T> for MixerLayer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.token_norm.visit(&join(prefix, "token_norm"), f);
        self.token_fc1.visit(&join(prefix, "token_fc1"), f);
        self.token_fc2.visit(&join(prefix, "token_fc2"), f);
        self.channel.visit(prefix, f);
    }
}

// ---------------------------------------------------------------------------
// depthwise layer
// ---------------------------------------------------------------------------

/// Mixer-layer skeleton with the token MLP replaced by two depthwise
/// convolutions (circular left/right padding), GELU between them.
pub struct DepthwiseLayer<T: Scalar> {
    conv_norm: Norm<T>,
    conv1_kernel: Param<T>,
    conv1_bias: Param<T>,
    conv2_kernel: Param<T>,
    conv2_bias: Param<T>,
    channel: ChannelMix<T>,
    kernel: usize,
    pad: PaddingMode,
}

impl<T: Scalar> DepthwiseLayer<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        channels: usize,
        grid: (usize, usize),
        kernel: usize,
        pad: PaddingMode,
        norm: NormKind,
    ) -> Self {
        let kshape = [channels, kernel, kernel];
        DepthwiseLayer {
            conv_norm: norm.build(channels),
            conv1_kernel: Param::new(he_uniform(rng, &kshape, kernel * kernel)),
            conv1_bias: Param::new(Tensor::zeros(&[channels])),
            conv2_kernel: Param::new(he_uniform(rng, &kshape, kernel * kernel)),
            conv2_bias: Param::new(Tensor::zeros(&[channels])),
            channel: ChannelMix::new(rng, channels, grid, norm),
            kernel,
            pad,
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        labels: &[SceneLabel],
        training: bool,
    ) -> Result<Tensor<T>> {
        let n = self.conv_norm.forward(x, labels, training)?;
        let h = n
            .depthwise_conv2d_bias(&self.conv1_kernel.get(), Some(&self.conv1_bias.get()), self.pad)?
            .gelu();
        let o = h.depthwise_conv2d_bias(
            &self.conv2_kernel.get(),
            Some(&self.conv2_bias.get()),
            self.pad,
        )?;
        let x = x.add(&o)?;
        self.channel.forward(&x, labels, training)
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel
    }
}

impl<T: Scalar> ParamSet<T> for DepthwiseLayer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.conv_norm.visit(&join(prefix, "conv_norm"), f);
        f(join(prefix, "conv1/kernel"), &self.conv1_kernel);
        f(join(prefix, "conv1/bias"), &self.conv1_bias);
        f(join(prefix, "conv2/kernel"), &self.conv2_kernel);
        f(join(prefix, "conv2/bias"), &self.conv2_bias);
        self.channel.visit(prefix, f);
    }
}

/// Which sublayer family a block stacks.
pub enum MixKind {
    Mixer,
    Depthwise { kernel: usize, pad: PaddingMode },
}

pub enum BlockLayer<T: Scalar> {
    Mixer(MixerLayer<T>),
    Depthwise(DepthwiseLayer<T>),
}

impl<T: Scalar> BlockLayer<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        kind: &MixKind,
        channels: usize,
        grid: (usize, usize),
        norm: NormKind,
    ) -> Self {
        match *kind {
            MixKind::Mixer => BlockLayer::Mixer(MixerLayer::new(rng, channels, grid, norm)),
            MixKind::Depthwise { kernel, pad } => {
                BlockLayer::Depthwise(DepthwiseLayer::new(rng, channels, grid, kernel, pad, norm))
            }
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        labels: &[SceneLabel],
        training: bool,
    ) -> Result<Tensor<T>> {
        match self {
            BlockLayer::Mixer(l) => l.forward(x, labels, training),
            BlockLayer::Depthwise(l) => l.forward(x, labels, training),
        }
    }
}

impl<T: Scalar> ParamSet<T> for BlockLayer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        match self {
            BlockLayer::Mixer(l) => l.visit(prefix, f),
            BlockLayer::Depthwise(l) => l.visit(prefix, f),
        }
    }
}

// ---------------------------------------------------------------------------
// patch split and per-token projection
// ---------------------------------------------------------------------------

/// Learned x2 spatial upsampling: every token maps to 4*C_next features,
/// laid out as a 2x2 block of C_next-channel tokens.
pub struct PatchSplit<T: Scalar> {
    pub affine: Affine<T>,
    c_in: usize,
    c_next: usize,
    cache: MapCache,
}

impl<T: Scalar> PatchSplit<T> {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_next: usize) -> Self {
        PatchSplit {
            affine: Affine::new(rng, c_in, 4 * c_next),
            c_in,
            c_next,
            cache: MapCache::default(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let (b, gh, gw) = (s[0], s[2], s[3]);
        let t = gh * gw;
        let to_tokens = self
            .cache
            .get(0, b, || PermuteMap::map_to_tokens(b, self.c_in, gh, gw));
        let assemble = self
            .cache
            .get(1, b, || PermuteMap::patch_split_assemble(b, gh, gw, self.c_next));
        let tok = x.permute(&to_tokens)?.reshape(&[b * t, self.c_in])?;
        let o = self.affine.apply(&tok)?;
        o.reshape(&[b, t, 4 * self.c_next])?.permute(&assemble)
    }
}

impl<T: Scalar> ParamSet<T> for PatchSplit<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.affine.visit(prefix, f);
    }
}

/// Shared affine applied to each token's channel vector (used for RGB output
/// and the discriminator's patch logits).
pub struct PerTokenLinear<T: Scalar> {
    pub affine: Affine<T>,
    c_in: usize,
    c_out: usize,
    cache: MapCache,
}

impl<T: Scalar> PerTokenLinear<T> {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        Self::new_scaled(rng, c_in, c_out, 1.0)
    }

    pub fn new_scaled(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, gain: f64) -> Self {
        PerTokenLinear {
            affine: Affine::new_scaled(rng, c_in, c_out, gain),
            c_in,
            c_out,
            cache: MapCache::default(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let (b, gh, gw) = (s[0], s[2], s[3]);
        let t = gh * gw;
        let to_tokens = self
            .cache
            .get(0, b, || PermuteMap::map_to_tokens(b, self.c_in, gh, gw));
        let back = self
            .cache
            .get(1, b, || PermuteMap::map_to_tokens(b, self.c_out, gh, gw).inverse());
        let tok = x.permute(&to_tokens)?.reshape(&[b * t, self.c_in])?;
        let o = self.affine.apply(&tok)?;
        o.reshape(&[b, t, self.c_out])?.permute(&back)
    }
}

impl<T: Scalar> ParamSet<T> for PerTokenLinear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.affine.visit(prefix, f);
    }
}

// ---------------------------------------------------------------------------
// gradient-check suites
// ---------------------------------------------------------------------------

/// Substitute externally tracked tensors for a layer's trainable parameters,
/// run `forward`, and reduce to a weighted scalar. Used by the FD suites.
pub(crate) fn fd_check_layer<L: ParamSet<f64>>(
    name: &str,
    layer: &L,
    x: Tensor<f64>,
    tol: f64,
    forward: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
) -> GradCheckReport {
    let slots: Vec<(String, &Param<f64>)> = layer
        .named_params("")
        .into_iter()
        .filter(|(_, p)| p.trainable())
        .collect();
    let mut inputs = vec![x];
    for (_, p) in &slots {
        inputs.push(p.get().detach());
    }
    check_fn(name, &inputs, tol, &|t| {
        for (i, (_, p)) in slots.iter().enumerate() {
            p.set_shared(t[i + 1].clone());
        }
        let out = forward(&t[0])?;
        let w = randn_t(7777, out.shape());
        Ok(out.mul(&w)?.sum_all())
    })
}

fn test_norm_kind() -> NormKind {
    NormKind::CondBatch {
        num_classes: 3,
        epsilon: 1e-5,
        momentum: 0.1,
    }
}

fn test_labels() -> Vec<SceneLabel> {
    vec![SceneLabel(1), SceneLabel(2)]
}

pub fn gradcheck_patch_embed() -> Vec<GradCheckReport> {
    let mut rng = crate::rng::derive_rng(11, crate::rng::Stream::WeightInit, 0);
    let layer = PatchEmbed::<f64>::new(&mut rng, 3, 2, 5);
    let x = randn_t(60, &[2, 3, 4, 8]);
    vec![fd_check_layer("patch_embed [2,3,4,8] p2 d5", &layer, x, TOL_PRIMITIVE, |x| {
        layer.forward(x)
    })]
}

pub fn gradcheck_cond_batch_norm() -> Vec<GradCheckReport> {
    let norm = CondBatchNorm::<f64>::new(3, 4, 1e-5, 0.1);
    let x = randn_t(61, &[2, 4, 2, 3]);
    let labels = test_labels();
    vec![fd_check_layer("cond_batch_norm [2,4,2,3]", &norm, x, TOL_PRIMITIVE, |x| {
        norm.forward(x, &labels, true)
    })]
}

pub fn gradcheck_layer_norm() -> Vec<GradCheckReport> {
    let norm = LayerNorm::<f64>::new(4, 1e-5);
    let x = randn_t(62, &[2, 4, 2, 3]);
    vec![fd_check_layer("layer_norm [2,4,2,3]", &norm, x, TOL_PRIMITIVE, |x| {
        norm.forward(x)
    })]
}

pub fn gradcheck_mixer_layer() -> Vec<GradCheckReport> {
    let mut rng = crate::rng::derive_rng(12, crate::rng::Stream::WeightInit, 0);
    let layer = MixerLayer::<f64>::new(&mut rng, 3, (2, 2), test_norm_kind());
    let x = randn_t(63, &[2, 3, 2, 2]);
    let labels = test_labels();
    vec![fd_check_layer("mixer_layer C3 grid 2x2", &layer, x, TOL_COMPOSITE, |x| {
        layer.forward(x, &labels, true)
    })]
}

pub fn gradcheck_depthwise_layer() -> Vec<GradCheckReport> {
    let mut rng = crate::rng::derive_rng(13, crate::rng::Stream::WeightInit, 0);
    let layer = DepthwiseLayer::<f64>::new(
        &mut rng,
        3,
        (2, 4),
        3,
        PaddingMode::seam_aware(),
        test_norm_kind(),
    );
    let x = randn_t(64, &[2, 3, 2, 4]);
    let labels = test_labels();
    vec![fd_check_layer("depthwise_layer C3 grid 2x4", &layer, x, TOL_COMPOSITE, |x| {
        layer.forward(x, &labels, true)
    })]
}

pub fn gradcheck_patch_split() -> Vec<GradCheckReport> {
    let mut rng = crate::rng::derive_rng(14, crate::rng::Stream::WeightInit, 0);
    let layer = PatchSplit::<f64>::new(&mut rng, 4, 2);
    let x = randn_t(65, &[2, 4, 2, 2]);
    vec![fd_check_layer("patch_split 4->2", &layer, x, TOL_PRIMITIVE, |x| {
        layer.forward(x)
    })]
}

pub fn gradcheck_to_rgb() -> Vec<GradCheckReport> {
    let mut rng = crate::rng::derive_rng(15, crate::rng::Stream::WeightInit, 0);
    let layer = PerTokenLinear::<f64>::new(&mut rng, 5, 3);
    let x = randn_t(66, &[2, 5, 2, 2]);
    vec![fd_check_layer("to_rgb 5->3", &layer, x, TOL_PRIMITIVE, |x| {
        layer.forward(x)
    })]
}
