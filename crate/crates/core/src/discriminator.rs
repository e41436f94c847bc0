//! Mixer discriminator over a 6-channel input (condition canvas stacked with
//! a real or generated panorama). Three heads: per-token patch logits, a
//! shared spatial compression to per-channel logits, and a transposed-
//! convolution decoder that reconstructs the 6-channel input. Layer norm
//! throughout; there is no class-label pathway.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{check_fn, randn_t, GradCheckReport, TOL_COMPOSITE};
use crate::layers::{Affine, MixerLayer, NormKind, PatchEmbed, PerTokenLinear};
use crate::params::{join, Param, ParamSet};
use crate::rng::{derive_rng, he_uniform, Stream};
use crate::scalar::Scalar;
use crate::tensor::maps::{PermuteMap, SparseMap};
use crate::tensor::{autograd, Tensor};

#[derive(Debug)]
pub struct DiscriminatorOutput<T: Scalar> {
    /// [B, 1, Gh, Gw] pre-sigmoid logits, one per token.
    pub patch_logits: Tensor<T>,
    /// [B, C] pre-sigmoid logits, one per feature channel.
    pub channel_logits: Tensor<T>,
    /// [B, 6, H, W] input reconstruction (None when skipped).
    pub reconstruction: Option<Tensor<T>>,
}

/// One stride-2 transposed-convolution stage, realized as a per-position
/// matmul against [Cin, Cout*k*k] followed by a scatter into the doubled
/// grid.
struct TconvStage<T: Scalar> {
    weight: Param<T>,
    bias: Param<T>,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    in_grid: (usize, usize),
    maps: RefCell<HashMap<usize, Arc<SparseMap<T>>>>,
    token_maps: RefCell<HashMap<usize, std::rc::Rc<PermuteMap>>>,
}

impl<T: Scalar> TconvStage<T> {
    fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        in_grid: (usize, usize),
    ) -> Self {
        TconvStage {
            weight: Param::new(he_uniform(
                rng,
                &[c_in, c_out * kernel * kernel],
                c_in * kernel * kernel,
            )),
            bias: Param::new(Tensor::zeros(&[c_out])),
            c_in,
            c_out,
            kernel,
            in_grid,
            maps: RefCell::new(HashMap::new()),
            token_maps: RefCell::new(HashMap::new()),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = self.in_grid;
        let b = x.shape()[0];
        let to_tokens = {
            let mut cache = self.token_maps.borrow_mut();
            std::rc::Rc::clone(cache.entry(b).or_insert_with(|| {
                std::rc::Rc::new(PermuteMap::map_to_tokens(b, self.c_in, h, w))
            }))
        };
        let scatter = {
            let mut cache = self.maps.borrow_mut();
            Arc::clone(cache.entry(b).or_insert_with(|| {
                SparseMap::col2im_stride2(b, h, w, self.c_out, self.kernel)
            }))
        };
        let tok = x.permute(&to_tokens)?.reshape(&[b * h * w, self.c_in])?;
        let m = tok.matmul(&self.weight.get())?;
        let cols = m.reshape(&[b, h * w, self.c_out * self.kernel * self.kernel])?;
        let up = cols.sparse_apply(scatter, false)?;
        up.add(&self.bias.get().reshape(&[self.c_out, 1, 1])?)
    }
}

impl<T: Scalar> ParamSet<T> for TconvStage<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

pub struct Discriminator<T: Scalar> {
    embed: PatchEmbed<T>,
    layers: Vec<MixerLayer<T>>,
    patch_head: PerTokenLinear<T>,
    channel_head: Affine<T>,
    recon_stages: Vec<TconvStage<T>>,
    width: usize,
    grid: (usize, usize),
    input_hw: (usize, usize),
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let width = cfg.disc_width;
        let patch = cfg.disc_patch;
        let (h, w) = (cfg.height, cfg.width_px());
        let grid = (h / patch, w / patch);
        let norm = NormKind::Layer {
            epsilon: cfg.bn_epsilon,
        };
        let embed = PatchEmbed::new(rng, 6, patch, width);
        let layers = (0..cfg.layers_per_block)
            .map(|_| MixerLayer::new(rng, width, grid, norm))
            .collect();
        let patch_head = PerTokenLinear::new(rng, width, 1);
        let channel_head = Affine::new(rng, grid.0 * grid.1, 1);

        // one stage per doubling back to pixel resolution, halving channels,
        // last stage straight to 6
        let stages = patch.trailing_zeros() as usize;
        let mut recon_stages = Vec::with_capacity(stages);
        let mut c_in = width;
        let mut g = grid;
        for s in 0..stages {
            let c_out = if s + 1 == stages { 6 } else { (c_in / 2).max(6) };
            recon_stages.push(TconvStage::new(rng, c_in, c_out, 4, g));
            c_in = c_out;
            g = (g.0 * 2, g.1 * 2);
        }
        Ok(Discriminator {
            embed,
            layers,
            patch_head,
            channel_head,
            recon_stages,
            width,
            grid,
            input_hw: (h, w),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Trunk + heads. `with_reconstruction` skips the decoder when its loss
    /// is ablated away.
    pub fn forward(&self, d_in: &Tensor<T>, with_reconstruction: bool) -> Result<DiscriminatorOutput<T>> {
        let s = d_in.shape();
        let (h, w) = self.input_hw;
        if s.len() != 4 || s[1] != 6 || s[2] != h || s[3] != w {
            return Err(Error::Config(format!(
                "discriminator expects [B,6,{h},{w}], got {s:?}"
            )));
        }
        let b = s[0];
        let (gh, gw) = self.grid;
        let t = gh * gw;
        let mut feat = self.embed.forward(d_in)?;
        for layer in &self.layers {
            feat = layer.forward(&feat, &[], false)?;
        }
        let patch_logits = self.patch_head.forward(&feat)?;
        let channel_logits = self
            .channel_head
            .apply(&feat.reshape(&[b * self.width, t])?)?
            .reshape(&[b, self.width])?;
        let reconstruction = if with_reconstruction {
            let mut r = feat;
            let last = self.recon_stages.len() - 1;
            for (i, stage) in self.recon_stages.iter().enumerate() {
                r = stage.forward(&r)?;
                if i != last {
                    r = r.gelu();
                }
            }
            Some(r)
        } else {
            None
        };
        Ok(DiscriminatorOutput {
            patch_logits,
            channel_logits,
            reconstruction,
        })
    }

    /// Combined pre-sigmoid score whose input gradient the R1 penalty
    /// regularizes: mean patch logit + lambda_ch * mean channel logit.
    fn r1_score(
        out: &DiscriminatorOutput<T>,
        lambda_ch: T,
        include_channel: bool,
    ) -> Result<Tensor<T>> {
        let s = out.patch_logits.mean_all();
        if include_channel {
            s.add(&out.channel_logits.mean_all().scale(lambda_ch))
        } else {
            Ok(s)
        }
    }

    /// Mean squared gradient norm of the combined score w.r.t. the input,
    /// as a tensor that still participates in the weight-gradient graph.
    /// Also returns the discriminator output of the same forward pass so the
    /// caller can reuse its logits.
    pub fn forward_with_grad_norm(
        &self,
        d_in: &Tensor<T>,
        lambda_ch: T,
        include_channel: bool,
        with_reconstruction: bool,
    ) -> Result<(DiscriminatorOutput<T>, Tensor<T>)> {
        let leaf = d_in.detach().tracked();
        let out = self.forward(&leaf, with_reconstruction)?;
        let score = Self::r1_score(&out, lambda_ch, include_channel)?;
        let g = autograd::grad(&score, &[&leaf], true)?.remove(0);
        let b = d_in.shape()[0];
        let gns = g
            .square()
            .sum_all()
            .scale(T::one() / T::from_f64(b as f64));
        Ok((out, gns))
    }

    /// d_grad_norm_sq alone (forward discarded).
    pub fn grad_norm_sq(
        &self,
        d_in: &Tensor<T>,
        lambda_ch: T,
        include_channel: bool,
    ) -> Result<Tensor<T>> {
        Ok(self
            .forward_with_grad_norm(d_in, lambda_ch, include_channel, false)?
            .1)
    }
}

impl<T: Scalar> ParamSet<T> for Discriminator<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (j, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layer{j}")), f);
        }
        self.patch_head.visit(&join(prefix, "patch_head"), f);
        self.channel_head.visit(&join(prefix, "channel_head"), f);
        for (s, stage) in self.recon_stages.iter().enumerate() {
            stage.visit(&join(prefix, &format!("recon/stage{s}")), f);
        }
    }
}

// ---------------------------------------------------------------------------
// gradient-check suites
// ---------------------------------------------------------------------------

fn toy_disc() -> Discriminator<f64> {
    let cfg = crate::generator::toy_model_config();
    let mut rng = derive_rng(22, Stream::WeightInit, 0);
    Discriminator::new(&mut rng, &cfg).unwrap()
}

pub fn gradcheck_discriminator() -> Vec<GradCheckReport> {
    let disc = toy_disc();
    let x = randn_t(210, &[2, 6, 4, 8]);
    let slots: Vec<(String, &Param<f64>)> = disc
        .named_params("")
        .into_iter()
        .filter(|(_, p)| p.trainable())
        .collect();
    let mut inputs = vec![x];
    for (_, p) in &slots {
        inputs.push(p.get().detach());
    }
    vec![check_fn("discriminator all heads", &inputs, TOL_COMPOSITE, &|t| {
        for (i, (_, p)) in slots.iter().enumerate() {
            p.set_shared(t[i + 1].clone());
        }
        let out = disc.forward(&t[0], true)?;
        let wp = randn_t(211, out.patch_logits.shape());
        let wc = randn_t(212, out.channel_logits.shape());
        let recon = out.reconstruction.expect("requested reconstruction");
        let wr = randn_t(213, recon.shape());
        out.patch_logits
            .mul(&wp)?
            .sum_all()
            .add(&out.channel_logits.mul(&wc)?.sum_all())?
            .add(&recon.mul(&wr)?.sum_all())
    })]
}

pub fn gradcheck_r1() -> Vec<GradCheckReport> {
    // FD of the penalty's weight gradient: perturb each discriminator
    // parameter and re-evaluate the squared input-gradient norm.
    let disc = toy_disc();
    let x = randn_t(214, &[1, 6, 4, 8]);
    let slots: Vec<(String, &Param<f64>)> = disc
        .named_params("")
        .into_iter()
        .filter(|(_, p)| p.trainable())
        .collect();
    let inputs: Vec<Tensor<f64>> = slots.iter().map(|(_, p)| p.get().detach()).collect();
    vec![check_fn(
        "r1 grad-norm through weights",
        &inputs,
        TOL_COMPOSITE,
        &|t| {
            for (i, (_, p)) in slots.iter().enumerate() {
                p.set_shared(t[i].clone());
            }
            disc.grad_norm_sq(&x, 0.01, true)
        },
    )]
}
