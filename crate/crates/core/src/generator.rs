//! Hierarchical generator: one token-mixing block at the coarsest grid, then
//! depthwise blocks up to pixel resolution. Every block emits an RGB image;
//! the running RGB is bilinearly doubled and summed with each block's output,
//! and the result passes through a final tanh.
//!
//! Block 1 receives the embedded snapshot at the base patch size plus the
//! latent vector broadcast to every token; blocks 2..N re-embed the snapshot
//! at patch size 2^(N-i) and add it to the incoming feature map.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::config::{AblationToggles, ModelConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{check_fn, randn_t, GradCheckReport, TOL_COMPOSITE};
use crate::layers::{
    Affine, BlockLayer, MixKind, NormKind, PatchEmbed, PatchSplit, PerTokenLinear, SceneLabel,
};
use crate::params::{join, Param, ParamSet};
use crate::rng::{derive_rng, normal_vec, Stream};
use crate::scalar::Scalar;
use crate::tensor::maps::{PermuteMap, SparseMap};
use crate::tensor::{concat, PaddingMode, Tensor};

/// Output projections start small so the summed multi-scale RGB lands in
/// tanh's linear range at initialization.
const RGB_INIT_GAIN: f64 = 0.02;

/// Standard-normal latent batch [B, z_dim].
pub fn sample_latent<T: Scalar>(rng: &mut ChaCha8Rng, batch: usize, z_dim: usize) -> Tensor<T> {
    Tensor::from_vec(normal_vec(rng, batch * z_dim), &[batch, z_dim]).expect("shape/len agree")
}

struct DwBlock<T: Scalar> {
    cond_embed: Option<PatchEmbed<T>>,
    layers: Vec<BlockLayer<T>>,
    to_rgb: PerTokenLinear<T>,
    split: Option<PatchSplit<T>>,
}

pub struct Generator<T: Scalar> {
    cfg: ModelConfig,
    ablation: AblationToggles,
    embed1: PatchEmbed<T>,
    compress1: Affine<T>,
    layers1: Vec<BlockLayer<T>>,
    to_rgb1: PerTokenLinear<T>,
    split1: PatchSplit<T>,
    blocks: Vec<DwBlock<T>>,
    token_maps: RefCell<HashMap<usize, std::rc::Rc<PermuteMap>>>,
    upsample: RefCell<HashMap<(usize, usize), Arc<SparseMap<T>>>>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig, ablation: &AblationToggles) -> Result<Self> {
        cfg.validate()?;
        let classes = if ablation.plain_bn { 1 } else { cfg.num_classes };
        let norm = NormKind::CondBatch {
            num_classes: classes,
            epsilon: cfg.bn_epsilon,
            momentum: cfg.bn_momentum,
        };
        let pad = PaddingMode::seam_aware();
        let dw = MixKind::Depthwise {
            kernel: cfg.depthwise_kernel,
            pad,
        };
        let w0 = cfg.widths[0];
        let grid1 = cfg.grid_at(1);
        let block1_kind = if ablation.no_mixer_block1 { &dw } else { &MixKind::Mixer };

        let embed1 = PatchEmbed::new(rng, 3, cfg.base_patch(), w0);
        let compress1 = Affine::new(rng, w0 + cfg.z_dim, w0);
        let layers1 = (0..cfg.layers_per_block)
            .map(|_| BlockLayer::new(rng, block1_kind, w0, grid1, norm))
            .collect();
        let to_rgb1 = PerTokenLinear::new_scaled(rng, w0, 3, RGB_INIT_GAIN);
        let split1 = PatchSplit::new(rng, w0, cfg.widths[1]);

        let mut blocks = Vec::new();
        for i in 2..=cfg.blocks {
            let width = cfg.widths[i - 1];
            let grid = cfg.grid_at(i);
            let cond_embed = if ablation.single_input {
                None
            } else {
                Some(PatchEmbed::new(rng, 3, cfg.patch_at(i), width))
            };
            let layers = (0..cfg.layers_per_block)
                .map(|_| BlockLayer::new(rng, &dw, width, grid, norm))
                .collect();
            let to_rgb = PerTokenLinear::new_scaled(rng, width, 3, RGB_INIT_GAIN);
            let split = if i < cfg.blocks {
                Some(PatchSplit::new(rng, width, cfg.widths[i]))
            } else {
                None
            };
            blocks.push(DwBlock {
                cond_embed,
                layers,
                to_rgb,
                split,
            });
        }
        Ok(Generator {
            cfg: cfg.clone(),
            ablation: *ablation,
            embed1,
            compress1,
            layers1,
            to_rgb1,
            split1,
            blocks,
            token_maps: RefCell::new(HashMap::new()),
            upsample: RefCell::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn ablation(&self) -> &AblationToggles {
        &self.ablation
    }

    fn check_inputs(&self, x: &Tensor<T>, z: &Tensor<T>, labels: &[SceneLabel]) -> Result<usize> {
        let s = x.shape();
        let (h, w) = (self.cfg.height, self.cfg.width_px());
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
            return Err(Error::Config(format!(
                "generator expects condition [B,3,{h},{w}], got {s:?}"
            )));
        }
        let b = s[0];
        if z.shape() != [b, self.cfg.z_dim] {
            return Err(Error::Config(format!(
                "latent must be [{b},{}], got {:?}",
                self.cfg.z_dim,
                z.shape()
            )));
        }
        if labels.len() != b {
            return Err(Error::Contract(format!(
                "got {} labels for batch of {b}",
                labels.len()
            )));
        }
        Ok(b)
    }

    /// Block 1: patch-embed the condition, concatenate the broadcast latent,
    /// compress back to the block width, run the mixing layers. Returns the
    /// coarse RGB image and the upsampled feature map for block 2.
    pub fn mixer_block_forward(
        &self,
        x: &Tensor<T>,
        z: &Tensor<T>,
        labels: &[SceneLabel],
        training: bool,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let b = self.check_inputs(x, z, labels)?;
        let w0 = self.cfg.widths[0];
        let (gh, gw) = self.cfg.grid_at(1);
        let t = gh * gw;

        let emb = self.embed1.forward(x)?;
        let to_tokens = {
            let mut cache = self.token_maps.borrow_mut();
            std::rc::Rc::clone(cache.entry(b).or_insert_with(|| {
                std::rc::Rc::new(PermuteMap::map_to_tokens(b, w0, gh, gw))
            }))
        };
        let tokens = emb.permute(&to_tokens)?; // [B,T,w0]
        let zb = z
            .reshape(&[b, 1, self.cfg.z_dim])?
            .broadcast_to_shape(&[b, t, self.cfg.z_dim])?;
        let cat = concat(&[&tokens, &zb], 2)?.reshape(&[b * t, w0 + self.cfg.z_dim])?;
        let mut feat = self
            .compress1
            .apply(&cat)?
            .reshape(&[b, t, w0])?
            .permute(&to_tokens.inverse())?;
        for layer in &self.layers1 {
            feat = layer.forward(&feat, labels, training)?;
        }
        let rgb = self.to_rgb1.forward(&feat)?;
        let next = self.split1.forward(&feat)?;
        Ok((rgb, next))
    }

    /// Block i in 2..=N: add the re-embedded condition (unless the
    /// single-input ablation removed it), run the depthwise layers, emit RGB
    /// and, except at pixel resolution, the next feature map.
    pub fn dw_block_forward(
        &self,
        block_index: usize,
        feat: &Tensor<T>,
        x: &Tensor<T>,
        labels: &[SceneLabel],
        training: bool,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        if !(2..=self.cfg.blocks).contains(&block_index) {
            return Err(Error::Contract(format!(
                "block index {block_index} outside 2..={}",
                self.cfg.blocks
            )));
        }
        let blk = &self.blocks[block_index - 2];
        let (gh, gw) = self.cfg.grid_at(block_index);
        let width = self.cfg.widths[block_index - 1];
        if feat.shape() != [feat.shape()[0], width, gh, gw] {
            return Err(Error::Config(format!(
                "block {block_index} expects feature grid [{width},{gh},{gw}], got {:?}",
                feat.shape()
            )));
        }
        let mut feat = feat.clone();
        if let Some(ce) = &blk.cond_embed {
            feat = feat.add(&ce.forward(x)?)?;
        }
        for layer in &blk.layers {
            feat = layer.forward(&feat, labels, training)?;
        }
        let rgb = blk.to_rgb.forward(&feat)?;
        let next = match &blk.split {
            Some(split) => Some(split.forward(&feat)?),
            None => None,
        };
        Ok((rgb, next))
    }

    fn upsample2x(&self, rgb: &Tensor<T>) -> Result<Tensor<T>> {
        let s = rgb.shape();
        let (b, gh, gw) = (s[0], s[2], s[3]);
        let map = {
            let mut cache = self.upsample.borrow_mut();
            Arc::clone(
                cache
                    .entry((b, gh))
                    .or_insert_with(|| SparseMap::upsample2x_bilinear(b, 3, gh, gw)),
            )
        };
        rgb.sparse_apply(map, false)
    }

    /// Full forward pass to an equirectangular image in [-1, 1].
    pub fn generate(
        &self,
        x: &Tensor<T>,
        z: &Tensor<T>,
        labels: &[SceneLabel],
        training: bool,
    ) -> Result<Tensor<T>> {
        let (rgb1, feat1) = self.mixer_block_forward(x, z, labels, training)?;
        let mut rgb_acc = rgb1;
        let mut feat = Some(feat1);
        for i in 2..=self.cfg.blocks {
            let f = feat.take().expect("feature map exists for every block");
            let (rgb_i, next) = self.dw_block_forward(i, &f, x, labels, training)?;
            rgb_acc = self.upsample2x(&rgb_acc)?.add(&rgb_i)?;
            feat = next;
        }
        if self.cfg.final_tanh {
            Ok(rgb_acc.tanh_act())
        } else {
            Ok(rgb_acc)
        }
    }

    /// Trainable parameter count (buffers excluded).
    pub fn count_trainable_params(&self) -> u64 {
        let mut total = 0u64;
        self.visit("", &mut |_, p| {
            if p.trainable() {
                total += p.shape().iter().product::<usize>() as u64;
            }
        });
        total
    }
}

impl<T: Scalar> ParamSet<T> for Generator<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        let b1 = join(prefix, "block1");
        self.embed1.visit(&join(&b1, "embed"), f);
        self.compress1.visit(&join(&b1, "compress"), f);
        for (j, layer) in self.layers1.iter().enumerate() {
            layer.visit(&join(&b1, &format!("layer{j}")), f);
        }
        self.to_rgb1.visit(&join(&b1, "to_rgb"), f);
        self.split1.visit(&join(&b1, "split"), f);
        for (k, blk) in self.blocks.iter().enumerate() {
            let bp = join(prefix, &format!("block{}", k + 2));
            if let Some(ce) = &blk.cond_embed {
                ce.visit(&join(&bp, "cond_embed"), f);
            }
            for (j, layer) in blk.layers.iter().enumerate() {
                layer.visit(&join(&bp, &format!("layer{j}")), f);
            }
            blk.to_rgb.visit(&join(&bp, "to_rgb"), f);
            if let Some(split) = &blk.split {
                split.visit(&join(&bp, "split"), f);
            }
        }
    }
}

/// Toy-scale configuration shared by the generator gradient checks and the
/// discriminator ones (kept tiny so finite differences stay fast).
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        blocks: 2,
        widths: vec![3, 2],
        z_dim: 2,
        num_classes: 2,
        height: 4,
        depthwise_kernel: 3,
        layers_per_block: 1,
        disc_width: 6,
        disc_patch: 2,
        final_tanh: true,
        bn_momentum: 0.1,
        bn_epsilon: 1e-5,
        snapshot: crate::config::SnapshotConfig {
            size: 4,
            fov_h_deg: 90.0,
            fov_v_deg: 90.0,
        },
    }
}

pub fn gradcheck_blocks() -> Vec<GradCheckReport> {
    let cfg = toy_model_config();
    let mut rng = derive_rng(21, Stream::WeightInit, 0);
    let gen = Generator::<f64>::new(&mut rng, &cfg, &AblationToggles::default()).unwrap();
    let labels = vec![SceneLabel(0), SceneLabel(1)];
    let x = randn_t(200, &[2, 3, 4, 8]);
    let z = randn_t(201, &[2, 2]);

    let slots: Vec<(String, &Param<f64>)> = gen
        .named_params("")
        .into_iter()
        .filter(|(_, p)| p.trainable())
        .collect();
    let mut inputs = vec![x, z];
    for (_, p) in &slots {
        inputs.push(p.get().detach());
    }
    let block1 = check_fn("mixer block rgb+feat", &inputs, TOL_COMPOSITE, &|t| {
        for (i, (_, p)) in slots.iter().enumerate() {
            p.set_shared(t[i + 2].clone());
        }
        let (rgb, feat) = gen.mixer_block_forward(&t[0], &t[1], &labels, true)?;
        let wr = randn_t(202, rgb.shape());
        let wf = randn_t(203, feat.shape());
        rgb.mul(&wr)?.sum_all().add(&feat.mul(&wf)?.sum_all())
    });
    let full = check_fn("generate end-to-end", &inputs, TOL_COMPOSITE, &|t| {
        for (i, (_, p)) in slots.iter().enumerate() {
            p.set_shared(t[i + 2].clone());
        }
        let img = gen.generate(&t[0], &t[1], &labels, true)?;
        let w = randn_t(204, img.shape());
        Ok(img.mul(&w)?.sum_all())
    });
    vec![block1, full]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_gen(ablation: AblationToggles) -> Generator<f64> {
        let mut rng = derive_rng(300, Stream::WeightInit, 0);
        Generator::new(&mut rng, &toy_model_config(), &ablation).unwrap()
    }

    fn default_gen() -> Generator<f32> {
        let mut rng = derive_rng(301, Stream::WeightInit, 0);
        Generator::new(&mut rng, &ModelConfig::default(), &AblationToggles::default()).unwrap()
    }

    #[test]
    fn default_shape_chain() {
        let gen = default_gen();
        let x = Tensor::<f32>::zeros(&[1, 3, 64, 128]);
        let mut rng = derive_rng(302, Stream::Latent, 0);
        let z = sample_latent(&mut rng, 1, 64);
        let labels = [SceneLabel(3)];
        let (rgb, feat) = gen.mixer_block_forward(&x, &z, &labels, true).unwrap();
        assert_eq!(rgb.shape(), &[1, 3, 4, 8]);
        assert_eq!(feat.shape(), &[1, 64, 8, 16]);
        let out = gen.generate(&x, &z, &labels, true).unwrap();
        assert_eq!(out.shape(), &[1, 3, 64, 128]);
        assert!(out.all_finite());
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn condition_patch_sizes_follow_block_index() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.patch_at(2), 8);
        assert_eq!(cfg.patch_at(3), 4);
        assert_eq!(cfg.patch_at(4), 2);
        assert_eq!(cfg.patch_at(5), 1);
    }

    #[test]
    fn different_latents_give_different_outputs() {
        let gen = toy_gen(AblationToggles::default());
        let x = randn_t(310, &[1, 3, 4, 8]);
        let labels = [SceneLabel(0)];
        let mut rng = derive_rng(311, Stream::Latent, 0);
        let z1 = sample_latent(&mut rng, 1, 2);
        let z2 = sample_latent(&mut rng, 1, 2);
        let a = gen.generate(&x, &z1, &labels, false).unwrap();
        let b = gen.generate(&x, &z2, &labels, false).unwrap();
        let diff: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn zero_to_rgb_weights_give_exact_zero_canvas() {
        let gen = toy_gen(AblationToggles::default());
        for (name, p) in gen.named_params("") {
            if name.contains("to_rgb") {
                p.set(Tensor::zeros(&p.shape()));
            }
        }
        let x = randn_t(312, &[1, 3, 4, 8]);
        let mut rng = derive_rng(313, Stream::Latent, 0);
        let z = sample_latent(&mut rng, 1, 2);
        let out = gen.generate(&x, &z, &[SceneLabel(1)], true).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0), "tanh(0) = 0 everywhere");
    }

    #[test]
    fn fixed_inputs_are_bitwise_reproducible() {
        let gen = toy_gen(AblationToggles::default());
        let x = randn_t(314, &[2, 3, 4, 8]);
        let z = randn_t(315, &[2, 2]);
        let labels = [SceneLabel(0), SceneLabel(1)];
        let a = gen.generate(&x, &z, &labels, false).unwrap();
        let b = gen.generate(&x, &z, &labels, false).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn single_class_makes_labels_irrelevant() {
        let mut cfg = toy_model_config();
        cfg.num_classes = 1;
        let mut rng = derive_rng(316, Stream::WeightInit, 0);
        let gen = Generator::<f64>::new(&mut rng, &cfg, &AblationToggles::default()).unwrap();
        let x = randn_t(317, &[1, 3, 4, 8]);
        let z = randn_t(318, &[1, 2]);
        let a = gen.generate(&x, &z, &[SceneLabel(0)], true).unwrap();
        let b = gen.generate(&x, &z, &[SceneLabel(17)], true).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn single_input_ablation_removes_condition_path_to_later_blocks() {
        let gen = toy_gen(AblationToggles {
            single_input: true,
            ..AblationToggles::default()
        });
        let names: Vec<String> = gen.named_params("").into_iter().map(|(n, _)| n).collect();
        assert!(!names.iter().any(|n| n.contains("cond_embed")));
    }

    #[test]
    fn generator_fd_suite_passes() {
        for r in gradcheck_blocks() {
            assert!(r.passed(), "{}: max rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn wrong_latent_shape_is_config_error() {
        let gen = toy_gen(AblationToggles::default());
        let x = randn_t(319, &[1, 3, 4, 8]);
        let z = randn_t(320, &[1, 5]);
        assert!(gen.generate(&x, &z, &[SceneLabel(0)], true).is_err());
    }
}
