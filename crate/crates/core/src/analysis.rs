//! Analytic parameter and multiply-accumulate accounting for the generator,
//! plus a peak activation-memory estimate.
//!
//! Conventions (single-image inference, batch 1):
//! - an affine map of in -> out costs in*out MACs per application site and
//!   in*out + out parameters (bias adds are not MACs);
//! - a depthwise convolution costs k^2 * H * W * C MACs and C*(k^2 + 1)
//!   parameters per conv;
//! - normalization, GELU, tanh and bilinear upsampling count 0 MACs;
//! - normalization parameters count gain/bias tables only (running
//!   statistics are buffers, not parameters).

use crate::config::{AblationToggles, ModelConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerCost {
    pub params: u64,
    pub macs: u64,
}

impl std::ops::Add for LayerCost {
    type Output = LayerCost;
    fn add(self, o: LayerCost) -> LayerCost {
        LayerCost {
            params: self.params + o.params,
            macs: self.macs + o.macs,
        }
    }
}

impl std::ops::AddAssign for LayerCost {
    fn add_assign(&mut self, o: LayerCost) {
        *self = *self + o;
    }
}

pub fn affine_cost(in_dim: u64, out_dim: u64, applications: u64) -> LayerCost {
    LayerCost {
        params: in_dim * out_dim + out_dim,
        macs: in_dim * out_dim * applications,
    }
}

pub fn depthwise_conv_cost(channels: u64, kernel: u64, grid_h: u64, grid_w: u64) -> LayerCost {
    LayerCost {
        params: channels * (kernel * kernel + 1),
        macs: kernel * kernel * grid_h * grid_w * channels,
    }
}

pub fn cond_norm_cost(num_classes: u64, channels: u64) -> LayerCost {
    LayerCost {
        params: 2 * num_classes * channels,
        macs: 0,
    }
}

fn mixer_layer_cost(channels: u64, tokens: u64, classes: u64) -> LayerCost {
    let mut c = LayerCost::default();
    c += cond_norm_cost(classes, channels); // token norm
    c += affine_cost(tokens, tokens, channels); // token fc1, one site per channel
    c += affine_cost(tokens, tokens, channels); // token fc2
    c += cond_norm_cost(classes, channels); // channel norm
    c += affine_cost(channels, 2 * channels, tokens); // channel fc1, one site per token
    c += affine_cost(2 * channels, channels, tokens); // channel fc2
    c
}

fn depthwise_layer_cost(
    channels: u64,
    kernel: u64,
    grid_h: u64,
    grid_w: u64,
    classes: u64,
) -> LayerCost {
    let tokens = grid_h * grid_w;
    let mut c = LayerCost::default();
    c += cond_norm_cost(classes, channels);
    c += depthwise_conv_cost(channels, kernel, grid_h, grid_w);
    c += depthwise_conv_cost(channels, kernel, grid_h, grid_w);
    c += cond_norm_cost(classes, channels);
    c += affine_cost(channels, 2 * channels, tokens);
    c += affine_cost(2 * channels, channels, tokens);
    c
}

#[derive(Debug, Clone)]
pub struct BlockCost {
    pub name: String,
    pub cost: LayerCost,
}

/// Per-block and total generator cost (batch-1 inference).
pub fn generator_cost(
    cfg: &ModelConfig,
    ablation: &AblationToggles,
) -> (Vec<BlockCost>, LayerCost) {
    let classes = if ablation.plain_bn { 1 } else { cfg.num_classes } as u64;
    let k = cfg.depthwise_kernel as u64;
    let mut blocks = Vec::new();
    let mut total = LayerCost::default();

    for i in 1..=cfg.blocks {
        let (gh, gw) = cfg.grid_at(i);
        let (gh, gw) = (gh as u64, gw as u64);
        let tokens = gh * gw;
        let width = cfg.widths[i - 1] as u64;
        let patch = cfg.patch_at(i) as u64;
        let mut c = LayerCost::default();

        if i == 1 {
            c += affine_cost(3 * patch * patch, width, tokens); // patch embedding
            c += affine_cost(width + cfg.z_dim as u64, width, tokens); // z compression
            for _ in 0..cfg.layers_per_block {
                c += if ablation.no_mixer_block1 {
                    depthwise_layer_cost(width, k, gh, gw, classes)
                } else {
                    mixer_layer_cost(width, tokens, classes)
                };
            }
        } else {
            if !ablation.single_input {
                c += affine_cost(3 * patch * patch, width, tokens); // condition embedding
            }
            for _ in 0..cfg.layers_per_block {
                c += depthwise_layer_cost(width, k, gh, gw, classes);
            }
        }
        c += affine_cost(width, 3, tokens); // to RGB
        if i < cfg.blocks {
            c += affine_cost(width, 4 * cfg.widths[i] as u64, tokens); // patch split
        }
        total += c;
        blocks.push(BlockCost {
            name: format!("block{i}"),
            cost: c,
        });
    }
    (blocks, total)
}

/// Peak live activation bytes during generator inference (batch 1, 4-byte
/// reals): per block, the condition canvas, the incoming and outgoing
/// feature maps, the block RGB and the accumulated RGB are alive at once.
pub fn generator_activation_peak_bytes(cfg: &ModelConfig) -> u64 {
    let canvas = 3 * cfg.height as u64 * cfg.width_px() as u64;
    let mut peak = 0u64;
    for i in 1..=cfg.blocks {
        let (gh, gw) = cfg.grid_at(i);
        let tokens = (gh * gw) as u64;
        let width = cfg.widths[i - 1] as u64;
        let feat_out = if i < cfg.blocks {
            (cfg.widths[i] as u64) * tokens * 4 // next block's grid is 4x the tokens at half... doubled both axes
        } else {
            0
        };
        let live = canvas + width * tokens + feat_out + 3 * tokens + 3 * tokens;
        peak = peak.max(live);
    }
    peak * 4
}

/// Horizontal receptive-field reach of one block's depthwise stack, in
/// tokens: layers * convs-per-layer * kernel radius.
pub fn depthwise_token_reach(cfg: &ModelConfig) -> usize {
    cfg.layers_per_block * 2 * (cfg.depthwise_kernel / 2)
}

/// Machine-readable cost report: `key = value` lines.
pub fn render_report(cfg: &ModelConfig, ablation: &AblationToggles) -> String {
    let (blocks, total) = generator_cost(cfg, ablation);
    let mut out = String::new();
    for b in &blocks {
        out.push_str(&format!("{}.params = {}\n", b.name, b.cost.params));
        out.push_str(&format!("{}.macs = {}\n", b.name, b.cost.macs));
    }
    out.push_str(&format!("total.params = {}\n", total.params));
    out.push_str(&format!("total.macs = {}\n", total.macs));
    out.push_str(&format!(
        "total.params_m = {:.4}\n",
        total.params as f64 / 1.0e6
    ));
    out.push_str(&format!("total.mac_g = {:.4}\n", total.macs as f64 / 1.0e9));
    let peak = generator_activation_peak_bytes(cfg);
    out.push_str(&format!("activation.peak_bytes = {peak}\n"));
    out.push_str(&format!(
        "activation.peak_mb = {:.4}\n",
        peak as f64 / (1024.0 * 1024.0)
    ));
    out.push_str(&format!(
        "summary.row = params [M] {:.2} | MAC [G] {:.2}\n",
        total.params as f64 / 1.0e6,
        total.macs as f64 / 1.0e9
    ));
    out
}
