//! Shared fixtures for the integration suites: synthetic panorama datasets
//! and small training configurations.

use std::path::Path;

use mixer360::config::Config;
use mixer360::png_io::write_rgb_png;
use mixer360::tensor::Tensor;

/// Smooth class-dependent panorama so masked reconstruction has structure
/// to learn and classes are distinguishable.
pub fn synth_pano(h: usize, class: usize, variant: usize) -> Tensor<f32> {
    let w = 2 * h;
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let fx = x as f64 / w as f64 * std::f64::consts::TAU;
                let fy = y as f64 / h as f64 * std::f64::consts::PI;
                let v = match class % 2 {
                    0 => {
                        0.55 * (fx * (1.0 + variant as f64 * 0.3) + c as f64 * 0.8).sin()
                            * fy.sin()
                    }
                    _ => {
                        0.55 * (fy * 2.0 + variant as f64 * 0.7).cos()
                            * (fx + c as f64 * 0.5).cos()
                    }
                };
                data.push(v as f32);
            }
        }
    }
    Tensor::from_vec(data, &[3, h, w]).unwrap()
}

/// Write `per_class` panoramas for `classes` classes under `root`.
pub fn write_dataset(root: &Path, h: usize, classes: usize, per_class: usize) {
    for class in 0..classes {
        let dir = root.join(format!("class{class}"));
        std::fs::create_dir_all(&dir).unwrap();
        for v in 0..per_class {
            write_rgb_png(&dir.join(format!("{v}.png")), &synth_pano(h, class, v)).unwrap();
        }
    }
}

/// Two-block, narrow-width configuration that trains in milliseconds.
pub fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.model.blocks = 2;
    cfg.model.widths = vec![4, 3];
    cfg.model.z_dim = 3;
    cfg.model.num_classes = 2;
    cfg.model.height = 8;
    cfg.model.layers_per_block = 1;
    cfg.model.disc_width = 6;
    cfg.model.disc_patch = 2;
    cfg.model.snapshot.size = 8;
    cfg.train.batch_size = 2;
    cfg.train.iterations = 2;
    cfg.train.checkpoint_every = 0;
    cfg.train.sample_every = 0;
    cfg.train.log_every = 0;
    cfg
}
