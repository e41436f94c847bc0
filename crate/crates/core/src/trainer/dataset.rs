//! Dataset directory layout: one subdirectory per scene class (sorted class
//! names define label ids), PNG panoramas inside. Images are decoded once
//! and cached.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{embed_snapshot, extract_snapshot, CameraPose, EquirectCanvas};
use crate::layers::SceneLabel;
use crate::png_io::read_rgb_png;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub label: SceneLabel,
}

pub struct Dataset {
    class_names: Vec<String>,
    entries: Vec<DatasetEntry>,
    images: Vec<Tensor<f32>>,
}

impl Dataset {
    /// Load every `<root>/<class>/*.png`; images must be [3, H, 2H] with the
    /// configured height.
    pub fn load(root: &Path, height: usize) -> Result<Dataset> {
        let mut class_names: Vec<String> = std::fs::read_dir(root)
            .map_err(|e| Error::Data {
                path: root.to_path_buf(),
                msg: e.to_string(),
            })?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        class_names.sort();
        if class_names.is_empty() {
            return Err(Error::Data {
                path: root.to_path_buf(),
                msg: "no class subdirectories".into(),
            });
        }
        let mut entries = Vec::new();
        let mut images = Vec::new();
        for (label, class) in class_names.iter().enumerate() {
            let dir = root.join(class);
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| Error::Data {
                    path: dir.clone(),
                    msg: e.to_string(),
                })?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            files.sort();
            for path in files {
                let img: Tensor<f32> = read_rgb_png(&path)?;
                let s = img.shape().to_vec();
                if s != [3, height, 2 * height] {
                    return Err(Error::Data {
                        path,
                        msg: format!(
                            "expected a [3, {height}, {}] panorama, decoded {s:?}",
                            2 * height
                        ),
                    });
                }
                entries.push(DatasetEntry {
                    path,
                    label: SceneLabel(label),
                });
                images.push(img);
            }
        }
        if entries.is_empty() {
            return Err(Error::Data {
                path: root.to_path_buf(),
                msg: "no png images found".into(),
            });
        }
        Ok(Dataset {
            class_names,
            entries,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn entry(&self, i: usize) -> &DatasetEntry {
        &self.entries[i]
    }

    pub fn image(&self, i: usize) -> &Tensor<f32> {
        &self.images[i]
    }
}

/// One training example: the embedded-snapshot condition, the (rolled)
/// target panorama, and the embedding mask.
pub struct PreparedExample {
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
    pub mask: Tensor<f32>,
}

/// Snapshot camera used for data preparation and inference conditioning.
pub fn snapshot_pose(config: &Config) -> Result<CameraPose> {
    CameraPose::new(
        0.0,
        0.0,
        config.model.snapshot.fov_h_deg,
        config.model.snapshot.fov_v_deg,
    )
}

/// Roll the panorama by a uniform random shift, extract the centered
/// snapshot from the rolled image, and embed it into a zero canvas.
pub fn prepare_example(
    image: &Tensor<f32>,
    config: &Config,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedExample> {
    let w = config.model.width_px();
    let shift = if config.train.roll_augment {
        rng.gen_range(0..w as i64)
    } else {
        0
    };
    let rolled = image.roll_last(shift)?;
    let canvas = EquirectCanvas::new(rolled)?;
    let pose = snapshot_pose(config)?;
    let s = config.model.snapshot.size;
    let snap = extract_snapshot(&canvas, &pose, s, s)?;
    let (x, mask) = embed_snapshot(&snap, &pose, config.model.height)?;
    Ok(PreparedExample {
        x: x.into_pixels(),
        y: canvas.into_pixels(),
        mask: mask.values().clone(),
    })
}
