//! Synthetic detection scenes.
//!
//! A scene is a handful of labelled boxes on the unit canvas. Its feature
//! map holds, for every grid cell, the fraction of the cell covered by each
//! class, projected to the model width by a fixed random matrix, plus a
//! sinusoidal encoding of the cell position. Everything is derived from the
//! master seed and the scene index, so any scene can be rebuilt on its own.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::denoising::GtObject;
use crate::error::{invalid, Result};
use crate::geometry::BBox;
use crate::model::{grid_positions, FeatureMap};

pub const MIN_BOX_SIDE: f64 = 0.05;
pub const MAX_BOX_SIDE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_classes: usize,
    pub max_objects: usize,
    pub grid: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 200,
            n_classes: 8,
            max_objects: 5,
            grid: 8,
            feature_dim: 64,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 {
            return Err(invalid("dataset needs at least one train and one val scene"));
        }
        if self.n_classes < 2 {
            return Err(invalid("dataset needs at least two classes"));
        }
        if self.max_objects == 0 || self.grid == 0 {
            return Err(invalid("max_objects and grid must be positive"));
        }
        if self.feature_dim < self.n_classes {
            return Err(invalid(format!(
                "feature_dim {} smaller than class count {}",
                self.feature_dim, self.n_classes
            )));
        }
        Ok(())
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.n_train
    }

    pub fn val_indices(&self) -> std::ops::Range<usize> {
        self.n_train..self.n_train + self.n_val
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub index: usize,
    pub objects: Vec<GtObject>,
    pub features: FeatureMap,
}

// Stream 0 is reserved for the class projection; scene `i` uses stream `i + 1`.
fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Fixed `n_classes x dim` projection of the occupancy channels.
pub fn class_projection(seed: u64, n_classes: usize, dim: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let a = (3.0 / n_classes as f64).sqrt();
    Tensor::from_shape_fn((n_classes, dim), |_| rng.gen_range(-a..a))
}

/// Per-cell, per-class covered fraction, capped at 1. Shape `grid^2 x n_classes`.
pub fn occupancy(objects: &[GtObject], n_classes: usize, grid: usize) -> Tensor {
    let mut occ = Tensor::zeros((grid * grid, n_classes));
    let cell = 1.0 / grid as f64;
    for obj in objects {
        let b = obj.bbox.to_xyxy();
        for v in 0..grid {
            let (cy0, cy1) = (v as f64 * cell, (v + 1) as f64 * cell);
            let oy = (b.y1.min(cy1) - b.y0.max(cy0)).max(0.0);
            if oy == 0.0 {
                continue;
            }
            for u in 0..grid {
                let (cx0, cx1) = (u as f64 * cell, (u + 1) as f64 * cell);
                let ox = (b.x1.min(cx1) - b.x0.max(cx0)).max(0.0);
                occ[[v * grid + u, obj.label]] += ox * oy / (cell * cell);
            }
        }
    }
    occ.mapv_inplace(|x| x.min(1.0));
    occ
}

/// Render the feature map of `objects` with the projection derived from `seed`.
pub fn render_features(
    objects: &[GtObject],
    n_classes: usize,
    grid: usize,
    dim: usize,
    seed: u64,
) -> Result<FeatureMap> {
    if dim < n_classes {
        return Err(invalid(format!("feature dim {dim} < class count {n_classes}")));
    }
    if let Some(o) = objects.iter().find(|o| o.label >= n_classes) {
        return Err(invalid(format!("label {} out of range", o.label)));
    }
    let occ = occupancy(objects, n_classes, grid);
    let proj = class_projection(seed, n_classes, dim);
    Ok(FeatureMap {
        grid,
        features: occ.dot(&proj),
        pos: grid_positions(grid, dim),
    })
}

/// Scene `index` of the dataset; train and validation share one index space.
pub fn generate_scene(cfg: &DatasetConfig, index: usize) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index);
    let k = rng.gen_range(1..=cfg.max_objects);
    let objects: Vec<GtObject> = (0..k)
        .map(|_| {
            let w = rng.gen_range(MIN_BOX_SIDE..=MAX_BOX_SIDE);
            let h = rng.gen_range(MIN_BOX_SIDE..=MAX_BOX_SIDE);
            let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
            let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
            let label = rng.gen_range(0..cfg.n_classes);
            GtObject::new(BBox::new(cx, cy, w, h), label)
        })
        .collect();
    let features = render_features(&objects, cfg.n_classes, cfg.grid, cfg.feature_dim, cfg.seed)?;
    Ok(Scene {
        seed: cfg.seed,
        index,
        objects,
        features,
    })
}

pub fn generate_range(cfg: &DatasetConfig, range: std::ops::Range<usize>) -> Result<Vec<Scene>> {
    range.map(|i| generate_scene(cfg, i)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneRecord {
    pub seed: u64,
    pub index: usize,
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
}

impl From<&Scene> for SceneRecord {
    fn from(s: &Scene) -> Self {
        Self {
            seed: s.seed,
            index: s.index,
            boxes: s.objects.iter().map(|o| o.bbox.as_array()).collect(),
            labels: s.objects.iter().map(|o| o.label).collect(),
        }
    }
}

/// One JSON object per line: seed, index, boxes (cx, cy, w, h), labels.
pub fn dump_scenes<W: Write>(scenes: &[Scene], mut out: W) -> std::io::Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut out, &SceneRecord::from(s))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
