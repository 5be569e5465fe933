//! Procedural paired-sample synthesis: deterministic scenes, orthographic
//! aerial renders, analytic height maps and ray-cast ground views, plus the
//! on-disk dataset format.

mod dataset;
mod generate;
mod render;

pub use dataset::{
    load_pfm, load_png, read_dataset, read_manifest, read_sample, save_pfm, save_png,
    write_dataset, DatasetManifest, SampleMeta,
};
pub use generate::{generate_scene, make_sample, num_categories, scene_category, GeneratorConfig};
pub use render::{analytic_height, perturb_height, render_aerial, render_ground};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("malformed dataset (sample `{sample}`, field `{field}`): {msg}")]
    Format {
        sample: String,
        field: String,
        msg: String,
    },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Building,
    Tree,
    Road,
    Ground,
}

/// Axis-aligned footprint in world meters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Footprint {
    /// `x, y` is the min corner.
    Rect { x: f64, y: f64, w: f64, h: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Footprint {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Footprint::Rect { x, y, w, h } => px >= x && px < x + w && py >= y && py < y + h,
            Footprint::Disc { cx, cy, r } => {
                let (dx, dy) = (px - cx, py - cy);
                dx * dx + dy * dy <= r * r
            }
        }
    }

    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Footprint::Rect { x, y, w, h } => (x, y, x + w, y + h),
            Footprint::Disc { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub cls: ObjectClass,
    pub footprint: Footprint,
    pub height_m: f64,
    pub albedo: [f64; 3],
}

/// Deterministic description of one scene; everything else is rendered
/// from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub extent_m: f64,
    pub objects: Vec<SceneObject>,
}

/// Top-down RGB image, `[h, w, 3]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AerialImage {
    pub pixels: Array3<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    RawM,
    UnitScaled,
}

/// Per-pixel height aligned with the paired aerial image.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    pub values: Array2<f32>,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraMode {
    Perspective,
    Panorama,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundCamera {
    /// World position in meters.
    pub pos: [f64; 2],
    pub eye_height_m: f64,
    /// Radians; 0 faces +y ("north"). In panorama mode this is the left
    /// image edge.
    pub yaw: f64,
    pub mode: CameraMode,
    /// Horizontal field of view, radians (perspective only).
    pub hfov: f64,
}

/// Ground-level RGB view, `[h, w, 3]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundView {
    pub pixels: Array3<f32>,
    pub camera: GroundCamera,
}

#[derive(Debug, Clone)]
pub struct PairedSample {
    pub id: String,
    pub aerial: AerialImage,
    pub height: HeightMap,
    pub ground: GroundView,
    pub scene_seed: u64,
}

impl SceneSpec {
    /// Highest object covering the world point, ties broken towards the
    /// later object in the list (roads are listed after ground).
    pub fn topmost_at(&self, x: f64, y: f64) -> Option<&SceneObject> {
        let mut best: Option<&SceneObject> = None;
        for obj in &self.objects {
            if obj.footprint.contains(x, y)
                && best.map_or(true, |b| obj.height_m >= b.height_m)
            {
                best = Some(obj);
            }
        }
        best
    }

    pub fn max_height(&self) -> f64 {
        self.objects.iter().map(|o| o.height_m).fold(0.0, f64::max)
    }
}
