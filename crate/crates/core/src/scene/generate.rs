//! Seedable scene generation.

use super::{
    analytic_height, render_aerial, render_ground, CameraMode, Footprint, GroundCamera,
    Normalization, ObjectClass, PairedSample, SceneError, SceneObject, SceneSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GeneratorConfig {
    pub extent_m: f64,
    pub aerial_resolution: usize,
    /// (rows, cols) of the ground render.
    pub ground_resolution: (usize, usize),
    pub camera_mode: CameraMode,
    /// Horizontal FOV in radians (perspective mode).
    pub hfov: f64,
    pub eye_height_m: f64,
    pub road_width_m: f64,
    pub building_count: (usize, usize),
    pub tree_count: (usize, usize),
    pub building_height_m: (f64, f64),
    pub tree_height_m: (f64, f64),
    pub building_side_m: (f64, f64),
    pub tree_radius_m: (f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            extent_m: 48.0,
            aerial_resolution: 64,
            ground_resolution: (64, 64),
            camera_mode: CameraMode::Perspective,
            hfov: std::f64::consts::FRAC_PI_2,
            eye_height_m: 1.6,
            road_width_m: 6.0,
            building_count: (2, 4),
            tree_count: (1, 3),
            building_height_m: (3.0, 30.0),
            tree_height_m: (2.0, 15.0),
            building_side_m: (5.0, 11.0),
            tree_radius_m: (1.2, 2.6),
        }
    }
}

impl GeneratorConfig {
    pub fn panorama() -> Self {
        GeneratorConfig {
            camera_mode: CameraMode::Panorama,
            ground_resolution: (32, 128),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.extent_m <= 0.0 {
            return Err(SceneError::Config("extent_m must be positive".into()));
        }
        if self.aerial_resolution < 8 {
            return Err(SceneError::Config("aerial_resolution must be >= 8".into()));
        }
        if self.ground_resolution.0 == 0 || self.ground_resolution.1 == 0 {
            return Err(SceneError::Config("ground_resolution must be positive".into()));
        }
        for (lo, hi, what) in [
            (self.building_height_m.0, self.building_height_m.1, "building_height_m"),
            (self.tree_height_m.0, self.tree_height_m.1, "tree_height_m"),
            (self.building_side_m.0, self.building_side_m.1, "building_side_m"),
            (self.tree_radius_m.0, self.tree_radius_m.1, "tree_radius_m"),
        ] {
            if lo > hi || lo < 0.0 {
                return Err(SceneError::Config(format!("empty bounds for {what}")));
            }
        }
        if self.building_count.0 > self.building_count.1
            || self.tree_count.0 > self.tree_count.1
        {
            return Err(SceneError::Config("empty count bounds".into()));
        }
        if self.road_width_m <= 0.0 || self.road_width_m >= self.extent_m {
            return Err(SceneError::Config("road_width_m out of range".into()));
        }
        if !(0.0..std::f64::consts::PI).contains(&self.hfov) || self.hfov == 0.0 {
            return Err(SceneError::Config("hfov must be in (0, pi)".into()));
        }
        Ok(())
    }

    /// Center line of the single east-west road.
    pub fn road_center_y(&self) -> f64 {
        self.extent_m / 2.0
    }

    /// The canonical camera: mid-road, facing north. The camera
    /// distribution is intentionally degenerate so the aerial-to-ground
    /// mapping is statistically learnable at toy scale.
    pub fn camera(&self) -> GroundCamera {
        GroundCamera {
            pos: [self.extent_m / 2.0, self.road_center_y()],
            eye_height_m: self.eye_height_m,
            yaw: 0.0,
            mode: self.camera_mode,
            hfov: self.hfov,
        }
    }
}

fn sample_range<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn sample_count<R: Rng>(rng: &mut R, bounds: (usize, usize)) -> usize {
    if bounds.1 > bounds.0 {
        rng.random_range(bounds.0..=bounds.1)
    } else {
        bounds.0
    }
}

/// Deterministically generate a scene from `(seed, config)`.
///
/// Layout: a ground plane, one east-west road through the middle, and
/// buildings/trees placed in the northern half so the canonical
/// north-facing camera sees them.
pub fn generate_scene(seed: u64, config: &GeneratorConfig) -> Result<SceneSpec, SceneError> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let e = config.extent_m;
    let mut objects = Vec::new();

    // Ground first, road second: equal-height ties resolve to the later
    // object, so the road paints over the ground.
    let g = 0.30 + rng.random_range(0.0..0.12);
    objects.push(SceneObject {
        cls: ObjectClass::Ground,
        footprint: Footprint::Rect { x: 0.0, y: 0.0, w: e, h: e },
        height_m: 0.0,
        albedo: [g * 0.8, g, g * 0.55],
    });
    let road_y = config.road_center_y() - config.road_width_m / 2.0;
    let r = 0.38 + rng.random_range(0.0..0.08);
    objects.push(SceneObject {
        cls: ObjectClass::Road,
        footprint: Footprint::Rect { x: 0.0, y: road_y, w: e, h: config.road_width_m },
        height_m: 0.0,
        albedo: [r, r, r],
    });

    let north_min = config.road_center_y() + config.road_width_m / 2.0 + 1.5;
    let margin = 1.0;
    let n_buildings = sample_count(&mut rng, config.building_count);
    let mut placed: Vec<(f64, f64, f64, f64)> = Vec::new();
    for _ in 0..n_buildings {
        for _attempt in 0..64 {
            let w = sample_range(&mut rng, config.building_side_m.0, config.building_side_m.1);
            let d = sample_range(&mut rng, config.building_side_m.0, config.building_side_m.1);
            let x = sample_range(&mut rng, margin, (e - w - margin).max(margin));
            let y = sample_range(&mut rng, north_min, (e - d - margin).max(north_min));
            let bb = (x, y, x + w, y + d);
            let overlaps = placed.iter().any(|p| {
                bb.0 < p.2 && p.0 < bb.2 && bb.1 < p.3 && p.1 < bb.3
            });
            if overlaps {
                continue;
            }
            placed.push(bb);
            let height =
                sample_range(&mut rng, config.building_height_m.0, config.building_height_m.1);
            // saturated random hue, independent of height/footprint
            let hue = rng.random_range(0.0..1.0);
            objects.push(SceneObject {
                cls: ObjectClass::Building,
                footprint: Footprint::Rect { x, y, w, h: d },
                height_m: height,
                albedo: hue_to_rgb(hue, 0.65, 0.75),
            });
            break;
        }
    }

    let n_trees = sample_count(&mut rng, config.tree_count);
    for _ in 0..n_trees {
        for _attempt in 0..64 {
            let r = sample_range(&mut rng, config.tree_radius_m.0, config.tree_radius_m.1);
            let cx = sample_range(&mut rng, margin + r, (e - r - margin).max(margin + r));
            let cy = sample_range(&mut rng, north_min + r, (e - r - margin).max(north_min + r));
            let bb = (cx - r, cy - r, cx + r, cy + r);
            let overlaps = placed.iter().any(|p| {
                bb.0 < p.2 && p.0 < bb.2 && bb.1 < p.3 && p.1 < bb.3
            });
            if overlaps {
                continue;
            }
            let height = sample_range(&mut rng, config.tree_height_m.0, config.tree_height_m.1);
            let gr = rng.random_range(0.35..0.6);
            objects.push(SceneObject {
                cls: ObjectClass::Tree,
                footprint: Footprint::Disc { cx, cy, r },
                height_m: height,
                albedo: [gr * 0.35, gr, gr * 0.3],
            });
            break;
        }
    }

    Ok(SceneSpec { seed, extent_m: e, objects })
}

/// Render the full paired sample for dataset index `index`: aerial view,
/// analytic height map and the canonical mid-road ground view.
pub fn make_sample(
    index: usize,
    base_seed: u64,
    config: &GeneratorConfig,
) -> Result<PairedSample, SceneError> {
    let scene_seed = base_seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let scene = generate_scene(scene_seed, config)?;
    let aerial = render_aerial(&scene, config.aerial_resolution)?;
    let height = analytic_height(&scene, config.aerial_resolution, Normalization::UnitScaled);
    let ground = render_ground(&scene, &config.camera(), config.ground_resolution)?;
    Ok(PairedSample {
        id: format!("s{index:05}"),
        aerial,
        height,
        ground,
        scene_seed,
    })
}

/// Category label used by the pinned metric classifier: number of
/// buildings relative to the configured minimum.
pub fn scene_category(scene: &SceneSpec, config: &GeneratorConfig) -> usize {
    let n = scene
        .objects
        .iter()
        .filter(|o| o.cls == ObjectClass::Building)
        .count();
    n.saturating_sub(config.building_count.0)
        .min(config.building_count.1 - config.building_count.0)
}

/// Number of classes produced by [`scene_category`].
pub fn num_categories(config: &GeneratorConfig) -> usize {
    config.building_count.1 - config.building_count.0 + 1
}

fn hue_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
