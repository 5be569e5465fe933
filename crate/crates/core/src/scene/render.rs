//! Aerial and ground renderers plus the analytic height map.

use super::{
    AerialImage, CameraMode, Footprint, GroundCamera, GroundView, HeightMap, Normalization,
    ObjectClass, SceneError, SceneSpec,
};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

/// Internal supersampling grid for the aerial render. Rendering at any
/// resolution that divides this grid is block-average consistent across
/// resolutions.
const AERIAL_BASE: usize = 256;

const SKY: [f32; 3] = [0.55, 0.72, 0.95];

/// Orthographic top-down render; each output pixel averages the albedo of
/// the topmost object over a sub-pixel grid.
pub fn render_aerial(scene: &SceneSpec, res: usize) -> Result<AerialImage, SceneError> {
    if res < 8 {
        return Err(SceneError::Config("aerial resolution must be >= 8".into()));
    }
    if AERIAL_BASE % res != 0 {
        return Err(SceneError::Config(format!(
            "aerial resolution must divide {AERIAL_BASE}"
        )));
    }
    let sub = AERIAL_BASE / res;
    let step = scene.extent_m / AERIAL_BASE as f64;
    let mut img = Array3::<f32>::zeros((res, res, 3));
    for i in 0..res {
        for j in 0..res {
            let mut acc = [0.0f64; 3];
            for si in 0..sub {
                for sj in 0..sub {
                    let x = (j * sub + sj) as f64 * step + step / 2.0;
                    // row 0 is north (max y)
                    let y = scene.extent_m - ((i * sub + si) as f64 * step + step / 2.0);
                    let albedo = scene
                        .topmost_at(x, y)
                        .map(|o| o.albedo)
                        .unwrap_or([0.0; 3]);
                    for c in 0..3 {
                        acc[c] += albedo[c];
                    }
                }
            }
            let n = (sub * sub) as f64;
            for c in 0..3 {
                img[[i, j, c]] = (acc[c] / n).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(AerialImage { pixels: img })
}

/// Exact per-pixel maximum object height under the orthographic ray,
/// sampled at pixel centers.
pub fn analytic_height(
    scene: &SceneSpec,
    res: usize,
    normalization: Normalization,
) -> HeightMap {
    let step = scene.extent_m / res as f64;
    let mut values = Array2::<f32>::zeros((res, res));
    for i in 0..res {
        for j in 0..res {
            let x = j as f64 * step + step / 2.0;
            let y = scene.extent_m - (i as f64 * step + step / 2.0);
            let h = scene
                .objects
                .iter()
                .filter(|o| o.footprint.contains(x, y))
                .map(|o| o.height_m)
                .fold(0.0, f64::max);
            values[[i, j]] = h as f32;
        }
    }
    if normalization == Normalization::UnitScaled {
        let max = values.iter().cloned().fold(0.0f32, f32::max);
        if max > 0.0 {
            values.mapv_inplace(|v| v / max);
        }
    }
    HeightMap {
        values,
        normalization,
    }
}

/// Add i.i.d. Gaussian noise of standard deviation `sigma` and clamp back
/// to the map's valid range.
pub fn perturb_height(h: &HeightMap, sigma: f64, seed: u64) -> HeightMap {
    if sigma == 0.0 {
        return h.clone();
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, sigma).expect("sigma >= 0");
    let hi = match h.normalization {
        Normalization::UnitScaled => 1.0f32,
        Normalization::RawM => f32::INFINITY,
    };
    let values = h.values.mapv(|v| {
        let n: f64 = normal.sample(&mut rng);
        (v + n as f32).clamp(0.0, hi)
    });
    HeightMap {
        values,
        normalization: h.normalization,
    }
}

struct Hit {
    dist: f64,
    albedo: [f64; 3],
}

/// Intersect a horizontal ray `origin + t * dir` with a footprint.
/// Returns `(t_enter, t_exit)` with `t_enter >= 0` when the ray hits.
fn ray_footprint(origin: [f64; 2], dir: [f64; 2], fp: &Footprint) -> Option<(f64, f64)> {
    match *fp {
        Footprint::Rect { x, y, w, h } => {
            let mut t0 = 0.0f64;
            let mut t1 = f64::INFINITY;
            for (o, d, lo, hi) in [
                (origin[0], dir[0], x, x + w),
                (origin[1], dir[1], y, y + h),
            ] {
                if d.abs() < 1e-12 {
                    if o < lo || o > hi {
                        return None;
                    }
                } else {
                    let (mut a, mut b) = ((lo - o) / d, (hi - o) / d);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    t0 = t0.max(a);
                    t1 = t1.min(b);
                    if t0 > t1 {
                        return None;
                    }
                }
            }
            (t1 >= 0.0).then_some((t0.max(0.0), t1))
        }
        Footprint::Disc { cx, cy, r } => {
            let (ox, oy) = (origin[0] - cx, origin[1] - cy);
            let b = ox * dir[0] + oy * dir[1];
            let c = ox * ox + oy * oy - r * r;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let (t0, t1) = (-b - s, -b + s);
            (t1 >= 0.0).then_some((t0.max(0.0), t1))
        }
    }
}

fn distance_fade(dist: f64, extent: f64) -> f64 {
    let f = 1.0 - dist / (1.6 * extent);
    0.35 + 0.65 * f.clamp(0.0, 1.0)
}

/// Cast one ray with horizontal unit direction `dir` and vertical slope
/// `slope` (tan of elevation per unit horizontal distance).
fn cast_ray(
    scene: &SceneSpec,
    camera: &GroundCamera,
    dir: [f64; 2],
    slope: f64,
) -> [f32; 3] {
    let eye = camera.eye_height_m;
    // distance at which the ray meets the ground plane
    let ground_t = if slope < 0.0 { eye / -slope } else { f64::INFINITY };
    let mut best: Option<Hit> = None;
    for obj in &scene.objects {
        if obj.height_m <= 0.0 {
            continue;
        }
        let Some((t_in, t_out)) = ray_footprint(camera.pos, dir, &obj.footprint) else {
            continue;
        };
        let enter_height = eye + t_in * slope;
        let t_hit = if (0.0..=obj.height_m).contains(&enter_height) {
            // wall hit at footprint entry
            Some(t_in)
        } else if slope < 0.0 && enter_height > obj.height_m {
            // descending ray can land on the roof
            let t_roof = (obj.height_m - eye) / slope;
            (t_roof <= t_out).then_some(t_roof)
        } else {
            None
        };
        if let Some(t) = t_hit {
            if t <= ground_t && best.as_ref().map_or(true, |b| t < b.dist) {
                best = Some(Hit {
                    dist: t,
                    albedo: obj.albedo,
                });
            }
        }
    }
    let (albedo, dist) = match best {
        Some(hit) => (hit.albedo, hit.dist),
        None => {
            if ground_t.is_finite() {
                let gx = camera.pos[0] + ground_t * dir[0];
                let gy = camera.pos[1] + ground_t * dir[1];
                let albedo = scene
                    .topmost_at(gx, gy)
                    .filter(|o| o.height_m == 0.0)
                    .map(|o| o.albedo)
                    .unwrap_or([SKY[0] as f64, SKY[1] as f64, SKY[2] as f64]);
                (albedo, ground_t)
            } else {
                return SKY;
            }
        }
    };
    let fade = distance_fade(dist, scene.extent_m);
    [
        (albedo[0] * fade).clamp(0.0, 1.0) as f32,
        (albedo[1] * fade).clamp(0.0, 1.0) as f32,
        (albedo[2] * fade).clamp(0.0, 1.0) as f32,
    ]
}

fn on_road(scene: &SceneSpec, pos: [f64; 2]) -> bool {
    scene
        .objects
        .iter()
        .any(|o| o.cls == ObjectClass::Road && o.footprint.contains(pos[0], pos[1]))
}

/// Ray-cast ground-level render with flat shading and distance fade.
pub fn render_ground(
    scene: &SceneSpec,
    camera: &GroundCamera,
    res: (usize, usize),
) -> Result<GroundView, SceneError> {
    let (rows, cols) = res;
    if rows == 0 || cols == 0 {
        return Err(SceneError::Config("ground resolution must be positive".into()));
    }
    let has_road = scene.objects.iter().any(|o| o.cls == ObjectClass::Road);
    if has_road && !on_road(scene, camera.pos) {
        return Err(SceneError::Camera(format!(
            "camera position ({:.2}, {:.2}) is not on a road",
            camera.pos[0], camera.pos[1]
        )));
    }
    if camera.mode == CameraMode::Perspective
        && !(0.0..std::f64::consts::PI).contains(&camera.hfov)
    {
        return Err(SceneError::Camera("hfov must be in (0, pi)".into()));
    }
    let mut img = Array3::<f32>::zeros((rows, cols, 3));
    let forward = [camera.yaw.sin(), camera.yaw.cos()];
    let right = [camera.yaw.cos(), -camera.yaw.sin()];
    match camera.mode {
        CameraMode::Perspective => {
            let tan_half = (camera.hfov / 2.0).tan();
            let aspect = rows as f64 / cols as f64;
            for i in 0..rows {
                let v = (1.0 - 2.0 * (i as f64 + 0.5) / rows as f64) * tan_half * aspect;
                for j in 0..cols {
                    let u = (2.0 * (j as f64 + 0.5) / cols as f64 - 1.0) * tan_half;
                    let hx = forward[0] + u * right[0];
                    let hy = forward[1] + u * right[1];
                    let norm = (hx * hx + hy * hy).sqrt();
                    let dir = [hx / norm, hy / norm];
                    let slope = v / norm;
                    let px = cast_ray(scene, camera, dir, slope);
                    for c in 0..3 {
                        img[[i, j, c]] = px[c];
                    }
                }
            }
        }
        CameraMode::Panorama => {
            // columns span a full turn starting at yaw; rows span
            // elevation [-pi/4, pi/4]
            let el_max = std::f64::consts::FRAC_PI_4;
            for i in 0..rows {
                let el = el_max * (1.0 - 2.0 * (i as f64 + 0.5) / rows as f64);
                let slope = el.tan();
                for j in 0..cols {
                    // Snap azimuths to a fine global grid of turns so that a
                    // yaw shift by a multiple of the column step reproduces
                    // bit-identical columns (panorama shift equivariance).
                    const GRID: f64 = (1u64 << 20) as f64;
                    let turns = camera.yaw / std::f64::consts::TAU + j as f64 / cols as f64;
                    let az = std::f64::consts::TAU * ((turns * GRID).round() / GRID);
                    let dir = [az.sin(), az.cos()];
                    let px = cast_ray(scene, camera, dir, slope);
                    for c in 0..3 {
                        img[[i, j, c]] = px[c];
                    }
                }
            }
        }
    }
    Ok(GroundView {
        pixels: img,
        camera: *camera,
    })
}
