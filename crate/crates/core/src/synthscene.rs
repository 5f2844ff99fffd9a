//! Deterministic synthetic scenes: a camera ring around the ego, oriented
//! boxes, rendered feature maps carrying per-object signatures and a
//! LiDAR-like point sampler.
//!
//! Signature channel layout (`SIGNATURE_CHANNELS` = 32):
//!
//! | channels | content |
//! |---|---|
//! | 0 | objectness |
//! | 1..4 | class one-hot |
//! | 4..7 | `w / 3`, `h / 3`, `l / 8` |
//! | 7, 8 | `(cos yaw + 1) / 2`, `(sin yaw + 1) / 2` |
//! | 9, 10 | `(v / 10 + 1) / 2` per component |
//! | 11 | center height mapped from the grid height range to `[0, 1]` |
//! | 12..28 | identity code (one Hadamard row per box slot, 0/1) |
//! | 28 | BEV range of the box center from the ego `/ 32 m` (a monocular depth cue) |
//! | 29..32 | random texture |
//!
//! Rendered pixels hold `weight * signature`, where the weight is a Gaussian
//! falloff from the projected box center, so channel 0 equals the weight and
//! `channel / channel0` recovers the signature.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bevgrid::{Box3D, GridSpec, LidarCloud};
use crate::geometry::{CameraModel, GeometryError, WorldPoint};
use crate::sampling::FeatureMap;

pub const SIGNATURE_CHANNELS: usize = 32;
pub const NUM_CLASSES: usize = 3;
pub const CH_OBJECTNESS: usize = 0;
pub const CH_CLASS: usize = 1;
pub const CH_SIZE: usize = 4;
pub const CH_YAW: usize = 7;
pub const CH_VELOCITY: usize = 9;
pub const CH_HEIGHT: usize = 11;
pub const CH_IDENTITY: usize = 12;
pub const IDENTITY_LEN: usize = 16;
pub const CH_RANGE: usize = CH_IDENTITY + IDENTITY_LEN;
pub const CH_TEXTURE: usize = CH_RANGE + 1;
/// Identity codes are Hadamard rows 1..16, so a scene holds at most 15 boxes.
pub const MAX_BOXES: usize = IDENTITY_LEN - 1;

const SIZE_SCALE: [f64; 3] = [3.0, 3.0, 8.0];
const MAX_SPEED: f64 = 10.0;
const RANGE_SCALE: f64 = 32.0;
pub const DEFAULT_GROUND_Y: f64 = -1.8;

/// Closest corner depth for a box to be drawn in a camera.
const NEAR_CLIP: f64 = 0.1;
/// Gaussian splat sigma as a fraction of the projected half extent.
const SPLAT_SIGMA: f64 = 0.8;
const PLACEMENT_RETRIES: usize = 400;
/// Minimum angular gap between boxes as seen from the ego (radians).
const AZIMUTH_MARGIN: f64 = 3.0 * PI / 180.0;
const MIN_RANGE: f64 = 7.0;
const MAX_RANGE: f64 = 22.0;
const LIDAR_MAX_RANGE: f64 = 60.0;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("placed {placed} of {requested} boxes before running out of retries")]
    PlacementFailure { placed: usize, requested: usize },
    #[error("at most {MAX_BOXES} boxes per scene, got {0}")]
    TooManyBoxes(usize),
    #[error(transparent)]
    Camera(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

/// Boxes plus the camera rig that observes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub boxes: Vec<Box3D>,
    pub cameras: Vec<CameraModel>,
    #[serde(default = "default_ground")]
    pub ground_y: f64,
}

fn default_ground() -> f64 {
    DEFAULT_GROUND_Y
}

impl Scene {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|source| SceneError::Json { path: path.display().to_string(), source })
    }
}

/// Six cameras at 60° spacing on a 0.5 m ring at `y = 0`, 160 × 128 px,
/// 80° horizontal field of view. The rear camera (index 3) has a 0.8×
/// focal length.
pub fn default_rig() -> Vec<CameraModel> {
    let (w, h) = (160u32, 128u32);
    let f = 80.0 / (40.0f64.to_radians()).tan();
    (0..6)
        .map(|k| {
            let yaw = k as f64 * PI / 3.0;
            let f = if k == 3 { 0.8 * f } else { f };
            let center = WorldPoint::new(0.5 * yaw.sin(), 0.0, 0.5 * yaw.cos());
            CameraModel::looking_along(f, f, 80.0, 64.0, w, h, center, yaw).expect("rig is valid")
        })
        .collect()
}

fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

/// Azimuth of the box center seen from the ego and the half-width of the
/// angular interval its footprint covers.
fn azimuth_interval(b: &Box3D) -> (f64, f64) {
    let mid = b.center[0].atan2(b.center[2]);
    let half = b.footprint().iter().map(|&(x, z)| wrap_angle(x.atan2(z) - mid).abs()).fold(0.0, f64::max);
    (mid, half)
}

/// Separating-axis test on two BEV footprints (touching counts as overlap).
pub fn footprints_overlap(a: &Box3D, b: &Box3D) -> bool {
    let pa = a.footprint();
    let pb = b.footprint();
    for poly in [&pa, &pb] {
        for k in 0..4 {
            let (x0, z0) = poly[k];
            let (x1, z1) = poly[(k + 1) % 4];
            let axis = (z1 - z0, x0 - x1);
            let proj = |p: &[(f64, f64); 4]| {
                p.iter().map(|&(x, z)| x * axis.0 + z * axis.1).fold((f64::MAX, f64::MIN), |(lo, hi), d| (lo.min(d), hi.max(d)))
            };
            let (a0, a1) = proj(&pa);
            let (b0, b1) = proj(&pb);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
    }
    true
}

fn sample_box(rng: &mut ChaCha8Rng) -> Box3D {
    let class_id = rng.random_range(0..NUM_CLASSES as u32);
    let (w, l) = match class_id {
        0 => (rng.random_range(1.6..2.0), rng.random_range(3.8..4.8)),
        1 => (rng.random_range(2.2..2.6), rng.random_range(5.5..7.0)),
        _ => (rng.random_range(1.0..1.2), rng.random_range(1.2..1.8)),
    };
    let h = rng.random_range(0.5..3.0);
    let y = rng.random_range(-2.0..1.0);
    let r = rng.random_range(MIN_RANGE..MAX_RANGE);
    let az = rng.random_range(-PI..PI);
    let yaw = rng.random_range(-PI..PI);
    let speed = rng.random_range(0.0..MAX_SPEED);
    let heading = rng.random_range(-PI..PI);
    Box3D {
        center: [r * az.sin(), y, r * az.cos()],
        size: [w, h, l],
        yaw,
        class_id,
        velocity: [speed * heading.sin(), speed * heading.cos()],
    }
}

fn inside_grid(g: &GridSpec, b: &Box3D) -> bool {
    b.footprint()
        .iter()
        .all(|&(x, z)| x > g.origin.0 && x < g.x_max() && z > g.origin.1 && z < g.z_max())
}

/// Random scene with `n_boxes` boxes on the default rig. Boxes sit 7–22 m
/// from the ego, inside the grid, with disjoint footprints and disjoint
/// azimuth intervals (so no box hides another from the rig).
pub fn generate(seed: u64, n_boxes: usize, g: &GridSpec) -> Result<Scene, SceneError> {
    if n_boxes > MAX_BOXES {
        return Err(SceneError::TooManyBoxes(n_boxes));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n_boxes);
    let mut retries = 0;
    while boxes.len() < n_boxes {
        if retries == PLACEMENT_RETRIES {
            return Err(SceneError::PlacementFailure { placed: boxes.len(), requested: n_boxes });
        }
        retries += 1;
        let cand = sample_box(&mut rng);
        if !inside_grid(g, &cand) {
            continue;
        }
        let (ma, ha) = azimuth_interval(&cand);
        let clear = boxes.iter().all(|b| {
            let (mb, hb) = azimuth_interval(b);
            !footprints_overlap(&cand, b) && wrap_angle(ma - mb).abs() > ha + hb + AZIMUTH_MARGIN
        });
        if clear {
            boxes.push(cand);
        }
    }
    Ok(Scene { seed, boxes, cameras: default_rig(), ground_y: DEFAULT_GROUND_Y })
}

/// Row `k` of the 16 × 16 Sylvester Hadamard matrix as 0/1 values.
pub fn identity_code(slot: usize) -> [f32; IDENTITY_LEN] {
    let row = slot + 1;
    let mut out = [0.0; IDENTITY_LEN];
    for (j, o) in out.iter_mut().enumerate() {
        *o = if (row & j).count_ones().is_multiple_of(2) { 1.0 } else { 0.0 };
    }
    out
}

/// Signature of the box in `slot` of a scene generated from `scene_seed`.
pub fn signature(b: &Box3D, slot: usize, scene_seed: u64, height_range: (f64, f64)) -> [f32; SIGNATURE_CHANNELS] {
    let mut s = [0.0f32; SIGNATURE_CHANNELS];
    s[CH_OBJECTNESS] = 1.0;
    s[CH_CLASS + (b.class_id as usize).min(NUM_CLASSES - 1)] = 1.0;
    for k in 0..3 {
        s[CH_SIZE + k] = (b.size[k] / SIZE_SCALE[k]).min(1.0) as f32;
    }
    s[CH_YAW] = ((b.yaw.cos() + 1.0) / 2.0) as f32;
    s[CH_YAW + 1] = ((b.yaw.sin() + 1.0) / 2.0) as f32;
    for k in 0..2 {
        s[CH_VELOCITY + k] = ((b.velocity[k] / MAX_SPEED).clamp(-1.0, 1.0) * 0.5 + 0.5) as f32;
    }
    let (lo, hi) = height_range;
    s[CH_HEIGHT] = ((b.center[1] - lo) / (hi - lo)).clamp(0.0, 1.0) as f32;
    s[CH_IDENTITY..CH_RANGE].copy_from_slice(&identity_code(slot));
    s[CH_RANGE] = (b.center[0].hypot(b.center[2]) / RANGE_SCALE).min(1.0) as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    rng.set_stream(slot as u64 + 1);
    for t in &mut s[CH_TEXTURE..] {
        *t = rng.random::<f32>();
    }
    s
}

/// Attributes recovered from an objectness-normalized signature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedSignature {
    pub class_id: u32,
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub center_y: f64,
}

/// Inverse of [`signature`] for the geometric attributes; `sig` must already
/// be divided by its objectness.
pub fn decode_signature(sig: &[f64], height_range: (f64, f64)) -> DecodedSignature {
    let class_id = (0..NUM_CLASSES)
        .max_by(|&a, &b| sig[CH_CLASS + a].total_cmp(&sig[CH_CLASS + b]))
        .unwrap_or(0) as u32;
    let size = [0, 1, 2].map(|k| (sig[CH_SIZE + k] * SIZE_SCALE[k]).max(0.05));
    let yaw = (2.0 * sig[CH_YAW + 1] - 1.0).atan2(2.0 * sig[CH_YAW] - 1.0);
    let velocity = [0, 1].map(|k| (2.0 * sig[CH_VELOCITY + k] - 1.0) * MAX_SPEED);
    let (lo, hi) = height_range;
    DecodedSignature { class_id, size, yaw, velocity, center_y: lo + sig[CH_HEIGHT] * (hi - lo) }
}

/// Rendering knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Image pixels per feature pixel.
    pub stride: f64,
    pub height_range: (f64, f64),
    /// Uniform `[0, amplitude)` noise added to every channel of background pixels.
    pub noise_amplitude: f64,
    pub noise_seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { stride: 2.0, height_range: GridSpec::default().height_range, noise_amplitude: 0.0, noise_seed: 0 }
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull (monotone chain).
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_convex(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
    let n = hull.len();
    n >= 3 && (0..n).all(|k| cross(hull[k], hull[(k + 1) % n], p) >= 0.0)
}

/// Projected hull of a box in one camera, or `None` if any corner is too
/// close to or behind the image plane.
pub fn projected_hull(cam: &CameraModel, b: &Box3D) -> Option<Vec<(f64, f64)>> {
    let mut pts = Vec::with_capacity(8);
    for c in b.corners() {
        let px = cam.project(c).ok()?;
        if px.depth < NEAR_CLIP {
            return None;
        }
        pts.push((px.u, px.v));
    }
    Some(convex_hull(&pts))
}

/// Renders one feature map per camera. Boxes are painted far to near so the
/// nearer box overwrites the farther one where their hulls overlap.
pub fn render(scene: &Scene, cfg: &RenderConfig) -> Vec<FeatureMap> {
    scene.cameras.iter().enumerate().map(|(k, cam)| render_camera(scene, k, cam, cfg)).collect()
}

fn render_camera(scene: &Scene, index: usize, cam: &CameraModel, cfg: &RenderConfig) -> FeatureMap {
    let fw = ((cam.width() - 1) as f64 / cfg.stride).floor() as usize + 1;
    let fh = ((cam.height() - 1) as f64 / cfg.stride).floor() as usize + 1;
    let mut fm = FeatureMap::zeros(index, fw, fh, SIGNATURE_CHANNELS, cfg.stride);
    let mut covered = vec![false; fw * fh];
    let eye = cam.center();
    let mut order: Vec<usize> = (0..scene.boxes.len()).collect();
    let dist = |b: &Box3D| (b.center[0] - eye.x).hypot(b.center[2] - eye.z);
    order.sort_by(|&a, &b| dist(&scene.boxes[b]).total_cmp(&dist(&scene.boxes[a])).then(a.cmp(&b)));
    for slot in order {
        let b = &scene.boxes[slot];
        let Some(hull) = projected_hull(cam, b) else { continue };
        let Ok(mid) = cam.project(WorldPoint::new(b.center[0], b.center[1], b.center[2])) else { continue };
        let (u_lo, u_hi) = hull.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
        let (v_lo, v_hi) = hull.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
        let su = (SPLAT_SIGMA * 0.5 * (u_hi - u_lo)).max(1e-6);
        let sv = (SPLAT_SIGMA * 0.5 * (v_hi - v_lo)).max(1e-6);
        let c_lo = (u_lo / cfg.stride).ceil().max(0.0) as usize;
        let r_lo = (v_lo / cfg.stride).ceil().max(0.0) as usize;
        let c_hi = (u_hi / cfg.stride).floor().min((fw - 1) as f64);
        let r_hi = (v_hi / cfg.stride).floor().min((fh - 1) as f64);
        if c_hi < 0.0 || r_hi < 0.0 {
            continue;
        }
        let sig = signature(b, slot, scene.seed, cfg.height_range);
        for r in r_lo..=r_hi as usize {
            for c in c_lo..=c_hi as usize {
                let p = (c as f64 * cfg.stride, r as f64 * cfg.stride);
                if !inside_convex(&hull, p) {
                    continue;
                }
                let du = (p.0 - mid.u) / su;
                let dv = (p.1 - mid.v) / sv;
                let w = (-0.5 * (du * du + dv * dv)).exp() as f32;
                for (t, &s) in fm.texel_mut(c, r).iter_mut().zip(&sig) {
                    *t = w * s;
                }
                covered[r * fw + c] = true;
            }
        }
    }
    if cfg.noise_amplitude > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed ^ scene.seed);
        rng.set_stream(index as u64);
        let amp = cfg.noise_amplitude as f32;
        for (px, _) in covered.iter().enumerate().filter(|(_, &c)| !c) {
            for t in &mut fm.values[px * SIGNATURE_CHANNELS..(px + 1) * SIGNATURE_CHANNELS] {
                *t = amp * rng.random::<f32>();
            }
        }
    }
    fm
}

/// Entry distance of a ray into an oriented box (slab test in box frame).
pub fn ray_box_hit(origin: WorldPoint, dir: [f64; 3], b: &Box3D) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let d = [origin.x - b.center[0], origin.y - b.center[1], origin.z - b.center[2]];
    let axes = [[s, 0.0, c], [c, 0.0, -s], [0.0, 1.0, 0.0]];
    let half = [0.5 * b.length(), 0.5 * b.width(), 0.5 * b.height()];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        let o = axes[k][0] * d[0] + axes[k][1] * d[1] + axes[k][2] * d[2];
        let v = axes[k][0] * dir[0] + axes[k][1] * dir[1] + axes[k][2] * dir[2];
        if v.abs() < 1e-15 {
            if o.abs() > half[k] {
                return None;
            }
            continue;
        }
        let (mut a, mut z) = ((-half[k] - o) / v, (half[k] - o) / v);
        if a > z {
            std::mem::swap(&mut a, &mut z);
        }
        t0 = t0.max(a);
        t1 = t1.min(z);
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 0.0).then_some(t0)
}

/// Elevation angles (degrees) of the simulated scanner's beams.
pub const LIDAR_ELEVATIONS_DEG: [f64; 16] =
    [-20.0, -17.0, -14.0, -12.0, -10.0, -8.5, -7.0, -5.5, -4.5, -3.5, -2.5, -1.5, -0.5, 0.5, 2.0, 4.0];

/// First-hit returns of a spinning scanner at the ego origin: `rays`
/// azimuths (jittered by `seed`) times the fixed elevation beams, hitting
/// boxes or the ground plane within 60 m.
pub fn lidar_like(scene: &Scene, rays: usize, seed: u64) -> LidarCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = WorldPoint::new(0.0, 0.0, 0.0);
    let mut points = Vec::new();
    for k in 0..rays {
        let az = TAU * (k as f64 + rng.random_range(0.0..1.0)) / rays as f64;
        for el in LIDAR_ELEVATIONS_DEG {
            let el = el.to_radians();
            let dir = [el.cos() * az.sin(), el.sin(), el.cos() * az.cos()];
            if let Some(t) = cast(scene, origin, dir) {
                points.push(WorldPoint::new(t * dir[0], t * dir[1], t * dir[2]));
            }
        }
    }
    LidarCloud { points }
}

/// Distance to the first surface along a unit ray, or `None` if nothing is
/// hit within range.
pub fn cast(scene: &Scene, origin: WorldPoint, dir: [f64; 3]) -> Option<f64> {
    let mut best = f64::INFINITY;
    for b in &scene.boxes {
        if let Some(t) = ray_box_hit(origin, dir, b) {
            best = best.min(t);
        }
    }
    if dir[1] < 0.0 {
        let t = (scene.ground_y - origin.y) / dir[1];
        if t > 0.0 {
            best = best.min(t);
        }
    }
    (best <= LIDAR_MAX_RANGE).then_some(best)
}

/// Writes scenes as `scene_NNN.json` into `dir`.
pub fn save_dataset(dir: &Path, scenes: &[Scene]) -> Result<(), SceneError> {
    std::fs::create_dir_all(dir)?;
    for (k, s) in scenes.iter().enumerate() {
        std::fs::write(dir.join(format!("scene_{k:03}.json")), s.to_json() + "\n")?;
    }
    Ok(())
}

/// Loads every `*.json` in `dir`, sorted by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>, SceneError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Scene::load(p)).collect()
}

/// The bundled dataset recipe: scene `k` uses seed `base_seed + k` and
/// 4–8 boxes chosen from that seed.
pub fn generate_dataset(base_seed: u64, n_scenes: usize, g: &GridSpec) -> Result<Vec<Scene>, SceneError> {
    (0..n_scenes)
        .map(|k| {
            let seed = base_seed + k as u64;
            let n = 4 + (ChaCha8Rng::seed_from_u64(seed ^ 0x5eed).random_range(0..5usize));
            generate(seed, n, g)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bevgrid::heightmap_from_boxes;

    fn grid() -> GridSpec {
        GridSpec::ego_square(96)
    }

    fn plain_box(center: [f64; 3], size: [f64; 3], yaw: f64) -> Box3D {
        Box3D { center, size, yaw, class_id: 0, velocity: [0.0, 0.0] }
    }

    #[test]
    fn empty_and_deterministic() {
        assert!(generate(1, 0, &grid()).unwrap().boxes.is_empty());
        assert_eq!(generate(9, 6, &grid()).unwrap(), generate(9, 6, &grid()).unwrap());
        assert_ne!(generate(9, 6, &grid()).unwrap(), generate(10, 6, &grid()).unwrap());
    }

    #[test]
    fn generated_boxes_respect_ranges() {
        let g = grid();
        for seed in 0..30 {
            let s = generate(seed, 8, &g).unwrap();
            for b in &s.boxes {
                assert!((-2.0..=1.0).contains(&b.center[1]));
                assert!((0.5..=3.0).contains(&b.height()));
                assert!(inside_grid(&g, b));
                assert!(b.velocity[0].hypot(b.velocity[1]) <= MAX_SPEED);
            }
        }
    }

    #[test]
    fn too_many_boxes_fail() {
        assert!(matches!(generate(0, 40, &grid()), Err(SceneError::TooManyBoxes(40))));
        assert!(matches!(generate(0, 15, &GridSpec::ego_square(30)), Err(SceneError::PlacementFailure { .. })));
    }

    #[test]
    fn identity_codes_are_orthogonal_and_balanced() {
        for a in 0..MAX_BOXES {
            let ca = identity_code(a).map(|v| 2.0 * v - 1.0);
            assert_eq!(ca.iter().sum::<f32>(), 0.0);
            for b in 0..MAX_BOXES {
                let cb = identity_code(b).map(|v| 2.0 * v - 1.0);
                let dot: f32 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
                assert_eq!(dot, if a == b { IDENTITY_LEN as f32 } else { 0.0 });
            }
        }
    }

    #[test]
    fn signature_decodes() {
        let b = Box3D { center: [3.0, -0.7, 9.0], size: [1.8, 1.6, 4.2], yaw: 2.1, class_id: 2, velocity: [-3.0, 4.5] };
        let s = signature(&b, 4, 7, (-5.0, 3.0));
        let d = decode_signature(&s.map(|v| v as f64), (-5.0, 3.0));
        assert_eq!(d.class_id, 2);
        assert!((d.yaw - 2.1).abs() < 1e-5);
        assert!((d.center_y + 0.7).abs() < 1e-5);
        for k in 0..3 {
            assert!((d.size[k] - b.size[k]).abs() < 1e-5);
        }
        assert!((d.velocity[0] + 3.0).abs() < 1e-5 && (d.velocity[1] - 4.5).abs() < 1e-5);
    }

    #[test]
    fn hull_of_square_with_interior_point() {
        let h = convex_hull(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.5, 0.5)]);
        assert_eq!(h.len(), 4);
        assert!(inside_convex(&h, (0.5, 0.5)));
        assert!(!inside_convex(&h, (1.5, 0.5)));
    }

    #[test]
    fn box_behind_all_cameras_renders_blank() {
        let cam = CameraModel::looking_along(95.0, 95.0, 80.0, 64.0, 160, 128, WorldPoint::new(0.0, 0.0, 0.0), 0.0).unwrap();
        let scene = Scene {
            seed: 0,
            boxes: vec![plain_box([0.0, -1.0, -10.0], [2.0, 1.5, 4.0], 0.3)],
            cameras: vec![cam],
            ground_y: DEFAULT_GROUND_Y,
        };
        let fms = render(&scene, &RenderConfig::default());
        assert!(fms[0].values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_box_peaks_at_projected_center() {
        let cam = CameraModel::looking_along(95.0, 95.0, 80.0, 64.0, 160, 128, WorldPoint::new(0.0, 0.0, 0.0), 0.0).unwrap();
        let b = plain_box([0.0, 0.0, 10.0], [2.0, 2.0, 2.0], 0.0);
        let scene = Scene { seed: 0, boxes: vec![b], cameras: vec![cam.clone()], ground_y: DEFAULT_GROUND_Y };
        let fm = &render(&scene, &RenderConfig::default())[0];
        let px = cam.project(WorldPoint::new(0.0, 0.0, 10.0)).unwrap();
        let (mut best, mut at) = (f32::MIN, (0, 0));
        for r in 0..fm.height {
            for c in 0..fm.width {
                if fm.texel(c, r)[0] > best {
                    best = fm.texel(c, r)[0];
                    at = (c, r);
                }
            }
        }
        assert_eq!(at, ((px.u / 2.0).round() as usize, (px.v / 2.0).round() as usize));
        assert!((best - 1.0).abs() < 1e-6);
    }

    #[test]
    fn nearer_box_overwrites_farther() {
        let cam = CameraModel::looking_along(95.0, 95.0, 80.0, 64.0, 160, 128, WorldPoint::new(0.0, 0.0, 0.0), 0.0).unwrap();
        let near = plain_box([0.0, 0.0, 8.0], [2.0, 2.0, 2.0], 0.0);
        let far = plain_box([0.5, 0.0, 16.0], [3.0, 3.0, 3.0], 0.0);
        let scene = Scene { seed: 3, boxes: vec![far, near], cameras: vec![cam.clone()], ground_y: DEFAULT_GROUND_Y };
        let fm = &render(&scene, &RenderConfig::default())[0];
        let px = cam.project(WorldPoint::new(0.0, 0.0, 8.0)).unwrap();
        let t = fm.texel((px.u / 2.0).round() as usize, (px.v / 2.0).round() as usize);
        let code = identity_code(1);
        let w = t[0];
        for k in 0..IDENTITY_LEN {
            assert!((t[CH_IDENTITY + k] - w * code[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn rendering_is_bit_identical() {
        let s = generate(5, 7, &grid()).unwrap();
        let cfg = RenderConfig { noise_amplitude: 0.2, noise_seed: 4, ..RenderConfig::default() };
        assert_eq!(render(&s, &cfg), render(&s, &cfg));
    }

    #[test]
    fn rendered_values_in_unit_interval() {
        let s = generate(6, 8, &grid()).unwrap();
        let cfg = RenderConfig { noise_amplitude: 0.3, noise_seed: 1, ..RenderConfig::default() };
        for fm in render(&s, &cfg) {
            assert!(fm.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn empty_scene_lidar_hits_ground_only() {
        let scene = Scene { seed: 0, boxes: vec![], cameras: default_rig(), ground_y: DEFAULT_GROUND_Y };
        let cloud = lidar_like(&scene, 90, 2);
        assert!(!cloud.points.is_empty());
        assert!(cloud.points.iter().all(|p| (p.y - DEFAULT_GROUND_Y).abs() < 1e-9));
    }

    #[test]
    fn box_due_north_is_hit_on_near_face() {
        let b = plain_box([0.0, -0.5, 12.0], [3.0, 3.0, 2.0], 0.0);
        let scene = Scene { seed: 0, boxes: vec![b], cameras: default_rig(), ground_y: DEFAULT_GROUND_Y };
        let cloud = lidar_like(&scene, 720, 1);
        let on_box: Vec<_> = cloud.points.iter().filter(|p| p.z > 10.0 && p.y > DEFAULT_GROUND_Y + 1e-6).collect();
        assert!(!on_box.is_empty());
        for p in on_box {
            assert!((p.z - 11.0).abs() < 1e-6, "{p:?}");
            assert!(p.x.abs() <= 1.5 + 1e-9 && p.y >= -2.0 - 1e-9 && p.y <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn occluded_box_gets_no_points() {
        let front = plain_box([0.0, -0.3, 10.0], [4.0, 3.0, 1.0], 0.0);
        let hidden = plain_box([0.0, -0.8, 20.0], [1.0, 1.0, 1.0], 0.0);
        let scene = Scene { seed: 0, boxes: vec![front, hidden], cameras: default_rig(), ground_y: DEFAULT_GROUND_Y };
        let cloud = lidar_like(&scene, 1440, 3);
        assert!(cloud.points.iter().all(|p| !(p.z > 19.0 && p.z < 21.0 && p.x.abs() < 0.6)));
    }

    #[test]
    fn generated_scene_covers_cells() {
        let g = grid();
        let s = generate(2, 6, &g).unwrap();
        assert!(heightmap_from_boxes(&g, &s.boxes).occupied_count() > 6 * 4);
    }

    #[test]
    fn scene_json_round_trip() {
        let s = generate(8, 5, &grid()).unwrap();
        assert_eq!(Scene::from_json(&s.to_json()).unwrap(), s);
    }
}
