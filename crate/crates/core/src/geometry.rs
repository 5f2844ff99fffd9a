//! Pinhole projection and the closed-form depth/height error bounds.
//!
//! Conventions: `y` is the height axis and `(x, z)` spans the BEV plane, both
//! in the world frame and in each camera frame. A camera pose maps world
//! points into the camera frame as `p_cam = R * p_world + t`; projection then
//! applies `u = fx * x / z + u0`, `v = fy * y / z + v0`.
//!
//! The two bound formulas are evaluated in the camera frame. The `verify_*`
//! functions are brute-force oracles: they search the largest perturbation
//! that keeps the feature inside the Manhattan ε-neighbourhood using only
//! projection arithmetic, never the closed forms.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;

/// Orthonormality tolerance for `RᵀR = I`.
const ROTATION_TOL: f64 = 1e-9;
/// Bisection refinements applied after the coarse scan in the bound oracles.
const BISECTION_ITERS: usize = 20;
/// Smallest `steps` accepted by the oracles.
pub const MIN_ORACLE_STEPS: usize = 1_000;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive camera-frame depth {0}")]
    NonPositiveDepth(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid bound query: {0}")]
    InvalidQuery(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// Image coordinates plus the camera-frame depth of the point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// On-disk calibration layout: `{"fx","fy","u0","v0","width","height","rotation":[9],"translation":[3]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraCalib {
    pub fx: f64,
    pub fy: f64,
    pub u0: f64,
    pub v0: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

/// Pinhole camera: intrinsics and a rigid world→camera pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraCalib", into = "CameraCalib")]
pub struct CameraModel {
    fx: f64,
    fy: f64,
    u0: f64,
    v0: f64,
    width: u32,
    height: u32,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraModel {
    /// Camera with identity extrinsics, the frame the bounds are derived in.
    pub fn new(
        fx: f64,
        fy: f64,
        u0: f64,
        v0: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        Self::with_pose(fx, fy, u0, v0, width, height, Matrix3::identity(), Vector3::zeros())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_pose(
        fx: f64,
        fy: f64,
        u0: f64,
        v0: f64,
        width: u32,
        height: u32,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidCamera(m.to_string()));
        if !(fx.is_finite() && fx > 0.0) || !(fy.is_finite() && fy > 0.0) {
            return bad("focal lengths must be positive and finite");
        }
        if width == 0 || height == 0 {
            return bad("image size must be positive");
        }
        if !(0.0..width as f64).contains(&u0) || !(0.0..height as f64).contains(&v0) {
            return bad("principal point must lie inside the image");
        }
        if rotation.iter().chain(translation.iter()).any(|x| !x.is_finite()) {
            return bad("pose must be finite");
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > ROTATION_TOL {
            return bad("rotation is not orthonormal");
        }
        Ok(Self { fx, fy, u0, v0, width, height, rotation, translation })
    }

    /// Camera at world position `center`, looking along the BEV heading
    /// `yaw` (radians; 0 looks down +z, π/2 looks down +x), with the camera
    /// `y` axis aligned to world height.
    #[allow(clippy::too_many_arguments)]
    pub fn looking_along(
        fx: f64,
        fy: f64,
        u0: f64,
        v0: f64,
        width: u32,
        height: u32,
        center: WorldPoint,
        yaw: f64,
    ) -> Result<Self, GeometryError> {
        let (s, c) = yaw.sin_cos();
        // Rows are the camera axes expressed in world coordinates.
        let rotation = Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c);
        let translation = -(rotation * center.to_vector());
        Self::with_pose(fx, fy, u0, v0, width, height, rotation, translation)
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn u0(&self) -> f64 {
        self.u0
    }
    pub fn v0(&self) -> f64 {
        self.v0
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> WorldPoint {
        WorldPoint::from_vector(-(self.rotation.transpose() * self.translation))
    }

    pub fn to_camera_frame(&self, p: WorldPoint) -> WorldPoint {
        WorldPoint::from_vector(self.rotation * p.to_vector() + self.translation)
    }

    pub fn to_world_frame(&self, p: WorldPoint) -> WorldPoint {
        WorldPoint::from_vector(self.rotation.transpose() * (p.to_vector() - self.translation))
    }

    /// Projects a world point. Fails when the point is not in front of the camera.
    pub fn project(&self, p: WorldPoint) -> Result<PixelPoint, GeometryError> {
        let c = self.to_camera_frame(p);
        if c.z <= 0.0 || c.z.is_nan() {
            return Err(GeometryError::NonPositiveDepth(c.z));
        }
        Ok(PixelPoint {
            u: self.fx * c.x / c.z + self.u0,
            v: self.fy * c.y / c.z + self.v0,
            depth: c.z,
        })
    }

    /// Inverse of [`project`](Self::project): lifts a pixel at the given depth.
    pub fn unproject(&self, px: PixelPoint) -> Result<WorldPoint, GeometryError> {
        if px.depth <= 0.0 || px.depth.is_nan() {
            return Err(GeometryError::NonPositiveDepth(px.depth));
        }
        let c = WorldPoint::new(
            (px.u - self.u0) * px.depth / self.fx,
            (px.v - self.v0) * px.depth / self.fy,
            px.depth,
        );
        Ok(self.to_world_frame(c))
    }

    /// True when no point of the vertical line through `(x, z)` can land
    /// in columns `[0, u_max]`: the camera's `y` axis is the world height
    /// axis, so depth and `u` do not change along the line. Always false for
    /// tilted cameras.
    pub fn misses_column(&self, x: f64, z: f64, u_max: f64) -> bool {
        let r = &self.rotation;
        if r[(0, 1)] != 0.0 || r[(2, 1)] != 0.0 {
            return false;
        }
        let cx = r[(0, 0)] * x + r[(0, 2)] * z + self.translation.x;
        let cz = r[(2, 0)] * x + r[(2, 2)] * z + self.translation.z;
        if cz <= 0.0 {
            return true;
        }
        let u = self.fx * cx / cz + self.u0;
        !(0.0..=u_max).contains(&u)
    }

    /// Whether `(u, v)` lies inside `[0, width) × [0, height)`.
    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

impl TryFrom<CameraCalib> for CameraModel {
    type Error = GeometryError;

    fn try_from(c: CameraCalib) -> Result<Self, Self::Error> {
        let r = Matrix3::from_row_slice(&c.rotation);
        let t = Vector3::from_column_slice(&c.translation);
        CameraModel::with_pose(c.fx, c.fy, c.u0, c.v0, c.width, c.height, r, t)
    }
}

impl From<CameraModel> for CameraCalib {
    fn from(c: CameraModel) -> Self {
        let mut rotation = [0.0; 9];
        for (i, r) in rotation.iter_mut().enumerate() {
            *r = c.rotation[(i / 3, i % 3)];
        }
        CameraCalib {
            fx: c.fx,
            fy: c.fy,
            u0: c.u0,
            v0: c.v0,
            width: c.width,
            height: c.height,
            rotation,
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

/// Ground-truth observation plus the BEV misplacement tolerance ε (meters,
/// Manhattan distance).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundQuery {
    camera: CameraModel,
    gt_pixel: (f64, f64),
    gt_depth: f64,
    epsilon: f64,
}

impl BoundQuery {
    pub fn new(
        camera: CameraModel,
        gt_pixel: (f64, f64),
        gt_depth: f64,
        epsilon: f64,
    ) -> Result<Self, GeometryError> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(GeometryError::InvalidQuery("epsilon must be positive".into()));
        }
        if !(gt_depth.is_finite() && gt_depth > 0.0) {
            return Err(GeometryError::InvalidQuery("gt_depth must be positive".into()));
        }
        if !(gt_pixel.0.is_finite() && gt_pixel.1.is_finite()) {
            return Err(GeometryError::InvalidQuery("gt_pixel must be finite".into()));
        }
        Ok(Self { camera, gt_pixel, gt_depth, epsilon })
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }
    pub fn gt_pixel(&self) -> (f64, f64) {
        self.gt_pixel
    }
    pub fn gt_depth(&self) -> f64 {
        self.gt_depth
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Ground-truth point in the camera frame.
    fn gt_camera_point(&self) -> WorldPoint {
        let c = &self.camera;
        let (u, v) = self.gt_pixel;
        WorldPoint::new(
            (u - c.u0) * self.gt_depth / c.fx,
            (v - c.v0) * self.gt_depth / c.fy,
            self.gt_depth,
        )
    }

    fn within_epsilon(&self, gt: WorldPoint, x: f64, z: f64) -> bool {
        (x - gt.x).abs() + (z - gt.z).abs() <= self.epsilon
    }
}

/// Largest depth error that keeps the feature inside the ε-neighbourhood:
/// `ε · fx / (|u_gt − u0| + fx)`. Does not depend on `d_gt`.
pub fn depth_error_bound(q: &BoundQuery) -> f64 {
    let c = &q.camera;
    q.epsilon * c.fx / ((q.gt_pixel.0 - c.u0).abs() + c.fx)
}

/// Largest BEV height error that keeps `(u_gt, v_gt)` in the sampling set of
/// the ε-neighbourhood: `ε · |v_gt − v0| / fy · fx / (|u_gt − u0| + fx)`.
pub fn height_error_bound(q: &BoundQuery) -> f64 {
    let c = &q.camera;
    q.epsilon * ((q.gt_pixel.1 - c.v0).abs() / c.fy) * c.fx / ((q.gt_pixel.0 - c.u0).abs() + c.fx)
}

/// Whether lifting `(u_gt, v_gt)` at depth `d_gt ± delta` keeps the point in
/// the ε-neighbourhood for both signs.
fn depth_perturbation_ok(q: &BoundQuery, gt: WorldPoint, delta: f64) -> bool {
    let c = &q.camera;
    [delta, -delta].into_iter().all(|s| {
        let d = q.gt_depth + s;
        if d <= 0.0 {
            return false;
        }
        let x = (q.gt_pixel.0 - c.u0) * d / c.fx;
        q.within_epsilon(gt, x, d)
    })
}

/// Whether a BEV height of `y_gt ± delta` still lets some grid `(x, z)` of the
/// ε-neighbourhood sample exactly `(u_gt, v_gt)`. The only 3D points imaging
/// to that pixel lie on its viewing ray, so the candidate grid is where the
/// ray crosses the perturbed height.
fn height_perturbation_ok(q: &BoundQuery, gt: WorldPoint, delta: f64) -> bool {
    let c = &q.camera;
    let dv = q.gt_pixel.1 - c.v0;
    [delta, -delta].into_iter().all(|s| {
        let y = gt.y + s;
        if dv == 0.0 {
            // Ray stays at camera height.
            return y == 0.0;
        }
        let z = c.fy * y / dv;
        if z.is_nan() || z <= 0.0 {
            return false;
        }
        let x = (q.gt_pixel.0 - c.u0) * z / c.fx;
        q.within_epsilon(gt, x, z)
    })
}

/// Coarse uniform scan followed by bisection for the largest `delta` with
/// `ok(delta)`; assumes `ok` is monotone (true up to a threshold) and
/// `ok(0)` holds.
fn largest_admissible<F: Fn(f64) -> bool>(ok: F, scale: f64, steps: usize) -> f64 {
    let mut hi = scale;
    let mut guard = 0;
    while ok(hi) && guard < 64 {
        hi *= 2.0;
        guard += 1;
    }
    let mut lo = 0.0;
    let mut up = hi;
    for k in 1..=steps {
        let d = hi * k as f64 / steps as f64;
        if ok(d) {
            lo = d;
        } else {
            up = d;
            break;
        }
    }
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + up);
        if ok(mid) {
            lo = mid;
        } else {
            up = mid;
        }
    }
    lo
}

/// Empirical maximum depth error from a brute-force search.
pub fn verify_depth_bound(q: &BoundQuery, steps: usize) -> f64 {
    let steps = steps.max(MIN_ORACLE_STEPS);
    let gt = q.gt_camera_point();
    largest_admissible(|d| depth_perturbation_ok(q, gt, d), q.epsilon, steps)
}

/// Empirical maximum height error from a brute-force search over the
/// sampling-set membership test.
pub fn verify_height_bound(q: &BoundQuery, steps: usize) -> f64 {
    let steps = steps.max(MIN_ORACLE_STEPS);
    let gt = q.gt_camera_point();
    largest_admissible(|d| height_perturbation_ok(q, gt, d), q.epsilon, steps)
}

/// One row of a bound sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub u_gt: f64,
    pub v_gt: f64,
    pub eps: f64,
    pub depth_bound_m: f64,
    pub height_bound_m: f64,
    pub empirical_depth: f64,
    pub empirical_height: f64,
}

impl BoundRow {
    pub const CSV_HEADER: &'static str =
        "u_gt,v_gt,eps,depth_bound_m,height_bound_m,empirical_depth,empirical_height";

    pub fn evaluate(q: &BoundQuery, steps: usize) -> Self {
        Self {
            u_gt: q.gt_pixel.0,
            v_gt: q.gt_pixel.1,
            eps: q.epsilon,
            depth_bound_m: depth_error_bound(q),
            height_bound_m: height_error_bound(q),
            empirical_depth: verify_depth_bound(q, steps),
            empirical_height: verify_height_bound(q, steps),
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.u_gt,
            self.v_gt,
            self.eps,
            self.depth_bound_m,
            self.height_bound_m,
            self.empirical_depth,
            self.empirical_height
        )
    }
}

/// Deterministic random query `index` of the stream identified by `seed`.
/// Each index has its own RNG stream so results do not depend on how the
/// sweep is scheduled.
pub fn random_query(seed: u64, index: u64) -> BoundQuery {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let width = rng.random_range(320..=1920u32);
    let height = rng.random_range(240..=1080u32);
    let fx = rng.random_range(300.0..2000.0);
    let fy = fx * rng.random_range(0.8..1.25);
    let u0 = width as f64 * rng.random_range(0.3..0.7);
    let v0 = height as f64 * rng.random_range(0.3..0.7);
    let camera = CameraModel::new(fx, fy, u0, v0, width, height).expect("valid random camera");
    let u = rng.random_range(0.0..width as f64);
    let v = rng.random_range(0.0..height as f64);
    let eps = rng.random_range(0.1..2.0);
    let depth = rng.random_range(5.0..80.0);
    BoundQuery::new(camera, (u, v), depth, eps).expect("valid random query")
}

/// Evaluates `n` seeded random queries.
pub fn sweep_random(seed: u64, n: usize, steps: usize, exec: Execution) -> Vec<BoundRow> {
    exec.map(n, |i| BoundRow::evaluate(&random_query(seed, i as u64), steps))
}

/// Bound table for one camera: the on-axis pixel first, then `n - 1` seeded
/// pixels across the image.
pub fn sweep_camera(
    camera: &CameraModel,
    eps: f64,
    depth: f64,
    n: usize,
    steps: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<BoundRow>, GeometryError> {
    let mut queries = Vec::with_capacity(n);
    if n > 0 {
        queries.push(BoundQuery::new(camera.clone(), (camera.u0, camera.v0), depth, eps)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 1..n {
        let u = rng.random_range(0.0..camera.width as f64);
        let v = rng.random_range(0.0..camera.height as f64);
        queries.push(BoundQuery::new(camera.clone(), (u, v), depth, eps)?);
    }
    Ok(exec.map_slice(&queries, |q| BoundRow::evaluate(q, steps)))
}
