//! Synthetic scene generation: paired depth maps, point clouds, and exact
//! ground-truth flow for rigid multi-object scenes, plus planted-outlier
//! injection. Everything is deterministic per seed.
//!
//! Scenes are built from three primitives (plane patch, box, sphere), each
//! with a rigid pose, a per-object rigid motion about its own center, and an
//! optional global ego-motion applied to all points. Depth maps come from
//! per-pixel ray casting with z-buffering.

use nalgebra::{Rotation3, Vector3};
use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{backproject_depth_map, bilinear_sample, CameraIntrinsics, DepthMap, Grid};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::losses::FlowField;
use crate::seed::stage_rng;

/// Rays shorter than this never hit; keeps surfaces at the camera origin out.
const T_MIN: f64 = 1e-9;

/// A moved point is occluded when the rendered frame-t+1 depth in front of it
/// is closer by more than this margin (absolute meters plus a relative part).
const OCCLUSION_ABS: f64 = 0.02;
const OCCLUSION_REL: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<f64>,
}

impl Default for IntrinsicsSpec {
    fn default() -> Self {
        Self {
            fx: 110.0,
            fy: 110.0,
            cx: 63.5,
            cy: 47.5,
            baseline: Some(0.5),
        }
    }
}

impl From<IntrinsicsSpec> for CameraIntrinsics {
    fn from(spec: IntrinsicsSpec) -> Self {
        CameraIntrinsics {
            fx: spec.fx,
            fy: spec.fy,
            cx: spec.cx,
            cy: spec.cy,
            baseline: spec.baseline,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Rectangle in the object's x-y plane; uses the first two half extents.
    Plane,
    /// Axis-aligned box in the object frame; uses all three half extents.
    Box,
    /// Sphere around the object origin; uses `radius`.
    Sphere,
}

/// Per-object rigid motion between frames: rotation vector (radians) about
/// the object's own center, then translation (meters).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionSpec {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl MotionSpec {
    fn is_identity(&self) -> bool {
        self.rotation == [0.0; 3] && self.translation == [0.0; 3]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    /// Object origin in the camera frame at time t.
    pub center: [f64; 3],
    /// Pose rotation vector (radians), object frame to camera frame.
    #[serde(default)]
    pub rotation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_extents: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default)]
    pub motion: MotionSpec,
}

/// Full scene description; deserializes from JSON with every key optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub intrinsics: IntrinsicsSpec,
    pub objects: Vec<ObjectSpec>,
    /// Rigid transform applied to all points after the object motions.
    pub ego_motion: MotionSpec,
    /// Per-point Gaussian depth noise (meters) applied to `cloud_t`.
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    pub outlier_sigma: f64,
    /// Back-projection stride for the generated clouds.
    pub stride: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        // Desk-scale scene: a ground plane, two boxes resting on it, and a
        // sphere, with modest independent motions.
        Self {
            width: 128,
            height: 96,
            intrinsics: IntrinsicsSpec::default(),
            objects: vec![
                ObjectSpec {
                    shape: ShapeKind::Plane,
                    center: [0.0, 1.0, 6.0],
                    rotation: [-std::f64::consts::FRAC_PI_2, 0.0, 0.0],
                    half_extents: Some([5.0, 5.0, 0.0]),
                    radius: None,
                    motion: MotionSpec::default(),
                },
                ObjectSpec {
                    shape: ShapeKind::Box,
                    center: [-0.9, 0.4, 5.0],
                    rotation: [0.0, 0.0, 0.0],
                    half_extents: Some([0.4, 0.6, 0.4]),
                    radius: None,
                    motion: MotionSpec {
                        rotation: [0.0, 0.0, 0.0],
                        translation: [0.3, 0.0, 0.2],
                    },
                },
                ObjectSpec {
                    shape: ShapeKind::Box,
                    center: [0.9, 0.55, 6.5],
                    rotation: [0.0, 0.0, 0.0],
                    half_extents: Some([0.5, 0.45, 0.5]),
                    radius: None,
                    motion: MotionSpec {
                        rotation: [0.0, 0.0, 0.0],
                        translation: [-0.2, 0.0, -0.3],
                    },
                },
                ObjectSpec {
                    shape: ShapeKind::Sphere,
                    center: [0.1, 0.3, 4.2],
                    rotation: [0.0, 0.0, 0.0],
                    half_extents: None,
                    radius: Some(0.45),
                    motion: MotionSpec {
                        rotation: [0.0, 0.15, 0.0],
                        translation: [0.0, 0.0, 0.0],
                    },
                },
            ],
            ego_motion: MotionSpec::default(),
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            outlier_sigma: 0.0,
            stride: 1,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        CameraIntrinsics::from(self.intrinsics).validate()?;
        if self.objects.is_empty() {
            return Err(Error::Config("scene needs at least one object".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Config(format!(
                "outlier_fraction must be in [0, 1), got {}",
                self.outlier_fraction
            )));
        }
        if self.noise_sigma < 0.0 || self.outlier_sigma < 0.0 {
            return Err(Error::Config("noise scales must be >= 0".into()));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            match obj.shape {
                ShapeKind::Plane | ShapeKind::Box => {
                    let he = obj.half_extents.ok_or_else(|| {
                        Error::Config(format!("object {i}: shape requires half_extents"))
                    })?;
                    let needed = if obj.shape == ShapeKind::Plane { 2 } else { 3 };
                    if he.iter().take(needed).any(|h| !(h.is_finite() && *h > 0.0)) {
                        return Err(Error::Config(format!(
                            "object {i}: half_extents must be positive"
                        )));
                    }
                }
                ShapeKind::Sphere => {
                    let r = obj
                        .radius
                        .ok_or_else(|| Error::Config(format!("object {i}: sphere requires radius")))?;
                    if !(r.is_finite() && r > 0.0) {
                        return Err(Error::Config(format!("object {i}: radius must be positive")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Everything the generator produces for one frame pair.
#[derive(Debug, Clone)]
pub struct SyntheticFrame {
    pub depth_t: DepthMap,
    pub depth_t1: DepthMap,
    pub cloud_t: PointCloud,
    pub cloud_t1: PointCloud,
    /// True rigid flow for every `cloud_t` point, computed before noise.
    pub gt_flow: FlowField,
    /// Indices of `cloud_t` points displaced by planted outlier noise.
    pub outlier_mask: Vec<bool>,
    /// `cloud_t` points whose moved position is not visible in frame t+1.
    pub occluded: Vec<bool>,
    /// Which object each `cloud_t` point was rendered from.
    pub object_ids: Vec<usize>,
}

/// A posed rigid body at one instant.
#[derive(Debug, Clone)]
struct Posed {
    rotation: Rotation3<f64>,
    center: Vector3<f64>,
    shape: ShapeKind,
    half_extents: Vector3<f64>,
    radius: f64,
}

impl Posed {
    fn at_t(obj: &ObjectSpec) -> Self {
        Self {
            rotation: Rotation3::from_scaled_axis(Vector3::from(obj.rotation)),
            center: Vector3::from(obj.center),
            shape: obj.shape,
            half_extents: obj.half_extents.map(Vector3::from).unwrap_or_else(Vector3::zeros),
            radius: obj.radius.unwrap_or(0.0),
        }
    }

    /// Pose after the object's own motion and the ego transform.
    fn at_t1(obj: &ObjectSpec, ego: &MotionSpec) -> Self {
        let base = Self::at_t(obj);
        let motion = Rotation3::from_scaled_axis(Vector3::from(obj.motion.rotation));
        let ego_rot = Rotation3::from_scaled_axis(Vector3::from(ego.rotation));
        let ego_t = Vector3::from(ego.translation);
        let center = ego_rot * (base.center + Vector3::from(obj.motion.translation)) + ego_t;
        Self {
            rotation: ego_rot * motion * base.rotation,
            center,
            ..base
        }
    }

    /// Smallest ray parameter t >= T_MIN where `origin + t * dir` hits the
    /// shape, in the camera frame.
    fn intersect(&self, dir: &Vector3<f64>) -> Option<f64> {
        // Camera origin is the ray origin; move the ray to the object frame.
        let inv = self.rotation.inverse();
        let o = inv * (-self.center);
        let d = inv * dir;
        match self.shape {
            ShapeKind::Plane => {
                if d.z.abs() < 1e-12 {
                    return None;
                }
                let t = -o.z / d.z;
                if t < T_MIN {
                    return None;
                }
                let hit = o + t * d;
                (hit.x.abs() <= self.half_extents.x && hit.y.abs() <= self.half_extents.y)
                    .then_some(t)
            }
            ShapeKind::Box => {
                let mut t_lo = T_MIN;
                let mut t_hi = f64::INFINITY;
                for axis in 0..3 {
                    let h = self.half_extents[axis];
                    if d[axis].abs() < 1e-12 {
                        if o[axis].abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let a = (-h - o[axis]) / d[axis];
                    let b = (h - o[axis]) / d[axis];
                    t_lo = t_lo.max(a.min(b));
                    t_hi = t_hi.min(a.max(b));
                }
                (t_lo <= t_hi && t_lo > T_MIN).then_some(t_lo)
            }
            ShapeKind::Sphere => {
                let a = d.norm_squared();
                let b = 2.0 * o.dot(&d);
                let c = o.norm_squared() - self.radius * self.radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                (t >= T_MIN).then_some(t)
            }
        }
    }

    /// Points that bound the shape, used to check it sits in front of the
    /// camera.
    fn extremal_points(&self) -> Vec<Vector3<f64>> {
        match self.shape {
            ShapeKind::Plane => {
                let h = self.half_extents;
                [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
                    .iter()
                    .map(|(sx, sy)| {
                        self.rotation * Vector3::new(sx * h.x, sy * h.y, 0.0) + self.center
                    })
                    .collect()
            }
            ShapeKind::Box => {
                let h = self.half_extents;
                let mut corners = Vec::with_capacity(8);
                for sx in [-1.0, 1.0] {
                    for sy in [-1.0, 1.0] {
                        for sz in [-1.0, 1.0] {
                            corners.push(
                                self.rotation * Vector3::new(sx * h.x, sy * h.y, sz * h.z)
                                    + self.center,
                            );
                        }
                    }
                }
                corners
            }
            ShapeKind::Sphere => {
                vec![self.center - Vector3::new(0.0, 0.0, self.radius)]
            }
        }
    }
}

fn render(
    poses: &[Posed],
    intr: &CameraIntrinsics,
    width: usize,
    height: usize,
) -> Result<(DepthMap, Vec<Option<usize>>)> {
    let mut values = vec![f64::NAN; width * height];
    let mut ids = vec![None; width * height];
    for v in 0..height {
        for u in 0..width {
            let dir = Vector3::new(
                (u as f64 - intr.cx) / intr.fx,
                (v as f64 - intr.cy) / intr.fy,
                1.0,
            );
            let mut best: Option<(f64, usize)> = None;
            for (id, pose) in poses.iter().enumerate() {
                if let Some(t) = pose.intersect(&dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, id));
                    }
                }
            }
            if let Some((t, id)) = best {
                // dir.z == 1, so the ray parameter is the depth.
                values[v * width + u] = t;
                ids[v * width + u] = Some(id);
            }
        }
    }
    Ok((DepthMap(Grid::from_values(width, height, values)?), ids))
}

/// The rigid frame-t+1 position of a frame-t surface point of `obj`.
fn move_point(p: &Vector3<f64>, obj: &ObjectSpec, ego: &MotionSpec) -> Vector3<f64> {
    let center = Vector3::from(obj.center);
    let motion = Rotation3::from_scaled_axis(Vector3::from(obj.motion.rotation));
    let moved = center + motion * (p - center) + Vector3::from(obj.motion.translation);
    let ego_rot = Rotation3::from_scaled_axis(Vector3::from(ego.rotation));
    ego_rot * moved + Vector3::from(ego.translation)
}

/// Renders the scene at both frames and assembles clouds, exact flow, the
/// occlusion mask, and planted noise.
pub fn generate(spec: &SceneSpec) -> Result<SyntheticFrame> {
    spec.validate()?;
    let intr = CameraIntrinsics::from(spec.intrinsics);
    let poses_t: Vec<Posed> = spec.objects.iter().map(Posed::at_t).collect();
    let poses_t1: Vec<Posed> = spec
        .objects
        .iter()
        .map(|o| Posed::at_t1(o, &spec.ego_motion))
        .collect();
    for (i, pose) in poses_t.iter().chain(poses_t1.iter()).enumerate() {
        for p in pose.extremal_points() {
            if p.z <= T_MIN {
                return Err(Error::Config(format!(
                    "object {} extends behind the camera (z = {})",
                    i % spec.objects.len(),
                    p.z
                )));
            }
        }
    }

    let (depth_t, ids_t) = render(&poses_t, &intr, spec.width, spec.height)?;
    let (depth_t1, _) = render(&poses_t1, &intr, spec.width, spec.height)?;

    let cloud_t = backproject_depth_map(&depth_t, &intr, spec.stride)?;
    let cloud_t1 = backproject_depth_map(&depth_t1, &intr, spec.stride)?;

    let pixels = cloud_t
        .source_pixels
        .as_ref()
        .expect("backprojection records source pixels");
    let object_ids: Vec<usize> = pixels
        .iter()
        .map(|px| {
            ids_t[px[1] as usize * spec.width + px[0] as usize]
                .expect("valid pixel has an object id")
        })
        .collect();

    let identity_scene = spec.objects.iter().all(|o| o.motion.is_identity())
        && spec.ego_motion.is_identity();
    let gt_flow = FlowField::new(
        cloud_t
            .points
            .iter()
            .zip(&object_ids)
            .map(|(p, &id)| {
                if identity_scene {
                    Vector3::zeros()
                } else {
                    move_point(p, &spec.objects[id], &spec.ego_motion) - p
                }
            })
            .collect(),
    );

    let occluded: Vec<bool> = cloud_t
        .points
        .iter()
        .zip(&gt_flow.vectors)
        .map(|(p, f)| {
            let q = p + f;
            if q.z <= 0.0 {
                return true;
            }
            let px = crate::camera::project_point(&q, &intr);
            match bilinear_sample(&depth_t1, px.u, px.v) {
                Some(s) => s < q.z - (OCCLUSION_ABS + OCCLUSION_REL * q.z),
                None => true,
            }
        })
        .collect();

    // Depth noise along each ray, then planted outliers; both only on
    // cloud_t, which models the noisy first-frame estimate.
    let mut noisy = cloud_t.clone();
    if spec.noise_sigma > 0.0 {
        let mut rng = stage_rng(spec.seed, "synth/noise");
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
        for p in &mut noisy.points {
            let d = p.z;
            let eta: f64 = normal.sample(&mut rng);
            *p *= (d + eta).max(1e-3) / d;
        }
    }
    let (noisy, outlier_mask) = plant_outliers(
        &noisy,
        spec.outlier_fraction,
        spec.outlier_sigma,
        crate::seed::derive_seed(spec.seed, "synth/outliers"),
    )?;

    Ok(SyntheticFrame {
        depth_t,
        depth_t1,
        cloud_t: noisy,
        cloud_t1,
        gt_flow,
        outlier_mask,
        occluded,
        object_ids,
    })
}

/// Displaces a seeded random subset of the cloud (round-to-nearest count of
/// `fraction * N`) by isotropic Gaussian offsets of scale `sigma`. Returns
/// the displaced cloud and the mask of displaced indices.
pub fn plant_outliers(
    cloud: &PointCloud,
    fraction: f64,
    sigma: f64,
    seed: u64,
) -> Result<(PointCloud, Vec<bool>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "outlier fraction must be in [0, 1), got {fraction}"
        )));
    }
    let n = cloud.len();
    let count = (fraction * n as f64).round() as usize;
    let mut mask = vec![false; n];
    if count == 0 {
        return Ok((cloud.clone(), mask));
    }
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut indices = sample(&mut rng, n, count).into_vec();
    indices.sort_unstable();
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::Config(format!("bad outlier sigma {sigma}: {e}")))?;
    let mut displaced = cloud.clone();
    for &i in &indices {
        let offset = Vector3::new(
            normal.sample(&mut rng),
            normal.sample(&mut rng),
            normal.sample(&mut rng),
        );
        displaced.points[i] += offset;
        mask[i] = true;
    }
    Ok((displaced, mask))
}
