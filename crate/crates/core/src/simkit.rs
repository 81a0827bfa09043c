//! Synthetic rooms, camera trajectories and noisy detections with ground
//! truth, standing in for a learned per-frame box detector.
//!
//! Random streams are ChaCha8 seeded from the spec seed; every rendered
//! frame draws from its own stream (`set_stream(frame index)`), so frames
//! can be rendered in any order with identical output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{iou3d, project_camera_point, rot_vertical, transform_box_se3, wrap_angle, CameraIntrinsics, OrientedBox3, SE3Pose, Vec3};
use crate::matchcore::{Detection, FrameDetections, FrameId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation spec: {0}")]
    InvalidSpec(&'static str),
    #[error("could not place object {0} without overlap")]
    PlacementFailure(usize),
    #[error("could not build a trajectory seeing enough objects")]
    TrajectoryFailure,
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
const MIN_DEPTH: f64 = 0.2;
const MAX_DEPTH: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub n_objects: usize,
    /// Room spans x ∈ [0, ex], y ∈ [−ey, 0] (floor at 0, +Y down), z ∈ [0, ez].
    pub room_extent: Vec3,
    pub dims_min: Vec3,
    pub dims_max: Vec3,
    pub n_classes: usize,
    pub embedding_dim: usize,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_objects: 30,
            room_extent: Vec3::new(8.0, 3.0, 8.0),
            dims_min: Vec3::new(0.3, 0.3, 0.3),
            dims_max: Vec3::new(1.2, 1.0, 1.2),
            n_classes: 10,
            embedding_dim: 32,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<(), SimError> {
        if self.n_objects == 0 {
            return Err(SimError::InvalidSpec("n_objects must be at least 1"));
        }
        if self.room_extent.iter().any(|v| !(*v > 0.0)) {
            return Err(SimError::InvalidSpec("room extent must be positive"));
        }
        if (0..3).any(|k| !(self.dims_min[k] > 0.0 && self.dims_min[k] <= self.dims_max[k])) {
            return Err(SimError::InvalidSpec("dims range must satisfy 0 < min <= max"));
        }
        if (0..3).any(|k| self.dims_max[k] > self.room_extent[k]) {
            return Err(SimError::InvalidSpec("objects larger than the room"));
        }
        if self.embedding_dim == 0 || self.n_classes == 0 {
            return Err(SimError::InvalidSpec("embedding_dim and n_classes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub sigma_center: f64,
    pub sigma_dims: f64,
    pub sigma_yaw: f64,
    pub sigma_embedding: f64,
    pub dropout_prob: f64,
    /// Expected spurious detections per frame.
    pub spurious_rate: f64,
    pub score_noise: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::desk()
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            sigma_center: 0.0,
            sigma_dims: 0.0,
            sigma_yaw: 0.0,
            sigma_embedding: 0.0,
            dropout_prob: 0.0,
            spurious_rate: 0.0,
            score_noise: 0.0,
        }
    }

    pub fn desk() -> Self {
        Self {
            sigma_center: 0.02,
            sigma_dims: 0.02,
            sigma_yaw: 2f64.to_radians(),
            sigma_embedding: 0.1,
            dropout_prob: 0.1,
            spurious_rate: 0.5,
            score_noise: 0.2,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let sigmas = [
            self.sigma_center,
            self.sigma_dims,
            self.sigma_yaw,
            self.sigma_embedding,
            self.spurious_rate,
            self.score_noise,
        ];
        if sigmas.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(SimError::InvalidSpec("noise parameters must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(SimError::InvalidSpec("dropout probability outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub object_id: i64,
    pub class_id: i64,
    pub bbox: OrientedBox3,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    pub n_frames: usize,
    pub min_visible: usize,
    /// Camera height above the floor.
    pub camera_height: f64,
    pub step_length: f64,
    pub max_yaw_rate: f64,
    pub wall_margin: f64,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            n_frames: 100,
            min_visible: 3,
            camera_height: 1.5,
            step_length: 0.25,
            max_yaw_rate: 0.25,
            wall_margin: 0.5,
            intrinsics: CameraIntrinsics::new(450.0, 450.0, 320.0, 240.0, 640.0, 480.0),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub objects: Vec<GtObject>,
    pub gt_poses: Vec<SE3Pose>,
    pub frames: Vec<FrameDetections>,
}

impl SyntheticScene {
    /// Objects whose center is visible from at least one frame; the
    /// evaluation ground truth of the capture.
    pub fn observed_objects(&self) -> Vec<GtObject> {
        self.objects
            .iter()
            .filter(|o| self.frames.iter().zip(&self.gt_poses).any(|(f, p)| is_visible(&f.intrinsics, p, &o.bbox)))
            .cloned()
            .collect()
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Places non-overlapping boxes uniformly in the room.
pub fn generate_scene(spec: &SceneSpec) -> Result<Vec<GtObject>, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let e = spec.room_extent;
    let mut objects: Vec<GtObject> = Vec::with_capacity(spec.n_objects);
    for id in 0..spec.n_objects {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let dims = Vec3::from_fn(|k, _| rng.random_range(spec.dims_min[k]..=spec.dims_max[k]));
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            // keep the rotated footprint inside the walls
            let r = 0.5 * (dims.x * dims.x + dims.z * dims.z).sqrt();
            let (lo_x, hi_x) = (r.min(e.x / 2.0), (e.x - r).max(e.x / 2.0));
            let (lo_z, hi_z) = (r.min(e.z / 2.0), (e.z - r).max(e.z / 2.0));
            let cy = rng.random_range((-e.y + dims.y / 2.0)..=(-dims.y / 2.0));
            let center = Vec3::new(rng.random_range(lo_x..=hi_x), cy, rng.random_range(lo_z..=hi_z));
            let b = OrientedBox3::new(center, dims, yaw);
            if objects.iter().all(|o| iou3d(&o.bbox, &b) == 0.0) {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or(SimError::PlacementFailure(id))?;
        objects.push(GtObject {
            object_id: id as i64,
            class_id: rng.random_range(0..spec.n_classes) as i64,
            bbox,
            embedding: unit_vector(&mut rng, spec.embedding_dim),
        });
    }
    Ok(objects)
}

/// Whether a world box's center projects into the image at a valid depth.
pub fn is_visible(k: &CameraIntrinsics, world_from_cam: &SE3Pose, b: &OrientedBox3) -> bool {
    let p = world_from_cam.inverse().apply(&b.center);
    if !(p.z > MIN_DEPTH && p.z < MAX_DEPTH) {
        return false;
    }
    project_camera_point(k, &p).is_ok_and(|uv| k.contains(uv))
}

pub fn visible_count(objects: &[GtObject], k: &CameraIntrinsics, pose: &SE3Pose) -> usize {
    objects.iter().filter(|o| is_visible(k, pose, &o.bbox)).count()
}

/// Yaw-only camera poses at constant height. Positions follow a smoothed
/// random walk reflected at the walls; the camera looks roughly toward the
/// room center with a slowly wandering offset.
pub fn generate_trajectory(objects: &[GtObject], room_extent: Vec3, cfg: &TrajectoryConfig) -> Result<Vec<SE3Pose>, SimError> {
    if cfg.n_frames < 2 {
        return Err(SimError::InvalidSpec("trajectory needs at least 2 frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.wall_margin;
    let (lo, hi) = (Vec3::new(m, 0.0, m), Vec3::new(room_extent.x - m, 0.0, room_extent.z - m));
    let mid = Vec3::new(room_extent.x / 2.0, 0.0, room_extent.z / 2.0);
    let heading = |p: &Vec3, offset: f64| {
        let d = mid - p;
        wrap_angle(d.x.atan2(d.z) + offset)
    };
    let y = -cfg.camera_height;
    'attempt: for _ in 0..50 {
        let mut pos = Vec3::new(rng.random_range(lo.x..hi.x), 0.0, rng.random_range(lo.z..hi.z));
        let mut vel = Vec3::zeros();
        let mut offset: f64 = rng.random_range(-0.5..0.5);
        let mut yaw = heading(&pos, offset);
        let first = SE3Pose::new(rot_vertical(yaw), pos + Vec3::new(0.0, y, 0.0));
        if visible_count(objects, &cfg.intrinsics, &first) < cfg.min_visible {
            continue;
        }
        let mut poses = vec![first];
        while poses.len() < cfg.n_frames {
            let mut next = None;
            for _ in 0..200 {
                let mut v = vel * 0.8
                    + Vec3::new(rng.random_range(-1.0..1.0), 0.0, rng.random_range(-1.0..1.0)) * (0.5 * cfg.step_length);
                if v.norm() > cfg.step_length {
                    v *= cfg.step_length / v.norm();
                }
                let mut p = pos + v;
                for k in [0, 2] {
                    if p[k] < lo[k] || p[k] > hi[k] {
                        v[k] = -v[k];
                        p[k] = (pos[k] + v[k]).clamp(lo[k], hi[k]);
                    }
                }
                let o = (0.9 * offset + rng.random_range(-1.0..1.0) * cfg.max_yaw_rate).clamp(-1.0, 1.0);
                let turn = wrap_angle(heading(&p, o) - yaw).clamp(-2.0 * cfg.max_yaw_rate, 2.0 * cfg.max_yaw_rate);
                let yw = wrap_angle(yaw + turn);
                let pose = SE3Pose::new(rot_vertical(yw), p + Vec3::new(0.0, y, 0.0));
                if visible_count(objects, &cfg.intrinsics, &pose) >= cfg.min_visible {
                    next = Some((pose, p, v, o, yw));
                    break;
                }
            }
            let Some((pose, p, v, o, yw)) = next else {
                continue 'attempt;
            };
            poses.push(pose);
            (pos, vel, offset, yaw) = (p, v, o, yw);
        }
        return Ok(poses);
    }
    Err(SimError::TrajectoryFailure)
}

fn random_spurious(rng: &mut ChaCha8Rng, k: &CameraIntrinsics, spec: &SceneSpec) -> Detection {
    let depth = rng.random_range(1.0..6.0);
    let (u, v) = (rng.random_range(0.0..k.width), rng.random_range(0.0..k.height));
    let center = Vec3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
    let dims = Vec3::from_fn(|i, _| rng.random_range(spec.dims_min[i]..=spec.dims_max[i]));
    Detection {
        bbox: OrientedBox3::new(center, dims, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)),
        embedding: unit_vector(rng, spec.embedding_dim),
        score: rng.random_range(0.25..0.6),
        class_id: rng.random_range(0..spec.n_classes) as i64,
        source_index: 0,
        gt_object_id: Some(-1),
    }
}

/// Renders one frame's detections from its own random stream.
pub fn render_frame(
    frame_id: FrameId,
    objects: &[GtObject],
    pose: &SE3Pose,
    intrinsics: &CameraIntrinsics,
    spec: &SceneSpec,
    noise: &NoiseModel,
    seed: u64,
) -> FrameDetections {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_id as u64);
    let cam_from_world = pose.inverse();
    let mut detections = Vec::new();
    for o in objects {
        if !is_visible(intrinsics, pose, &o.bbox) {
            continue;
        }
        let cam_box = transform_box_se3(&o.bbox, &cam_from_world).expect("yaw-only pose");
        // draws happen in a fixed order whether or not noise is zero
        let z: [f64; 7] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let center = cam_box.center + Vec3::new(z[0], z[1], z[2]) * noise.sigma_center;
        let dims = (cam_box.dims + Vec3::new(z[3], z[4], z[5]) * noise.sigma_dims).map(|d| d.max(0.05));
        let yaw = cam_box.yaw + z[6] * noise.sigma_yaw;
        let znorm = z.iter().map(|v| v * v).sum::<f64>().sqrt() / 7f64.sqrt();
        let score = (1.0 - znorm * noise.score_noise).clamp(0.05, 1.0);
        let emb_noise = Normal::new(0.0, noise.sigma_embedding).expect("non-negative sigma");
        let mut emb: Vec<f64> = o.embedding.iter().map(|e| e + emb_noise.sample(&mut rng)).collect();
        let n = emb.iter().map(|x| x * x).sum::<f64>().sqrt();
        emb.iter_mut().for_each(|x| *x /= n);
        let dropped = rng.random_bool(noise.dropout_prob);
        if dropped {
            continue;
        }
        detections.push(Detection {
            bbox: if noise.sigma_center == 0.0 && noise.sigma_dims == 0.0 && noise.sigma_yaw == 0.0 {
                cam_box
            } else {
                OrientedBox3::new(center, dims, yaw)
            },
            embedding: emb,
            score,
            class_id: o.class_id,
            source_index: 0,
            gt_object_id: Some(o.object_id),
        });
    }
    if noise.spurious_rate > 0.0 {
        let count = Poisson::new(noise.spurious_rate).expect("positive rate").sample(&mut rng) as usize;
        for _ in 0..count {
            detections.push(random_spurious(&mut rng, intrinsics, spec));
        }
    }
    for (k, d) in detections.iter_mut().enumerate() {
        d.source_index = k;
    }
    FrameDetections {
        frame_id,
        intrinsics: *intrinsics,
        detections,
        gravity_dir_raw: Vec3::y(),
        gt_pose: Some(*pose),
    }
}

/// Renders every pose; frame ids are `first_id + index`.
pub fn render_detections(
    objects: &[GtObject],
    poses: &[SE3Pose],
    intrinsics: &CameraIntrinsics,
    spec: &SceneSpec,
    noise: &NoiseModel,
    seed: u64,
    first_id: FrameId,
) -> Result<Vec<FrameDetections>, SimError> {
    noise.validate()?;
    Ok(poses
        .iter()
        .enumerate()
        .map(|(k, p)| render_frame(first_id + k as FrameId, objects, p, intrinsics, spec, noise, seed))
        .collect())
}

/// Scene, trajectory and detections in one call. Detections use the
/// trajectory seed plus one.
pub fn simulate(spec: &SceneSpec, traj: &TrajectoryConfig, noise: &NoiseModel) -> Result<SyntheticScene, SimError> {
    let objects = generate_scene(spec)?;
    let gt_poses = generate_trajectory(&objects, spec.room_extent, traj)?;
    let frames = render_detections(&objects, &gt_poses, &traj.intrinsics, spec, noise, traj.seed.wrapping_add(1), 0)?;
    Ok(SyntheticScene { objects, gt_poses, frames })
}
