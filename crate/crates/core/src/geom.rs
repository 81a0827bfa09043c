//! Gravity-aligned box geometry, yaw-only registration and trajectory alignment.
//!
//! Frames are right-handed with +X right, +Y down (along gravity) and +Z
//! forward. The world vertical axis is +Y as well, so a yaw is a rotation
//! about Y and the horizontal footprint of a box lives in the XZ plane.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector2, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
type Vec2 = Vector2<f64>;

/// Tolerance on the tilt of the vertical axis for gravity-preserving poses.
pub const VERTICAL_TOLERANCE: f64 = 1e-9;

/// Minimum camera-frame depth accepted by the pinhole projection.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("point sets differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("pose tilts the vertical axis by {0:e}")]
    NonGravityPose(f64),
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("invalid box: {0}")]
    InvalidBox(&'static str),
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Rotation by `yaw` about the vertical (+Y) axis.
pub fn rot_vertical(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Gravity-aligned 3D box: `dims` are full extents along the box-local axes,
/// `yaw` rotates the box about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox3 {
    pub center: Vec3,
    pub dims: Vec3,
    pub yaw: f64,
}

impl OrientedBox3 {
    pub fn new(center: Vec3, dims: Vec3, yaw: f64) -> Self {
        Self {
            center,
            dims,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn try_new(center: Vec3, dims: Vec3, yaw: f64) -> Result<Self, GeomError> {
        if !(center.iter().all(|v| v.is_finite()) && yaw.is_finite()) {
            return Err(GeomError::InvalidBox("non-finite parameters"));
        }
        if !dims.iter().all(|d| d.is_finite() && *d > 0.0) {
            return Err(GeomError::InvalidBox("dimensions must be positive"));
        }
        Ok(Self::new(center, dims, yaw))
    }

    pub fn volume(&self) -> f64 {
        self.dims.x * self.dims.y * self.dims.z
    }

    /// Vertical extent as `(min_y, max_y)`.
    pub fn vertical_interval(&self) -> (f64, f64) {
        let h = 0.5 * self.dims.y;
        (self.center.y - h, self.center.y + h)
    }

    /// Footprint corners in the XZ plane, counter-clockwise.
    pub fn footprint(&self) -> [Vec2; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hx = 0.5 * self.dims.x;
        let hz = 0.5 * self.dims.z;
        // (x, z) -> (c x + s z, -s x + c z)
        let local = [(hx, hz), (hx, -hz), (-hx, -hz), (-hx, hz)];
        let mut pts = local.map(|(x, z)| {
            Vec2::new(
                self.center.x + c * x + s * z,
                self.center.z - s * x + c * z,
            )
        });
        if signed_area(&pts) < 0.0 {
            pts.reverse();
        }
        pts
    }

    fn bounding_radius(&self) -> f64 {
        0.5 * (self.dims.x * self.dims.x + self.dims.z * self.dims.z).sqrt()
    }
}

/// Sign pattern of corner `k`: bit 0 flips x, bit 1 flips y, bit 2 flips z,
/// a cleared bit meaning `+`.
pub fn corner_signs(k: usize) -> Vec3 {
    let s = |bit: usize| if (k >> bit) & 1 == 0 { 1.0 } else { -1.0 };
    Vec3::new(s(0), s(1), s(2))
}

/// The eight corners of a box, ordered by [`corner_signs`].
pub fn box_corners(b: &OrientedBox3) -> [Vec3; 8] {
    let r = rot_vertical(b.yaw);
    let half = 0.5 * b.dims;
    std::array::from_fn(|k| b.center + r * corner_signs(k).component_mul(&half))
}

fn cross2(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

fn signed_area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| cross2(&poly[i], &poly[(i + 1) % n]))
        .sum::<f64>()
        * 0.5
}

/// Sutherland–Hodgman clipping of `subject` against the convex CCW polygon `clip`.
pub(crate) fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut output: Vec<Vec2> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let edge = b - a;
        let side = |p: &Vec2| cross2(&edge, &(p - a));
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let (sc, sp) = (side(&cur), side(&prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(prev + (cur - prev) * (sp / (sp - sc)));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(prev + (cur - prev) * (sp / (sp - sc)));
            }
        }
    }
    output
}

/// Andrew's monotone chain; returns the hull counter-clockwise.
pub(crate) fn convex_hull(points: &[Vec2]) -> Vec<Vec2> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let half = |pts: &mut dyn Iterator<Item = &Vec2>| {
        let mut chain: Vec<Vec2> = Vec::new();
        for p in pts {
            while chain.len() >= 2 {
                let a = chain[chain.len() - 2];
                let b = chain[chain.len() - 1];
                if cross2(&(b - a), &(p - a)) <= 0.0 {
                    chain.pop();
                } else {
                    break;
                }
            }
            chain.push(*p);
        }
        chain.pop();
        chain
    };
    let mut hull = half(&mut pts.iter());
    hull.extend(half(&mut pts.iter().rev()));
    hull
}

pub(crate) fn polygon_area(poly: &[Vec2]) -> f64 {
    if poly.len() < 3 {
        0.0
    } else {
        signed_area(poly).abs()
    }
}

fn interval_overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Intersection of two footprints (empty when disjoint).
pub fn footprint_intersection(a: &OrientedBox3, b: &OrientedBox3) -> Vec<Vec2> {
    let d = Vec2::new(a.center.x - b.center.x, a.center.z - b.center.z);
    if d.norm() >= a.bounding_radius() + b.bounding_radius() {
        return Vec::new();
    }
    clip_convex(&a.footprint(), &b.footprint())
}

/// Intersection volume of two gravity-aligned boxes.
pub fn intersection_volume(a: &OrientedBox3, b: &OrientedBox3) -> f64 {
    let h = interval_overlap(a.vertical_interval(), b.vertical_interval());
    if h <= 0.0 {
        return 0.0;
    }
    let area = polygon_area(&footprint_intersection(a, b));
    if area <= 0.0 {
        0.0
    } else {
        area * h
    }
}

/// Volumetric intersection-over-union in `[0, 1]`.
pub fn iou3d(a: &OrientedBox3, b: &OrientedBox3) -> f64 {
    let inter = intersection_volume(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU in `(−1, 1]`; the enclosing shape is the convex hull of
/// both footprints extruded over the union of the vertical extents.
pub fn giou3d(a: &OrientedBox3, b: &OrientedBox3) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    let pts: Vec<Vec2> = a.footprint().iter().chain(b.footprint().iter()).copied().collect();
    let (ya, yb) = (a.vertical_interval(), b.vertical_interval());
    let height = ya.1.max(yb.1) - ya.0.min(yb.0);
    let hull = polygon_area(&convex_hull(&pts)) * height;
    let enclosing = hull.max(union);
    let iou = (inter / union).clamp(0.0, 1.0);
    iou - (enclosing - union) / enclosing
}

/// 4-DoF rigid map `p ↦ R_vert(yaw)·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YawPose {
    pub yaw: f64,
    pub t: Vec3,
}

impl YawPose {
    pub fn new(yaw: f64, t: Vec3) -> Self {
        Self {
            yaw: wrap_angle(yaw),
            t,
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, Vec3::zeros())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rot_vertical(self.yaw)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.t
    }

    pub fn inverse(&self) -> Self {
        Self::new(-self.yaw, -(rot_vertical(-self.yaw) * self.t))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &YawPose) -> Self {
        Self::new(self.yaw + other.yaw, self.rotation() * other.t + self.t)
    }

    pub fn to_se3(&self) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation(),
            t: self.t,
        }
    }
}

/// Rigid transform `p ↦ rotation·p + t`. Used as world-from-camera for
/// camera poses, so `t` is the camera center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    pub rotation: Matrix3<f64>,
    pub t: Vec3,
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            t: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, t: Vec3) -> Self {
        Self { rotation, t }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.t
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            t: -(rt * self.t),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SE3Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            t: self.rotation * other.t + self.t,
        }
    }

    pub fn center(&self) -> Vec3 {
        self.t
    }

    /// Tilt of the vertical axis under this rotation.
    pub fn vertical_tilt(&self) -> f64 {
        (self.rotation * Vec3::y() - Vec3::y()).norm()
    }

    /// Yaw of a gravity-preserving rotation.
    pub fn yaw(&self) -> f64 {
        self.rotation[(0, 2)].atan2(self.rotation[(0, 0)])
    }

    /// Geodesic angle (radians) between the two rotations.
    pub fn rotation_angle_to(&self, other: &SE3Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        // atan2 keeps precision for small angles, where acos does not
        let axis = Vec3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]);
        (0.5 * axis.norm()).atan2(0.5 * (rel.trace() - 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite()) && self.t.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width
            && self.cy > 0.0
            && self.cy < self.height
    }

    pub fn contains(&self, uv: (f64, f64)) -> bool {
        uv.0 >= 0.0 && uv.0 < self.width && uv.1 >= 0.0 && uv.1 < self.height
    }
}

/// Least-squares yaw + translation taking `src` onto `dst`.
pub fn kabsch_yaw(src: &[Vec3], dst: &[Vec3]) -> Result<YawPose, GeomError> {
    if src.len() != dst.len() {
        return Err(GeomError::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 2 {
        return Err(GeomError::DegenerateInput("need at least two points"));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let (mut dot, mut cross, mut spread) = (0.0, 0.0, 0.0);
    for (s, d) in src.iter().zip(dst) {
        let (s, d) = (s - cs, d - cd);
        dot += d.x * s.x + d.z * s.z;
        cross += d.x * s.z - d.z * s.x;
        spread += s.x * s.x + s.z * s.z;
    }
    if spread <= 1e-24 {
        return Err(GeomError::DegenerateInput("no horizontal spread, yaw unobservable"));
    }
    let yaw = cross.atan2(dot);
    Ok(YawPose::new(yaw, cd - rot_vertical(yaw) * cs))
}

/// Moves a box by a yaw pose; dims are unchanged.
pub fn transform_box(b: &OrientedBox3, pose: &YawPose) -> OrientedBox3 {
    OrientedBox3::new(pose.apply(&b.center), b.dims, b.yaw + pose.yaw)
}

/// Moves a box by a rigid transform that must keep the vertical axis fixed.
pub fn transform_box_se3(b: &OrientedBox3, pose: &SE3Pose) -> Result<OrientedBox3, GeomError> {
    let tilt = pose.vertical_tilt();
    if tilt > VERTICAL_TOLERANCE {
        return Err(GeomError::NonGravityPose(tilt));
    }
    Ok(OrientedBox3::new(pose.apply(&b.center), b.dims, b.yaw + pose.yaw()))
}

/// Rigid (unit-scale) transform `A` minimizing `Σ‖A·c_src − c_dst‖²` over
/// camera centers.
pub fn se3_align(src: &[SE3Pose], dst: &[SE3Pose]) -> Result<SE3Pose, GeomError> {
    if src.len() != dst.len() {
        return Err(GeomError::LengthMismatch(src.len(), dst.len()));
    }
    let a: Vec<Vec3> = src.iter().map(SE3Pose::center).collect();
    let b: Vec<Vec3> = dst.iter().map(SE3Pose::center).collect();
    align_points(&a, &b)
}

/// Kabsch/Umeyama without scale on corresponding point sets.
pub fn align_points(src: &[Vec3], dst: &[Vec3]) -> Result<SE3Pose, GeomError> {
    if src.len() != dst.len() {
        return Err(GeomError::LengthMismatch(src.len(), dst.len()));
    }
    if src.is_empty() {
        return Err(GeomError::DegenerateInput("no poses to align"));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    if src.len() == 1 {
        return Ok(SE3Pose::new(Matrix3::identity(), cd - cs));
    }
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let svd = SVD::new(h, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeomError::DegenerateInput("SVD failed")),
    };
    let d = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v_t;
    Ok(SE3Pose::new(r, cd - r * cs))
}

/// Pinhole projection of a camera-frame point.
pub fn project_camera_point(k: &CameraIntrinsics, p_cam: &Vec3) -> Result<(f64, f64), GeomError> {
    if p_cam.z <= MIN_DEPTH {
        return Err(GeomError::BehindCamera(p_cam.z));
    }
    Ok((
        k.fx * p_cam.x / p_cam.z + k.cx,
        k.fy * p_cam.y / p_cam.z + k.cy,
    ))
}

/// Projects a world point through a world-from-camera pose.
pub fn project_point(
    k: &CameraIntrinsics,
    world_from_cam: &SE3Pose,
    p_world: &Vec3,
) -> Result<(f64, f64), GeomError> {
    let p_cam = world_from_cam.rotation.transpose() * (p_world - world_from_cam.t);
    project_camera_point(k, &p_cam)
}

/// Rotation taking raw camera coordinates to the gravity-rectified frame:
/// the smallest rotation that maps `gravity_raw` onto +Y.
pub fn rectification_from_gravity(gravity_raw: &Vec3) -> Result<Matrix3<f64>, GeomError> {
    let n = gravity_raw.norm();
    if !(n.is_finite() && n > 1e-12) {
        return Err(GeomError::DegenerateInput("gravity direction has zero length"));
    }
    let g = gravity_raw / n;
    let y = Vec3::y();
    let axis = g.cross(&y);
    let s = axis.norm();
    let c = g.dot(&y);
    if s < 1e-15 {
        return Ok(if c > 0.0 {
            Matrix3::identity()
        } else {
            // upside down: half turn about X keeps yaw unchanged
            Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0)
        });
    }
    let k = axis / s;
    let kx = k.cross_matrix();
    Ok(Matrix3::identity() + kx * s + kx * kx * (1.0 - c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit_cube(center: Vec3, yaw: f64) -> OrientedBox3 {
        OrientedBox3::new(center, Vec3::new(1.0, 1.0, 1.0), yaw)
    }

    #[test]
    fn unit_cube_corners_are_sign_combinations() {
        let corners = box_corners(&unit_cube(Vec3::zeros(), 0.0));
        for (k, c) in corners.iter().enumerate() {
            assert_abs_diff_eq!(*c, corner_signs(k) * 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn corner_zero_is_all_positive() {
        let b = OrientedBox3::new(Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 2.0, 2.0), 0.0);
        assert_abs_diff_eq!(box_corners(&b)[0], Vec3::new(2.0, 1.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn quarter_turn_permutes_cube_corners() {
        let a = box_corners(&unit_cube(Vec3::zeros(), 0.0));
        let b = box_corners(&unit_cube(Vec3::zeros(), PI / 2.0));
        let r = rot_vertical(PI / 2.0);
        for k in 0..8 {
            // rotated corner k must coincide with some yaw-0 corner
            let expected = r * a[k];
            assert_abs_diff_eq!(b[k], expected, epsilon = 1e-12);
            assert!(a.iter().any(|c| (c - b[k]).norm() < 1e-12));
        }
    }

    #[test]
    fn iou_identical_and_offset_cubes() {
        let a = unit_cube(Vec3::zeros(), 0.3);
        assert_abs_diff_eq!(iou3d(&a, &a), 1.0, epsilon = 1e-12);
        let a = unit_cube(Vec3::zeros(), 0.0);
        let b = unit_cube(Vec3::new(0.5, 0.0, 0.0), 0.0);
        assert_abs_diff_eq!(iou3d(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(giou3d(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn disjoint_boxes_have_exactly_zero_iou() {
        let a = unit_cube(Vec3::zeros(), 0.0);
        let b = unit_cube(Vec3::new(0.0, 1.5, 0.0), 0.0);
        assert_eq!(iou3d(&a, &b), 0.0);
        let c = unit_cube(Vec3::new(3.0, 0.0, 0.0), 0.7);
        assert_eq!(iou3d(&a, &c), 0.0);
    }

    #[test]
    fn giou_far_apart_approaches_minus_one() {
        let a = unit_cube(Vec3::zeros(), 0.0);
        let b = unit_cube(Vec3::new(100.0, 0.0, 0.0), 0.0);
        assert!(giou3d(&a, &b) < -0.9);
        assert_abs_diff_eq!(giou3d(&a, &a), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kabsch_identity_and_translation() {
        let src = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.5, 0.0),
            Vec3::new(0.0, -0.2, 2.0),
        ];
        let p = kabsch_yaw(&src, &src).unwrap();
        assert_abs_diff_eq!(p.yaw, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.t, Vec3::zeros(), epsilon = 1e-15);
        let dst: Vec<Vec3> = src.iter().map(|s| s + Vec3::new(1.0, 2.0, 3.0)).collect();
        let p = kabsch_yaw(&src, &dst).unwrap();
        assert_abs_diff_eq!(p.yaw, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.t, Vec3::new(1.0, 2.0, 3.0), epsilon = 1e-14);
    }

    #[test]
    fn kabsch_rejects_vertical_only_spread() {
        let src = vec![Vec3::new(1.0, 0.0, 1.0), Vec3::new(1.0, 3.0, 1.0)];
        assert!(matches!(
            kabsch_yaw(&src, &src),
            Err(GeomError::DegenerateInput(_))
        ));
        assert!(matches!(
            kabsch_yaw(&src, &src[..1]),
            Err(GeomError::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn half_turn_moves_box_to_the_other_side() {
        let b = unit_cube(Vec3::new(1.0, 0.0, 0.0), 0.0);
        let out = transform_box(&b, &YawPose::new(PI, Vec3::zeros()));
        assert_abs_diff_eq!(out.center, Vec3::new(-1.0, 0.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(out.yaw, PI, epsilon = 1e-15);
    }

    #[test]
    fn tilted_pose_is_rejected() {
        let tilt = nalgebra::Rotation3::from_axis_angle(&Vec3::x_axis(), 1e-3);
        let pose = SE3Pose::new(*tilt.matrix(), Vec3::zeros());
        let b = unit_cube(Vec3::zeros(), 0.0);
        assert!(matches!(
            transform_box_se3(&b, &pose),
            Err(GeomError::NonGravityPose(_))
        ));
        let ok = transform_box_se3(&b, &YawPose::new(0.4, Vec3::x()).to_se3()).unwrap();
        assert_abs_diff_eq!(ok.yaw, 0.4, epsilon = 1e-15);
    }

    #[test]
    fn projection_examples() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100.0, 100.0);
        let id = SE3Pose::identity();
        assert_eq!(project_point(&k, &id, &Vec3::new(0.0, 0.0, 1.0)).unwrap(), (50.0, 50.0));
        let (u, v) = project_point(&k, &id, &Vec3::new(0.1, 0.2, 1.0)).unwrap();
        assert_abs_diff_eq!(u, 60.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 70.0, epsilon = 1e-12);
        assert!(matches!(
            project_point(&k, &id, &Vec3::new(0.0, 0.0, -1.0)),
            Err(GeomError::BehindCamera(_))
        ));
    }

    #[test]
    fn se3_align_identity_and_single_pose() {
        let poses: Vec<SE3Pose> = (0..4)
            .map(|i| YawPose::new(0.3 * i as f64, Vec3::new(i as f64, 0.5 * (i * i) as f64, 1.0 - i as f64)).to_se3())
            .collect();
        let a = se3_align(&poses, &poses).unwrap();
        assert_abs_diff_eq!(a.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(a.t, Vec3::zeros(), epsilon = 1e-12);
        assert!(se3_align(&[], &[]).is_err());
        let one = se3_align(&poses[..1], &poses[1..2]).unwrap();
        assert_abs_diff_eq!(one.apply(&poses[0].t), poses[1].t, epsilon = 1e-15);
    }

    #[test]
    fn collinear_alignment_is_minimal_against_grid() {
        // centers on a line: rotation about that line is free, residual must still be optimal
        let src: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let truth = YawPose::new(0.8, Vec3::new(0.3, -1.0, 2.0)).to_se3();
        let dst: Vec<Vec3> = src
            .iter()
            .enumerate()
            .map(|(i, p)| truth.apply(p) + Vec3::new(0.0, 0.01 * (i % 2) as f64, 0.0))
            .collect();
        let a = align_points(&src, &dst).unwrap();
        let cost = |pose: &SE3Pose| -> f64 {
            src.iter().zip(&dst).map(|(s, d)| (pose.apply(s) - d).norm_squared()).sum()
        };
        let best = cost(&a);
        let cd = dst.iter().sum::<Vec3>() / 5.0;
        let cs = src.iter().sum::<Vec3>() / 5.0;
        let steps = 24;
        for i in 0..steps {
            for j in 0..steps {
                for l in 0..steps {
                    let (ax, ay, az) = (
                        2.0 * PI * i as f64 / steps as f64,
                        2.0 * PI * j as f64 / steps as f64,
                        2.0 * PI * l as f64 / steps as f64,
                    );
                    let r = *nalgebra::Rotation3::from_euler_angles(ax, ay, az).matrix();
                    let pose = SE3Pose::new(r, cd - r * cs);
                    assert!(best <= cost(&pose) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn rectification_maps_gravity_to_plus_y() {
        let g = Vec3::new(0.0, 0.8, 0.6);
        let r = rectification_from_gravity(&g).unwrap();
        assert_abs_diff_eq!(r * g, Vec3::y(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        // a pitched camera keeps its heading: the optical axis stays in the YZ plane
        assert_abs_diff_eq!((r * Vec3::z()).x, 0.0, epsilon = 1e-12);
        let down = rectification_from_gravity(&-Vec3::y()).unwrap();
        assert_abs_diff_eq!(down * -Vec3::y(), Vec3::y(), epsilon = 1e-15);
        assert_eq!(rectification_from_gravity(&Vec3::y()).unwrap(), Matrix3::identity());
    }

    fn arb_box() -> impl Strategy<Value = OrientedBox3> {
        (
            -2.0..2.0f64,
            -1.0..1.0f64,
            -2.0..2.0f64,
            0.2..2.0f64,
            0.2..2.0f64,
            0.2..2.0f64,
            -PI..PI,
        )
            .prop_map(|(x, y, z, a, b, c, yaw)| {
                OrientedBox3::new(Vec3::new(x, y, z), Vec3::new(a, b, c), yaw)
            })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou3d(&a, &b);
            let ba = iou3d(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            let g = giou3d(&a, &b);
            prop_assert!(g <= ab + 1e-12);
            prop_assert!(g > -1.0 && g <= 1.0 + 1e-12);
        }

        #[test]
        fn kabsch_recovers_random_yaw_transforms(
            yaw in -PI..PI,
            tx in -5.0..5.0f64, ty in -5.0..5.0f64, tz in -5.0..5.0f64,
            pts in proptest::collection::vec((-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64), 3..16),
        ) {
            let src: Vec<Vec3> = pts.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
            let truth = YawPose::new(yaw, Vec3::new(tx, ty, tz));
            let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
            let est = kabsch_yaw(&src, &dst).unwrap();
            prop_assert!(wrap_angle(est.yaw - truth.yaw).abs() < 1e-9);
            prop_assert!((est.t - truth.t).norm() < 1e-9);
        }

        #[test]
        fn transform_then_corners_matches_transformed_corners(
            b in arb_box(), yaw in -PI..PI, tx in -3.0..3.0f64, tz in -3.0..3.0f64, ty in -1.0..1.0f64,
        ) {
            let pose = YawPose::new(yaw, Vec3::new(tx, ty, tz));
            let moved = box_corners(&transform_box(&b, &pose));
            let direct = box_corners(&b).map(|c| pose.apply(&c));
            for c in &direct {
                prop_assert!(moved.iter().any(|m| (m - c).norm() < 1e-9));
            }
        }

        #[test]
        fn se3_align_is_invariant_to_common_transform(
            yaw in -PI..PI, roll in -0.5..0.5f64, tx in -3.0..3.0f64,
            pts in proptest::collection::vec((-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64), 4..10),
        ) {
            let src: Vec<Vec3> = pts.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
            let warp = YawPose::new(0.3, Vec3::new(0.1, 0.0, -0.2));
            let dst: Vec<Vec3> = src.iter().map(|p| warp.apply(p) + Vec3::new(0.0, 0.01 * p.x, 0.0)).collect();
            let common = SE3Pose::new(
                *nalgebra::Rotation3::from_euler_angles(roll, yaw, 0.0).matrix(),
                Vec3::new(tx, 1.0, -tx),
            );
            let a = align_points(&src, &dst).unwrap();
            let src2: Vec<Vec3> = src.iter().map(|p| common.apply(p)).collect();
            let dst2: Vec<Vec3> = dst.iter().map(|p| common.apply(p)).collect();
            let b = align_points(&src2, &dst2).unwrap();
            let res = |pose: &SE3Pose, s: &[Vec3], d: &[Vec3]| -> f64 {
                s.iter().zip(d).map(|(p, q)| (pose.apply(p) - q).norm_squared()).sum()
            };
            prop_assert!((res(&a, &src, &dst) - res(&b, &src2, &dst2)).abs() < 1e-9);
        }
    }
}
