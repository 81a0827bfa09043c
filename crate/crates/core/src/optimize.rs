//! Box-only bundle adjustment: each representative box is refined against
//! the image projections of its corner point tracks with poses held fixed.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::geom::{box_corners, project_camera_point, project_point, CameraIntrinsics, GeomError, OrientedBox3, SE3Pose, Vec3};
use crate::matchcore::{FrameDetections, FrameId};
use crate::tracks::{PointTrack, SceneMap};

type Vec7 = SVector<f64, 7>;
type Mat7 = SMatrix<f64, 7, 7>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaConfig {
    pub enabled: bool,
    pub max_iterations: usize,
    pub fd_step: f64,
    pub relative_cost_tolerance: f64,
    pub step_tolerance: f64,
    pub huber: bool,
    pub huber_delta: f64,
    pub min_dim: f64,
    pub max_dim: f64,
    /// Reserved; poses are never refined.
    pub refine_poses: bool,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            max_iterations: 100,
            fd_step: 1e-6,
            relative_cost_tolerance: 1e-10,
            step_tolerance: 1e-10,
            huber: false,
            huber_delta: 0.01,
            min_dim: 1e-3,
            max_dim: 50.0,
            refine_poses: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxParams {
    pub center: Vec3,
    pub log_dims: Vec3,
    pub yaw: f64,
}

impl BoxParams {
    pub fn from_box(b: &OrientedBox3) -> Self {
        Self {
            center: b.center,
            log_dims: b.dims.map(f64::ln),
            yaw: b.yaw,
        }
    }

    pub fn to_box(&self) -> OrientedBox3 {
        OrientedBox3::new(self.center, self.log_dims.map(f64::exp), self.yaw)
    }

    fn to_vec(self) -> Vec7 {
        Vec7::from_column_slice(&[
            self.center.x,
            self.center.y,
            self.center.z,
            self.log_dims.x,
            self.log_dims.y,
            self.log_dims.z,
            self.yaw,
        ])
    }

    fn from_vec(v: &Vec7) -> Self {
        Self {
            center: Vec3::new(v[0], v[1], v[2]),
            log_dims: Vec3::new(v[3], v[4], v[5]),
            yaw: v[6],
        }
    }

    fn clamp_dims(&mut self, min_dim: f64, max_dim: f64) {
        let (lo, hi) = (min_dim.ln(), max_dim.ln());
        self.log_dims = self.log_dims.map(|d| d.clamp(lo, hi));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerResidualTerm {
    pub frame_id: FrameId,
    pub intrinsics: CameraIntrinsics,
    pub cam_from_world: SE3Pose,
    pub rep_corner_index: usize,
    pub observed_xy: (f64, f64),
    pub image_size: (f64, f64),
}

impl CornerResidualTerm {
    /// Observations far outside the image (beyond 1.5 image sizes on either
    /// side) are rejected.
    pub fn within_gate(&self) -> bool {
        let (w, h) = self.image_size;
        let (u, v) = self.observed_xy;
        (-1.5 * w..=2.5 * w).contains(&u) && (-1.5 * h..=2.5 * h).contains(&v)
    }
}

/// Image-size-normalized reprojection residual of one corner.
pub fn reprojection_residual(params: &BoxParams, term: &CornerResidualTerm) -> Result<(f64, f64), GeomError> {
    let corner = box_corners(&params.to_box())[term.rep_corner_index];
    let world_from_cam = term.cam_from_world.inverse();
    let (u, v) = project_point(&term.intrinsics, &world_from_cam, &corner)?;
    Ok((
        (u - term.observed_xy.0) / term.image_size.0,
        (v - term.observed_xy.1) / term.image_size.1,
    ))
}

/// Huber-scaled residual: its squared norm equals the Huber cost of the
/// original squared norm.
fn robustify(r: (f64, f64), cfg: &BaConfig) -> (f64, f64) {
    if !cfg.huber {
        return r;
    }
    let s = r.0 * r.0 + r.1 * r.1;
    let d = cfg.huber_delta;
    if s <= d * d {
        return r;
    }
    let rho = 2.0 * d * s.sqrt() - d * d;
    let k = (rho / s).sqrt();
    (r.0 * k, r.1 * k)
}

fn residual_vector(x: &Vec7, terms: &[CornerResidualTerm], cfg: &BaConfig) -> Option<Vec<f64>> {
    let p = BoxParams::from_vec(x);
    let mut out = Vec::with_capacity(2 * terms.len());
    for t in terms {
        let r = robustify(reprojection_residual(&p, t).ok()?, cfg);
        out.push(r.0);
        out.push(r.1);
    }
    Some(out)
}

fn cost_of(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Finite-difference Jacobian of the stacked residuals, 2·terms × 7,
/// row-major. Central differences when `central`, forward otherwise.
pub fn numeric_jacobian(
    params: &BoxParams,
    terms: &[CornerResidualTerm],
    cfg: &BaConfig,
    step: f64,
    central: bool,
) -> Option<Vec<[f64; 7]>> {
    let x = params.to_vec();
    let base = residual_vector(&x, terms, cfg)?;
    let mut jac = vec![[0.0; 7]; base.len()];
    for k in 0..7 {
        let mut xp = x;
        xp[k] += step;
        let rp = residual_vector(&xp, terms, cfg)?;
        let (rm, denom) = if central {
            let mut xm = x;
            xm[k] -= step;
            (residual_vector(&xm, terms, cfg)?, 2.0 * step)
        } else {
            (base.clone(), step)
        };
        for (row, (a, b)) in jac.iter_mut().zip(rp.iter().zip(&rm)) {
            row[k] = (a - b) / denom;
        }
    }
    Some(jac)
}

/// Total squared residual of `terms` at `params`, skipping terms behind
/// the camera.
pub fn total_cost(params: &BoxParams, terms: &[CornerResidualTerm], cfg: &BaConfig) -> f64 {
    terms
        .iter()
        .filter_map(|t| reprojection_residual(params, t).ok())
        .map(|r| {
            let r = robustify(r, cfg);
            r.0 * r.0 + r.1 * r.1
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub refined: OrientedBox3,
    pub iterations: usize,
    pub active_terms: usize,
    /// Cost at the start and after every accepted step.
    pub cost_history: Vec<f64>,
}

impl OptimizeReport {
    pub fn initial_cost(&self) -> f64 {
        self.cost_history.first().copied().unwrap_or(0.0)
    }

    pub fn final_cost(&self) -> f64 {
        self.cost_history.last().copied().unwrap_or(0.0)
    }
}

/// Levenberg–Marquardt over center, log-dims and yaw. Terms whose corner is
/// behind the camera at the start are dropped; with no active term the
/// initial box is returned.
pub fn optimize_track(initial: &OrientedBox3, terms: &[CornerResidualTerm], cfg: &BaConfig) -> OptimizeReport {
    let mut params = BoxParams::from_box(initial);
    params.clamp_dims(cfg.min_dim, cfg.max_dim);
    let active: Vec<CornerResidualTerm> = terms
        .iter()
        .filter(|t| match reprojection_residual(&params, t) {
            Ok(_) => true,
            Err(_) => {
                warn!("corner {} behind camera in frame {}; term dropped", t.rep_corner_index, t.frame_id);
                false
            }
        })
        .copied()
        .collect();
    if active.is_empty() {
        return OptimizeReport {
            refined: *initial,
            iterations: 0,
            active_terms: 0,
            cost_history: Vec::new(),
        };
    }

    let mut x = params.to_vec();
    let mut r = residual_vector(&x, &active, cfg).expect("active terms project");
    let mut cost = cost_of(&r);
    let mut history = vec![cost];
    let mut lambda = 1e-3;
    let mut iterations = 0;
    while iterations < cfg.max_iterations && cost > 0.0 {
        iterations += 1;
        let p = BoxParams::from_vec(&x);
        let Some(jac) = numeric_jacobian(&p, &active, cfg, cfg.fd_step, true) else {
            break;
        };
        let mut jtj = Mat7::zeros();
        let mut jtr = Vec7::zeros();
        for (row, ri) in jac.iter().zip(&r) {
            let j = Vec7::from_column_slice(row);
            jtj += j * j.transpose();
            jtr += j * *ri;
        }
        let mut accepted = false;
        let mut small_step = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for k in 0..7 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(delta) = a.cholesky().map(|c| c.solve(&-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = BoxParams::from_vec(&(x + delta));
            trial.clamp_dims(cfg.min_dim, cfg.max_dim);
            let xt = trial.to_vec();
            let step = (xt - x).norm();
            match residual_vector(&xt, &active, cfg) {
                Some(rt) if cost_of(&rt) < cost => {
                    let new_cost = cost_of(&rt);
                    let rel = (cost - new_cost) / cost;
                    x = xt;
                    r = rt;
                    cost = new_cost;
                    history.push(cost);
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = true;
                    small_step = rel < cfg.relative_cost_tolerance || step < cfg.step_tolerance;
                    break;
                }
                _ => {
                    if step < cfg.step_tolerance {
                        small_step = true;
                        break;
                    }
                    lambda *= 10.0;
                }
            }
        }
        if !accepted || small_step {
            break;
        }
    }
    OptimizeReport {
        refined: BoxParams::from_vec(&x).to_box(),
        iterations,
        active_terms: active.len(),
        cost_history: history,
    }
}

/// Pixel position of corner `corner` of a detection box (rectified camera
/// frame) in the frame's own image.
pub fn observed_corner(frame: &FrameDetections, rectification: &nalgebra::Matrix3<f64>, det: usize, corner: usize) -> Result<(f64, f64), GeomError> {
    let p_rect = box_corners(&frame.detections[det].bbox)[corner];
    project_camera_point(&frame.intrinsics, &(rectification.transpose() * p_rect))
}

/// Residual terms of one track from its point tracks; every member,
/// including the representative's own corner, contributes a term.
pub fn assemble_terms(
    map: &SceneMap,
    point_tracks: &[PointTrack],
    frames: &BTreeMap<FrameId, FrameDetections>,
) -> Vec<CornerResidualTerm> {
    let mut terms = Vec::new();
    for pt in point_tracks {
        for &(f, d, m) in &pt.members {
            let (Some(pose), Some(fp), Some(frame)) = (map.poses.world_from_camera(f), map.poses.poses.get(&f), frames.get(&f)) else {
                continue;
            };
            let Ok(xy) = observed_corner(frame, &fp.rectification, d, m) else {
                continue;
            };
            let term = CornerResidualTerm {
                frame_id: f,
                intrinsics: frame.intrinsics,
                cam_from_world: pose.inverse(),
                rep_corner_index: pt.rep_corner_index,
                observed_xy: xy,
                image_size: (frame.intrinsics.width, frame.intrinsics.height),
            };
            if term.within_gate() {
                terms.push(term);
            }
        }
    }
    terms
}

/// Summed corner reprojection cost of every track's representative box.
pub fn map_reprojection_cost(
    map: &SceneMap,
    point_tracks: &[Vec<PointTrack>],
    frames: &BTreeMap<FrameId, FrameDetections>,
    cfg: &BaConfig,
) -> f64 {
    map.tracks
        .iter()
        .zip(point_tracks)
        .map(|(t, pts)| total_cost(&BoxParams::from_box(&t.representative_box), &assemble_terms(map, pts, frames), cfg))
        .sum()
}

/// Refines every track's representative box; poses, membership and labels
/// are left alone. `point_tracks[k]` belongs to `map.tracks[k]`.
pub fn refine_map(
    map: &SceneMap,
    point_tracks: &[Vec<PointTrack>],
    frames: &BTreeMap<FrameId, FrameDetections>,
    cfg: &BaConfig,
) -> SceneMap {
    let solve = |k: usize| -> OrientedBox3 {
        let track = &map.tracks[k];
        let Some(pts) = point_tracks.get(k) else {
            return track.representative_box;
        };
        let terms = assemble_terms(map, pts, frames);
        if terms.is_empty() {
            return track.representative_box;
        }
        optimize_track(&track.representative_box, &terms, cfg).refined
    };
    #[cfg(feature = "parallel")]
    let boxes: Vec<OrientedBox3> = {
        use rayon::prelude::*;
        (0..map.tracks.len()).into_par_iter().map(solve).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let boxes: Vec<OrientedBox3> = (0..map.tracks.len()).map(solve).collect();

    let mut out = map.clone();
    for (t, b) in out.tracks.iter_mut().zip(boxes) {
        t.representative_box = b;
    }
    out
}
