//! Relative 4-DoF pose from matched boxes, verified by exhaustive
//! two-object samples.

use serde::{Deserialize, Serialize};

use crate::geom::{box_corners, iou3d, kabsch_yaw, transform_box, OrientedBox3, Vec3, YawPose};
use crate::matchcore::{CornerMatch, FrameDetections, ObjectMatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    /// A matched object is an inlier when `1 − IoU3D` is below this.
    pub box_error_threshold: f64,
    pub min_inlier_ratio: f64,
    /// Corner inlier radius (m), strict.
    pub corner_radius: f64,
    /// Refit the winning pose on all inlier corners.
    pub refit: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            box_error_threshold: 0.75,
            min_inlier_ratio: 0.5,
            corner_radius: 0.10,
            refit: true,
        }
    }
}

/// A verified relative pose. `pose` maps frame-a camera coordinates to
/// frame-b camera coordinates. Corner matches index into
/// `inlier_object_matches`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativePoseEstimate {
    pub pose: YawPose,
    pub inlier_object_matches: Vec<ObjectMatch>,
    pub inlier_corner_matches: Vec<CornerMatch>,
    pub mean_matching_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub estimate: Option<RelativePoseEstimate>,
    pub samples_evaluated: usize,
}

/// `1 − IoU3D` of box a moved into frame b against box b.
pub fn box_match_error(box_a: &OrientedBox3, box_b: &OrientedBox3, pose: &YawPose) -> f64 {
    1.0 - iou3d(&transform_box(box_a, pose), box_b)
}

fn corner_pair(a: &FrameDetections, b: &FrameDetections, om: &ObjectMatch, cm: &CornerMatch) -> (Vec3, Vec3) {
    (
        box_corners(&a.detections[om.index_a].bbox)[cm.corner_a],
        box_corners(&b.detections[om.index_b].bbox)[cm.corner_b],
    )
}

/// Corner matches whose transferred corner lands strictly within `radius_m`.
pub fn corner_inliers(
    a: &FrameDetections,
    b: &FrameDetections,
    object_matches: &[ObjectMatch],
    corner_matches: &[CornerMatch],
    pose: &YawPose,
    radius_m: f64,
) -> Vec<CornerMatch> {
    corner_matches
        .iter()
        .filter(|cm| {
            let (pa, pb) = corner_pair(a, b, &object_matches[cm.object_match], cm);
            (pose.apply(&pa) - pb).norm() < radius_m
        })
        .copied()
        .collect()
}

struct Scored {
    pose: YawPose,
    inliers: Vec<usize>,
    mean_error: f64,
}

fn score_pose(
    a: &FrameDetections,
    b: &FrameDetections,
    object_matches: &[ObjectMatch],
    pose: YawPose,
    sample: (usize, usize),
    cfg: &VerifyConfig,
) -> Option<Scored> {
    let errors: Vec<f64> = object_matches
        .iter()
        .map(|m| box_match_error(&a.detections[m.index_a].bbox, &b.detections[m.index_b].bbox, &pose))
        .collect();
    let thr = cfg.box_error_threshold;
    if errors[sample.0] >= thr || errors[sample.1] >= thr {
        return None;
    }
    let inliers: Vec<usize> = (0..errors.len()).filter(|&i| errors[i] < thr).collect();
    if (inliers.len() as f64) < cfg.min_inlier_ratio * errors.len() as f64 {
        return None;
    }
    let mean_error = inliers.iter().map(|&i| errors[i]).sum::<f64>() / inliers.len() as f64;
    Some(Scored {
        pose,
        inliers,
        mean_error,
    })
}

/// Exhaustive two-object-sample verification; see [`Verification`].
pub fn verify_relative_pose(
    a: &FrameDetections,
    b: &FrameDetections,
    object_matches: &[ObjectMatch],
    corner_matches: &[CornerMatch],
    cfg: &VerifyConfig,
) -> Verification {
    let k = object_matches.len();
    if k < 2 {
        return Verification {
            estimate: None,
            samples_evaluated: 0,
        };
    }
    let mut by_match: Vec<Vec<(Vec3, Vec3)>> = vec![Vec::new(); k];
    for cm in corner_matches {
        by_match[cm.object_match].push(corner_pair(a, b, &object_matches[cm.object_match], cm));
    }

    let mut samples = 0;
    let mut best: Option<(Scored, (usize, usize))> = None;
    for i in 0..k {
        for j in (i + 1)..k {
            samples += 1;
            let (src, dst): (Vec<Vec3>, Vec<Vec3>) =
                by_match[i].iter().chain(&by_match[j]).copied().unzip();
            let Ok(pose) = kabsch_yaw(&src, &dst) else {
                continue;
            };
            if let Some(s) = score_pose(a, b, object_matches, pose, (i, j), cfg) {
                if best.as_ref().is_none_or(|(b, _)| s.mean_error < b.mean_error) {
                    best = Some((s, (i, j)));
                }
            }
        }
    }
    let Some((mut winner, sample)) = best else {
        return Verification {
            estimate: None,
            samples_evaluated: samples,
        };
    };

    if cfg.refit {
        let (src, dst): (Vec<Vec3>, Vec<Vec3>) = winner
            .inliers
            .iter()
            .flat_map(|&m| by_match[m].iter())
            .filter(|(pa, pb)| (winner.pose.apply(pa) - pb).norm() < cfg.corner_radius)
            .copied()
            .unzip();
        if let Ok(pose) = kabsch_yaw(&src, &dst) {
            if let Some(refit) = score_pose(a, b, object_matches, pose, sample, cfg) {
                winner = refit;
            }
        }
    }

    let mut remap = vec![usize::MAX; k];
    for (n, &m) in winner.inliers.iter().enumerate() {
        remap[m] = n;
    }
    let inlier_corner_matches = corner_inliers(a, b, object_matches, corner_matches, &winner.pose, cfg.corner_radius)
        .into_iter()
        .filter(|cm| remap[cm.object_match] != usize::MAX)
        .map(|cm| CornerMatch {
            object_match: remap[cm.object_match],
            ..cm
        })
        .collect();
    Verification {
        estimate: Some(RelativePoseEstimate {
            pose: winner.pose,
            inlier_object_matches: winner.inliers.iter().map(|&m| object_matches[m]).collect(),
            inlier_corner_matches,
            mean_matching_error: winner.mean_error,
        }),
        samples_evaluated: samples,
    }
}

pub fn estimate_relative_pose(
    a: &FrameDetections,
    b: &FrameDetections,
    object_matches: &[ObjectMatch],
    corner_matches: &[CornerMatch],
    cfg: &VerifyConfig,
) -> Option<RelativePoseEstimate> {
    verify_relative_pose(a, b, object_matches, corner_matches, cfg).estimate
}
