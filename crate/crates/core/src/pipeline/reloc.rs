//! Pose of a new frame against a built map, from the single registered
//! frame with the most verified object inliers.

use std::collections::BTreeMap;

use crate::geom::{rectification_from_gravity, SE3Pose};
use crate::globalize::{FramePose, GlobalPoses};
use crate::matchcore::{threshold_detections, FrameDetections, FrameId};

use super::{parallel_map, process_pair, PipelineError, RunConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Relocalization {
    /// World-from-camera pose of the query.
    pub pose: SE3Pose,
    pub reference_frame: FrameId,
    pub inlier_objects: usize,
    pub mean_matching_error: f64,
}

/// Registered frames (thresholded) with their poses.
#[derive(Debug, Clone)]
pub struct MapIndex {
    pub frames: BTreeMap<FrameId, FrameDetections>,
    pub poses: GlobalPoses,
}

impl MapIndex {
    /// Index from pipeline output frames; unregistered frames are dropped.
    pub fn new(frames: &BTreeMap<FrameId, FrameDetections>, poses: &GlobalPoses) -> Self {
        Self {
            frames: frames
                .iter()
                .filter(|(f, _)| poses.is_registered(**f))
                .map(|(f, d)| (*f, d.clone()))
                .collect(),
            poses: poses.clone(),
        }
    }

    /// Index from raw frames and saved world-from-camera poses, as written by
    /// a previous run. Frames without a pose are dropped.
    pub fn from_camera_poses(frames: &[FrameDetections], camera_poses: &BTreeMap<FrameId, SE3Pose>, tau: f64) -> Result<Self, PipelineError> {
        let mut poses = GlobalPoses::default();
        let mut kept = BTreeMap::new();
        for f in frames {
            let Some(p) = camera_poses.get(&f.frame_id) else { continue };
            let rect = rectification_from_gravity(&f.gravity_dir_raw).map_err(|e| PipelineError::Gravity(f.frame_id, e))?;
            let r = p.rotation * rect.transpose();
            poses.poses.insert(
                f.frame_id,
                FramePose {
                    yaw: r[(0, 2)].atan2(r[(0, 0)]),
                    center: p.t,
                    rectification: rect,
                },
            );
            kept.insert(f.frame_id, threshold_detections(f, tau));
        }
        Ok(Self { frames: kept, poses })
    }
}

/// Matches the query against every registered frame and chains the pose of
/// the best one (most inlier objects, then lowest mean error, then lowest
/// frame id) with the inverse relative pose. `None` when nothing verifies.
pub fn relocalize(index: &MapIndex, query: &FrameDetections, cfg: &RunConfig) -> Result<Option<Relocalization>, PipelineError> {
    let q = threshold_detections(query, cfg.matching.tau);
    if q.detections.is_empty() {
        return Ok(None);
    }
    let rect_q = rectification_from_gravity(&q.gravity_dir_raw).map_err(|e| PipelineError::Gravity(q.frame_id, e))?;
    let refs: Vec<&FrameDetections> = index.frames.values().collect();
    let results = parallel_map(&refs, cfg.workers, |r| process_pair(r, &q, cfg))?;
    let mut best: Option<(FrameId, crate::twoview::RelativePoseEstimate)> = None;
    for (r, res) in refs.iter().zip(results) {
        let Some(est) = res?.estimate else { continue };
        let better = match &best {
            None => true,
            Some((_, b)) => {
                let (n, nb) = (est.inlier_object_matches.len(), b.inlier_object_matches.len());
                n > nb || (n == nb && est.mean_matching_error < b.mean_matching_error)
            }
        };
        if better {
            best = Some((r.frame_id, est));
        }
    }
    let Some((reference, est)) = best else {
        return Ok(None);
    };
    let world_from_ref = index.poses.world_from_rectified(reference).expect("indexed frames are registered");
    // est.pose maps reference coordinates to query coordinates
    let world_from_q_rect = world_from_ref.compose(&est.pose.inverse().to_se3());
    Ok(Some(Relocalization {
        pose: world_from_q_rect.compose(&SE3Pose::new(rect_q, nalgebra::Vector3::zeros())),
        reference_frame: reference,
        inlier_objects: est.inlier_object_matches.len(),
        mean_matching_error: est.mean_matching_error,
    }))
}
