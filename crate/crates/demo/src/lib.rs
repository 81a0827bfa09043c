//! Browser bindings: each entry point takes and returns a JSON string.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::*;

use objsfm::geom::{giou3d, intersection_volume, iou3d, rectification_from_gravity, OrientedBox3, SE3Pose};
use objsfm::matchcore::{threshold_detections, FrameDetections};
use objsfm::pipeline::io::map_camera_poses;
use objsfm::pipeline::metrics::{align_box, align_trajectories, report, GtBox, Prediction};
use objsfm::pipeline::{process_pair, run_pipeline, RunConfig};
use objsfm::simkit::{simulate, NoiseModel, SceneSpec, TrajectoryConfig};

#[derive(Debug, Clone, Copy, Deserialize)]
struct BoxInput {
    center: [f64; 3],
    dims: [f64; 3],
    yaw: f64,
}

impl BoxInput {
    fn to_box(self) -> Result<OrientedBox3, String> {
        OrientedBox3::try_new(self.center.into(), self.dims.into(), self.yaw).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Deserialize)]
struct OverlapInput {
    a: BoxInput,
    b: BoxInput,
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct SceneInput {
    seed: u64,
    frames: usize,
    objects: usize,
    noisy: bool,
}

impl Default for SceneInput {
    fn default() -> Self {
        Self {
            seed: 1,
            frames: 30,
            objects: 20,
            noisy: true,
        }
    }
}

/// Top-down footprint as (x, z) pairs.
fn footprint(b: &OrientedBox3) -> Vec<[f64; 2]> {
    b.footprint().iter().map(|p| [p.x, p.y]).collect()
}

fn to_json<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("demo output serializes"),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

fn parse<T: for<'de> Deserialize<'de>>(input: &str) -> Result<T, String> {
    serde_json::from_str(input).map_err(|e| e.to_string())
}

fn simulate_input(s: &SceneInput, n_frames: usize) -> Result<objsfm::simkit::SyntheticScene, String> {
    let spec = SceneSpec {
        n_objects: s.objects,
        rng_seed: s.seed,
        ..Default::default()
    };
    let traj = TrajectoryConfig {
        n_frames,
        seed: s.seed,
        ..Default::default()
    };
    let noise = if s.noisy { NoiseModel::desk() } else { NoiseModel::none() };
    simulate(&spec, &traj, &noise).map_err(|e| e.to_string())
}

/// IoU, GIoU and intersection footprint of two boxes.
pub fn box_overlap_json(input: &str) -> String {
    to_json((|| {
        let i: OverlapInput = parse(input)?;
        let (a, b) = (i.a.to_box()?, i.b.to_box()?);
        let inter = objsfm::geom::footprint_intersection(&a, &b);
        Ok(json!({
            "iou": iou3d(&a, &b),
            "giou": giou3d(&a, &b),
            "intersection_volume": intersection_volume(&a, &b),
            "footprint_a": footprint(&a),
            "footprint_b": footprint(&b),
            "intersection": inter.iter().map(|p| [p.x, p.y]).collect::<Vec<_>>(),
        }))
    })())
}

fn world_from_rectified(f: &FrameDetections) -> Result<SE3Pose, String> {
    let rect = rectification_from_gravity(&f.gravity_dir_raw).map_err(|e| e.to_string())?;
    let pose = f.gt_pose.ok_or("frame has no ground truth")?;
    Ok(pose.compose(&SE3Pose::new(rect.transpose(), Vector3::zeros())))
}

/// Matches and verifies the first and last frame of a short simulated walk.
/// `frames` is the walk length.
pub fn two_view_json(input: &str) -> String {
    to_json((|| {
        let s: SceneInput = parse(input)?;
        let scene = simulate_input(&s, s.frames.clamp(2, 20))?;
        let cfg = RunConfig::default();
        let a = threshold_detections(&scene.frames[0], cfg.matching.tau);
        let b = threshold_detections(scene.frames.last().expect("at least two frames"), cfg.matching.tau);
        let pair = process_pair(&a, &b, &cfg).map_err(|e| e.to_string())?;
        let gt = world_from_rectified(&b)?.inverse().compose(&world_from_rectified(&a)?);
        let matches: Vec<_> = pair
            .matches
            .iter()
            .map(|m| {
                let inlier = pair
                    .estimate
                    .as_ref()
                    .is_some_and(|e| e.inlier_object_matches.iter().any(|i| i.index_a == m.index_a && i.index_b == m.index_b));
                json!({
                    "a": m.index_a,
                    "b": m.index_b,
                    "score": m.score,
                    "inlier": inlier,
                    "true_match": a.detections[m.index_a].gt_object_id.is_some_and(|g| g >= 0 && Some(g) == b.detections[m.index_b].gt_object_id),
                })
            })
            .collect();
        // frame b boxes drawn in frame a coordinates through the estimate
        let b_in_a = pair.estimate.as_ref().map(|e| {
            let inv = e.pose.inverse();
            b.detections.iter().map(|d| footprint(&objsfm::geom::transform_box(&d.bbox, &inv))).collect::<Vec<_>>()
        });
        Ok(json!({
            "boxes_a": a.detections.iter().map(|d| footprint(&d.bbox)).collect::<Vec<_>>(),
            "boxes_b_in_a": b_in_a,
            "matches": matches,
            "verified": pair.estimate.is_some(),
            "estimate": pair.estimate.as_ref().map(|e| json!({
                "yaw_deg": e.pose.yaw.to_degrees(),
                "t": [e.pose.t.x, e.pose.t.y, e.pose.t.z],
                "yaw_error_deg": e.pose.to_se3().rotation_angle_to(&gt).to_degrees(),
                "t_error_m": (e.pose.t - gt.t).norm(),
                "mean_matching_error": e.mean_matching_error,
            })),
            "ground_truth": { "yaw_deg": gt.yaw().to_degrees(), "t": [gt.t.x, gt.t.y, gt.t.z] },
        }))
    })())
}

/// Runs the full pipeline on a simulated scene and returns a top-down map
/// aligned to ground truth with its metrics.
pub fn reconstruct_json(input: &str) -> String {
    to_json((|| {
        let s: SceneInput = parse(input)?;
        let scene = simulate_input(&s, s.frames.clamp(2, 80))?;
        let cfg = RunConfig { workers: 1, ..Default::default() };
        let out = run_pipeline(&scene.frames, &cfg).map_err(|e| e.to_string())?;
        let est = map_camera_poses(&out.map);
        let gt: std::collections::BTreeMap<_, _> = scene.frames.iter().map(|f| (f.frame_id, f.gt_pose.expect("simulated"))).collect();
        let preds: Vec<Prediction> = out
            .map
            .tracks
            .iter()
            .map(|t| Prediction {
                bbox: t.representative_box,
                score: t.representative_score,
                label: t.label,
            })
            .collect();
        let gts: Vec<GtBox> = scene.observed_objects().iter().map(|o| GtBox { bbox: o.bbox, class_id: o.class_id }).collect();
        let metrics = report(&est, &gt, &preds, &gts, scene.frames.len(), false).map_err(|e| e.to_string())?;
        let align = align_trajectories(&est, &gt).map_err(|e| e.to_string())?;
        Ok(json!({
            "metrics": metrics,
            "tracks": out.map.tracks.len(),
            "edges": out.log.edges_after_translation,
            "gt_boxes": gts.iter().map(|g| footprint(&g.bbox)).collect::<Vec<_>>(),
            "map_boxes": preds.iter().map(|p| footprint(&align_box(&p.bbox, &align))).collect::<Vec<_>>(),
            "gt_cameras": gt.values().map(|p| [p.t.x, p.t.z]).collect::<Vec<_>>(),
            "map_cameras": est.values().map(|p| { let c = align.apply(&p.t); [c.x, c.z] }).collect::<Vec<_>>(),
        }))
    })())
}

#[wasm_bindgen]
pub fn box_overlap(input: &str) -> String {
    box_overlap_json(input)
}

#[wasm_bindgen]
pub fn two_view(input: &str) -> String {
    two_view_json(input)
}

#[wasm_bindgen]
pub fn reconstruct(input: &str) -> String {
    reconstruct_json(input)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(s: &str) -> serde_json::Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn overlap_of_shifted_unit_cubes() {
        let v = value(&box_overlap_json(
            r#"{"a":{"center":[0,0,0],"dims":[1,1,1],"yaw":0},"b":{"center":[0.5,0,0],"dims":[1,1,1],"yaw":0}}"#,
        ));
        assert!((v["iou"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(v["intersection"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn bad_input_reports_error() {
        assert!(value(&box_overlap_json("{}"))["error"].is_string());
        let v = value(&box_overlap_json(r#"{"a":{"center":[0,0,0],"dims":[0,1,1],"yaw":0},"b":{"center":[0,0,0],"dims":[1,1,1],"yaw":0}}"#));
        assert!(v["error"].is_string());
    }

    #[test]
    fn noiseless_two_view_is_exact() {
        let v = value(&two_view_json(r#"{"seed":2,"frames":4,"noisy":false}"#));
        assert_eq!(v["verified"], true);
        assert!(v["estimate"]["yaw_error_deg"].as_f64().unwrap() < 1e-6);
        assert!(v["estimate"]["t_error_m"].as_f64().unwrap() < 1e-6);
    }

    #[test]
    fn reconstruct_returns_map() {
        let v = value(&reconstruct_json(r#"{"seed":3,"frames":12,"noisy":false}"#));
        assert_eq!(v["metrics"]["registration_rate"], 1.0);
        assert!(!v["map_boxes"].as_array().unwrap().is_empty());
        assert_eq!(v["gt_cameras"].as_array().unwrap().len(), 12);
    }
}
