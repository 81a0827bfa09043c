//! Map precision/recall at IoU3D thresholds and trajectory errors after
//! rigid alignment.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::geom::{iou3d, se3_align, GeomError, OrientedBox3, SE3Pose};
use crate::matchcore::FrameId;

pub const IOU_THRESHOLDS: [f64; 2] = [0.15, 0.25];
pub const MAX_DETECTIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bbox: OrientedBox3,
    pub score: f64,
    pub label: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: OrientedBox3,
    pub class_id: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApAr {
    pub threshold: f64,
    pub ap: f64,
    pub ar: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap15: f64,
    pub ar15: f64,
    pub ap25: f64,
    pub ar25: f64,
    pub are_median_deg: f64,
    pub are_rmse_deg: f64,
    pub ate_median_cm: f64,
    pub ate_rmse_cm: f64,
    pub registration_rate: f64,
}

/// Greedy matching of score-sorted predictions (first `max_detections`)
/// to ground truth. Returns a TP flag per kept prediction in score order.
pub fn greedy_match(preds: &[Prediction], gts: &[OrientedBox3], threshold: f64, max_detections: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order.truncate(max_detections);
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = iou3d(&preds[p].bbox, gt);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated area under the precision-recall curve.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

fn ap_ar_single(preds: &[Prediction], gts: &[OrientedBox3], threshold: f64, max_detections: usize) -> (f64, f64) {
    let tp = greedy_match(preds, gts, threshold, max_detections);
    let hits = tp.iter().filter(|&&t| t).count();
    let ar = if gts.is_empty() { 0.0 } else { hits as f64 / gts.len() as f64 };
    (average_precision(&tp, gts.len()), ar)
}

/// AP/AR per threshold. Class-aware results are averaged over the classes
/// present in the ground truth; otherwise labels are ignored.
pub fn evaluate_map(preds: &[Prediction], gts: &[GtBox], thresholds: &[f64], max_detections: usize, class_aware: bool) -> Vec<ApAr> {
    thresholds
        .iter()
        .map(|&threshold| {
            if !class_aware {
                let boxes: Vec<OrientedBox3> = gts.iter().map(|g| g.bbox).collect();
                let (ap, ar) = ap_ar_single(preds, &boxes, threshold, max_detections);
                return ApAr { threshold, ap, ar };
            }
            let classes: BTreeSet<i64> = gts.iter().map(|g| g.class_id).collect();
            let (mut ap_sum, mut ar_sum) = (0.0, 0.0);
            for &c in &classes {
                let p: Vec<Prediction> = preds.iter().filter(|p| p.label == c).copied().collect();
                let g: Vec<OrientedBox3> = gts.iter().filter(|g| g.class_id == c).map(|g| g.bbox).collect();
                let (ap, ar) = ap_ar_single(&p, &g, threshold, max_detections);
                ap_sum += ap;
                ar_sum += ar;
            }
            let n = classes.len().max(1) as f64;
            ApAr {
                threshold,
                ap: ap_sum / n,
                ar: ar_sum / n,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    pub ate_median_m: f64,
    pub ate_rmse_m: f64,
    pub are_median_deg: f64,
    pub are_rmse_deg: f64,
    pub registration_rate: f64,
    pub evaluated_frames: usize,
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn rmse(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Rigid transform taking estimated to ground-truth camera centers over the
/// frames present in both.
pub fn align_trajectories(est: &BTreeMap<FrameId, SE3Pose>, gt: &BTreeMap<FrameId, SE3Pose>) -> Result<SE3Pose, GeomError> {
    let common: Vec<FrameId> = est.keys().filter(|f| gt.contains_key(f)).copied().collect();
    let e: Vec<SE3Pose> = common.iter().map(|f| est[f]).collect();
    let g: Vec<SE3Pose> = common.iter().map(|f| gt[f]).collect();
    se3_align(&e, &g)
}

/// Errors of `alignment ∘ est` against ground truth; `total_frames` sets the
/// registration-rate denominator.
pub fn pose_errors_with(
    est: &BTreeMap<FrameId, SE3Pose>,
    gt: &BTreeMap<FrameId, SE3Pose>,
    alignment: &SE3Pose,
    total_frames: usize,
) -> PoseErrors {
    let mut ate = Vec::new();
    let mut are = Vec::new();
    for (f, e) in est {
        let Some(g) = gt.get(f) else { continue };
        let aligned = alignment.compose(e);
        ate.push((aligned.t - g.t).norm());
        are.push(aligned.rotation_angle_to(g).to_degrees());
    }
    let evaluated = ate.len();
    PoseErrors {
        ate_rmse_m: rmse(&ate),
        ate_median_m: median(&mut ate),
        are_rmse_deg: rmse(&are),
        are_median_deg: median(&mut are),
        registration_rate: if total_frames == 0 { 0.0 } else { est.len() as f64 / total_frames as f64 },
        evaluated_frames: evaluated,
    }
}

pub fn evaluate_poses(est: &BTreeMap<FrameId, SE3Pose>, gt: &BTreeMap<FrameId, SE3Pose>, total_frames: usize) -> Result<PoseErrors, GeomError> {
    let alignment = align_trajectories(est, gt)?;
    Ok(pose_errors_with(est, gt, &alignment, total_frames))
}

/// Moves a world box by a rigid transform, keeping only the yaw part of
/// the rotation so the box stays gravity-aligned.
pub fn align_box(b: &OrientedBox3, alignment: &SE3Pose) -> OrientedBox3 {
    OrientedBox3::new(alignment.apply(&b.center), b.dims, b.yaw + alignment.yaw())
}

/// Full report: trajectories are aligned first and the same alignment is
/// applied to the predicted boxes before scoring them.
pub fn report(
    est_poses: &BTreeMap<FrameId, SE3Pose>,
    gt_poses: &BTreeMap<FrameId, SE3Pose>,
    preds: &[Prediction],
    gts: &[GtBox],
    total_frames: usize,
    class_aware: bool,
) -> Result<MetricsReport, GeomError> {
    let alignment = align_trajectories(est_poses, gt_poses)?;
    let pose = pose_errors_with(est_poses, gt_poses, &alignment, total_frames);
    let aligned: Vec<Prediction> = preds
        .iter()
        .map(|p| Prediction {
            bbox: align_box(&p.bbox, &alignment),
            ..*p
        })
        .collect();
    let m = evaluate_map(&aligned, gts, &IOU_THRESHOLDS, MAX_DETECTIONS, class_aware);
    Ok(MetricsReport {
        ap15: m[0].ap,
        ar15: m[0].ar,
        ap25: m[1].ap,
        ar25: m[1].ar,
        are_median_deg: pose.are_median_deg,
        are_rmse_deg: pose.are_rmse_deg,
        ate_median_cm: 100.0 * pose.ate_median_m,
        ate_rmse_cm: 100.0 * pose.ate_rmse_m,
        registration_rate: pose.registration_rate,
    })
}
