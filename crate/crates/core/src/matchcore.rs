//! Detection thresholding, embedding-based object assignment and
//! object-constrained corner matching.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{box_corners, corner_signs, kabsch_yaw, wrap_angle, CameraIntrinsics, OrientedBox3, SE3Pose, Vec3, YawPose};

pub type FrameId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("embedding dimension mismatch ({0} vs {1})")]
    EmbeddingDimMismatch(usize, usize),
}

/// One detected object in a gravity-rectified camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: OrientedBox3,
    pub embedding: Vec<f64>,
    pub score: f64,
    /// Class id, or −1 when class-agnostic.
    pub class_id: i64,
    /// Index of the detection within its frame before thresholding.
    pub source_index: usize,
    pub gt_object_id: Option<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub frame_id: FrameId,
    pub intrinsics: CameraIntrinsics,
    pub detections: Vec<Detection>,
    /// Unit gravity direction in the raw camera frame.
    pub gravity_dir_raw: Vec3,
    /// Ground-truth world-from-camera pose, when known.
    pub gt_pose: Option<SE3Pose>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectMatch {
    pub index_a: usize,
    pub index_b: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerMatch {
    /// Index into the object match list the corners were derived from.
    pub object_match: usize,
    pub corner_a: usize,
    pub corner_b: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Detection score threshold.
    pub tau: f64,
    /// Cosine-similarity temperature of the double softmax.
    pub temperature: f64,
    pub match_threshold: f64,
    /// Relative footprint aspect below which quarter-turn corner
    /// correspondences are considered.
    pub square_tolerance: f64,
    /// Length scale (m) of the corner match score.
    pub corner_score_scale: f64,
    /// Yaw tolerance (deg) used to pick a symmetric corner correspondence.
    pub symmetry_yaw_tolerance_deg: f64,
    /// Center transfer radius (m) used to pick a symmetric corner correspondence.
    pub symmetry_center_radius: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            tau: 0.25,
            temperature: 0.1,
            match_threshold: 0.5,
            square_tolerance: 0.1,
            corner_score_scale: 0.05,
            symmetry_yaw_tolerance_deg: 30.0,
            symmetry_center_radius: 0.5,
        }
    }
}

impl MatchConfig {
    /// Thresholds for class-specific detections (0.2 score, 0.4 match).
    pub fn class_aware() -> Self {
        Self {
            tau: 0.2,
            match_threshold: 0.4,
            ..Self::default()
        }
    }
}

/// Keeps detections with `score ≥ tau`, preserving order and source indices.
pub fn threshold_detections(frame: &FrameDetections, tau: f64) -> FrameDetections {
    FrameDetections {
        detections: frame
            .detections
            .iter()
            .filter(|d| d.score >= tau)
            .cloned()
            .collect(),
        ..frame.clone()
    }
}

fn embedding_dim(frame: &FrameDetections) -> Result<Option<usize>, MatchError> {
    let mut dim = None;
    for d in &frame.detections {
        match dim {
            None => dim = Some(d.embedding.len()),
            Some(n) if n != d.embedding.len() => {
                return Err(MatchError::EmbeddingDimMismatch(n, d.embedding.len()))
            }
            _ => {}
        }
    }
    Ok(dim)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Double-softmax assignment matrix `P = softmax_rows(S) ⊙ softmax_cols(S)`
/// with `S = cosine / temperature`. Row-major, `|a| × |b|`.
pub fn assignment_scores(
    a: &FrameDetections,
    b: &FrameDetections,
    temperature: f64,
) -> Result<Vec<Vec<f64>>, MatchError> {
    if let (Some(da), Some(db)) = (embedding_dim(a)?, embedding_dim(b)?) {
        if da != db {
            return Err(MatchError::EmbeddingDimMismatch(da, db));
        }
    }
    let (n, m) = (a.detections.len(), b.detections.len());
    let sim: Vec<Vec<f64>> = a
        .detections
        .iter()
        .map(|da| {
            b.detections
                .iter()
                .map(|db| cosine(&da.embedding, &db.embedding) / temperature)
                .collect()
        })
        .collect();
    let mut rows = vec![vec![0.0; m]; n];
    for i in 0..n {
        let max = sim[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = sim[i].iter().map(|s| (s - max).exp()).sum();
        for j in 0..m {
            rows[i][j] = (sim[i][j] - max).exp() / z;
        }
    }
    let mut p = rows;
    for j in 0..m {
        let max = (0..n).map(|i| sim[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).map(|i| (sim[i][j] - max).exp()).sum();
        for i in 0..n {
            p[i][j] *= (sim[i][j] - max).exp() / z;
        }
    }
    Ok(p)
}

/// Mutual-argmax object assignment over the double-softmax scores.
pub fn match_objects(
    a: &FrameDetections,
    b: &FrameDetections,
    cfg: &MatchConfig,
) -> Result<Vec<ObjectMatch>, MatchError> {
    let p = assignment_scores(a, b, cfg.temperature)?;
    let (n, m) = (a.detections.len(), b.detections.len());
    if n == 0 || m == 0 {
        return Ok(Vec::new());
    }
    let argmax = |it: &mut dyn Iterator<Item = (usize, f64)>| {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (k, v) in it {
            if v > best.1 {
                best = (k, v);
            }
        }
        best.0
    };
    let col_best: Vec<usize> = (0..m)
        .map(|j| argmax(&mut (0..n).map(|i| (i, p[i][j]))))
        .collect();
    let mut matches = Vec::new();
    for (i, row) in p.iter().enumerate() {
        let j = argmax(&mut row.iter().copied().enumerate());
        if col_best[j] == i && row[j] >= cfg.match_threshold {
            matches.push(ObjectMatch {
                index_a: i,
                index_b: j,
                score: row[j],
            });
        }
    }
    Ok(matches)
}

/// Corner permutation for a box re-parametrized by `quarter_turns · π/2` of
/// yaw (with x/z extents swapped on odd turns).
pub fn symmetry_permutation(quarter_turns: usize) -> [usize; 8] {
    std::array::from_fn(|k| {
        let s = corner_signs(k);
        let (x, z) = match quarter_turns % 4 {
            0 => (s.x, s.z),
            1 => (s.z, -s.x),
            2 => (-s.x, -s.z),
            _ => (-s.z, s.x),
        };
        let bit = |v: f64| if v > 0.0 { 0 } else { 1 };
        bit(x) | (bit(s.y) << 1) | (bit(z) << 2)
    })
}

fn is_square(b: &OrientedBox3, tolerance: f64) -> bool {
    let (w, l) = (b.dims.x, b.dims.z);
    (w - l).abs() / w.max(l) < tolerance
}

#[derive(Debug, Clone)]
struct Candidate {
    perm: [usize; 8],
    pose: YawPose,
    rms: f64,
}

fn corner_candidates(a: &OrientedBox3, b: &OrientedBox3, cfg: &MatchConfig) -> Vec<Candidate> {
    let turns: &[usize] = if is_square(a, cfg.square_tolerance) || is_square(b, cfg.square_tolerance) {
        &[0, 1, 2, 3]
    } else {
        &[0, 2]
    };
    let ca = box_corners(a);
    let cb = box_corners(b);
    turns
        .iter()
        .filter_map(|&q| {
            let perm = symmetry_permutation(q);
            let dst: Vec<Vec3> = perm.iter().map(|&k| cb[k]).collect();
            let pose = kabsch_yaw(&ca, &dst).ok()?;
            let sq: f64 = ca
                .iter()
                .zip(&dst)
                .map(|(p, q)| (pose.apply(p) - q).norm_squared())
                .sum();
            Some(Candidate {
                perm,
                pose,
                rms: (sq / 8.0).sqrt(),
            })
        })
        .collect()
}

/// Relative yaw implied by pairs of matched object centers, scored by how
/// many matches agree with it in both center transfer and box yaw.
fn consensus_yaw(
    a: &FrameDetections,
    b: &FrameDetections,
    matches: &[ObjectMatch],
    candidates: &[Vec<Candidate>],
    cfg: &MatchConfig,
) -> Option<f64> {
    let tol = cfg.symmetry_yaw_tolerance_deg.to_radians();
    let center = |f: &FrameDetections, i: usize| f.detections[i].bbox.center;
    let mut best: Option<(usize, f64, f64)> = None;
    for i in 0..matches.len() {
        for j in (i + 1)..matches.len() {
            let (mi, mj) = (&matches[i], &matches[j]);
            let src = [center(a, mi.index_a), center(a, mj.index_a)];
            let dst = [center(b, mi.index_b), center(b, mj.index_b)];
            let Ok(pose) = kabsch_yaw(&src, &dst) else {
                continue;
            };
            let mut support = 0;
            let mut residual = 0.0;
            for (m, cands) in matches.iter().zip(candidates) {
                let d = (pose.apply(&center(a, m.index_a)) - center(b, m.index_b)).norm();
                let yaw_ok = cands
                    .iter()
                    .any(|c| wrap_angle(c.pose.yaw - pose.yaw).abs() <= tol);
                if d < cfg.symmetry_center_radius && yaw_ok {
                    support += 1;
                    residual += d;
                }
            }
            let better = match best {
                None => true,
                Some((s, r, _)) => support > s || (support == s && residual < r),
            };
            if better {
                best = Some((support, residual, pose.yaw));
            }
        }
    }
    best.filter(|(s, _, _)| *s >= 2).map(|(_, _, yaw)| yaw)
}

/// Corner correspondences restricted to the given object matches.
///
/// Each matched box pair admits several corner correspondences related by
/// the vertical symmetries of a box (half turns always, quarter turns for
/// near-square footprints). All of them align a single pair equally well,
/// so the choice is made against the relative yaw supported by the other
/// matched objects, falling back to the smallest rotation when there is no
/// such support.
pub fn match_corners(
    a: &FrameDetections,
    b: &FrameDetections,
    object_matches: &[ObjectMatch],
    cfg: &MatchConfig,
) -> Vec<CornerMatch> {
    let candidates: Vec<Vec<Candidate>> = object_matches
        .iter()
        .map(|m| corner_candidates(&a.detections[m.index_a].bbox, &b.detections[m.index_b].bbox, cfg))
        .collect();
    let consensus = consensus_yaw(a, b, object_matches, &candidates, cfg);
    let mut out = Vec::with_capacity(8 * object_matches.len());
    for (mi, (m, cands)) in object_matches.iter().zip(&candidates).enumerate() {
        let chosen = match consensus {
            Some(yaw) => cands.iter().min_by(|x, y| {
                let dx = wrap_angle(x.pose.yaw - yaw).abs();
                let dy = wrap_angle(y.pose.yaw - yaw).abs();
                dx.total_cmp(&dy)
            }),
            None => {
                let best = cands.iter().map(|c| c.rms).fold(f64::INFINITY, f64::min);
                cands
                    .iter()
                    .filter(|c| c.rms <= best + 1e-9)
                    .min_by(|x, y| x.pose.yaw.abs().total_cmp(&y.pose.yaw.abs()))
            }
        };
        let Some(c) = chosen else { continue };
        let ca = box_corners(&a.detections[m.index_a].bbox);
        let cb = box_corners(&b.detections[m.index_b].bbox);
        for k in 0..8 {
            let r = (c.pose.apply(&ca[k]) - cb[c.perm[k]]).norm();
            out.push(CornerMatch {
                object_match: mi,
                corner_a: k,
                corner_b: c.perm[k],
                score: (-r / cfg.corner_score_scale).exp(),
            });
        }
    }
    out
}
