//! Dataset, ground-truth, pose, map, metrics and wireframe files.
//!
//! Datasets are line-delimited JSON, one frame per line, every line carrying
//! a `schema` field. Floats are written in shortest round-trip form, so a
//! save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{box_corners, CameraIntrinsics, OrientedBox3, SE3Pose, Vec3};
use crate::matchcore::{Detection, FrameDetections, FrameId};
use crate::simkit::GtObject;
use crate::tracks::SceneMap;

pub const DATASET_SCHEMA: &str = "objsfm-dataset/1";
pub const MAP_SCHEMA: &str = "objsfm-map/1";
pub const GT_SCHEMA: &str = "objsfm-gt/1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("line {line}: schema {found:?}, expected {expected:?}")]
    SchemaVersionMismatch { line: usize, found: String, expected: &'static str },
}

fn read(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<(), IoError> {
    fs::write(path, contents).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_err(line: usize, e: impl std::fmt::Display) -> IoError {
    IoError::ParseError {
        line,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    /// Row-major 3×3.
    pub rotation: [f64; 9],
    pub center: [f64; 3],
}

impl From<&SE3Pose> for PoseRecord {
    fn from(p: &SE3Pose) -> Self {
        let r = &p.rotation;
        Self {
            rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            center: [p.t.x, p.t.y, p.t.z],
        }
    }
}

impl From<&PoseRecord> for SE3Pose {
    fn from(p: &PoseRecord) -> Self {
        SE3Pose::new(Matrix3::from_row_slice(&p.rotation), Vec3::from(p.center))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct IntrinsicsRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DetectionRecord {
    center: [f64; 3],
    dims: [f64; 3],
    yaw: f64,
    score: f64,
    class_id: i64,
    embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_object_id: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameRecord {
    schema: String,
    frame_id: FrameId,
    image_size: [f64; 2],
    intrinsics: IntrinsicsRecord,
    gravity_dir_raw: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_pose: Option<PoseRecord>,
    detections: Vec<DetectionRecord>,
}

fn frame_to_record(f: &FrameDetections) -> FrameRecord {
    FrameRecord {
        schema: DATASET_SCHEMA.to_string(),
        frame_id: f.frame_id,
        image_size: [f.intrinsics.width, f.intrinsics.height],
        intrinsics: IntrinsicsRecord {
            fx: f.intrinsics.fx,
            fy: f.intrinsics.fy,
            cx: f.intrinsics.cx,
            cy: f.intrinsics.cy,
        },
        gravity_dir_raw: f.gravity_dir_raw.into(),
        gt_pose: f.gt_pose.as_ref().map(PoseRecord::from),
        detections: f
            .detections
            .iter()
            .map(|d| DetectionRecord {
                center: d.bbox.center.into(),
                dims: d.bbox.dims.into(),
                yaw: d.bbox.yaw,
                score: d.score,
                class_id: d.class_id,
                embedding: d.embedding.clone(),
                gt_object_id: d.gt_object_id,
            })
            .collect(),
    }
}

fn check_schema(line: usize, value: &serde_json::Value, expected: &'static str) -> Result<(), IoError> {
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(s) if s == expected => Ok(()),
        Some(s) => Err(IoError::SchemaVersionMismatch {
            line,
            found: s.to_string(),
            expected,
        }),
        None => Err(parse_err(line, "missing schema field")),
    }
}

fn record_to_frame(line: usize, r: FrameRecord) -> Result<FrameDetections, IoError> {
    let intrinsics = CameraIntrinsics::new(r.intrinsics.fx, r.intrinsics.fy, r.intrinsics.cx, r.intrinsics.cy, r.image_size[0], r.image_size[1]);
    if !intrinsics.is_valid() {
        return Err(parse_err(line, "invalid intrinsics"));
    }
    let gravity = Vec3::from(r.gravity_dir_raw);
    if (gravity.norm() - 1.0).abs() > 1e-6 {
        return Err(parse_err(line, "gravity_dir_raw is not unit length"));
    }
    let mut detections = Vec::with_capacity(r.detections.len());
    for (k, d) in r.detections.into_iter().enumerate() {
        let (center, dims) = (Vec3::from(d.center), Vec3::from(d.dims));
        OrientedBox3::try_new(center, dims, d.yaw).map_err(|e| parse_err(line, format!("detection {k}: {e}")))?;
        detections.push(Detection {
            // kept verbatim so that a round trip is exact
            bbox: OrientedBox3 { center, dims, yaw: d.yaw },
            embedding: d.embedding,
            score: d.score,
            class_id: d.class_id,
            source_index: k,
            gt_object_id: d.gt_object_id,
        });
    }
    Ok(FrameDetections {
        frame_id: r.frame_id,
        intrinsics,
        detections,
        gravity_dir_raw: gravity,
        gt_pose: r.gt_pose.as_ref().map(SE3Pose::from),
    })
}

pub fn dataset_to_string(frames: &[FrameDetections]) -> String {
    let mut out = String::new();
    for f in frames {
        out.push_str(&serde_json::to_string(&frame_to_record(f)).expect("frame serializes"));
        out.push('\n');
    }
    out
}

/// Parses a dataset; blank lines are skipped and line numbers are 1-based.
pub fn parse_dataset(text: &str) -> Result<Vec<FrameDetections>, IoError> {
    let mut frames = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| parse_err(line, e))?;
        check_schema(line, &value, DATASET_SCHEMA)?;
        let record: FrameRecord = serde_json::from_value(value).map_err(|e| parse_err(line, e))?;
        frames.push(record_to_frame(line, record)?);
    }
    Ok(frames)
}

pub fn load_dataset(path: &Path) -> Result<Vec<FrameDetections>, IoError> {
    parse_dataset(&read(path)?)
}

pub fn save_dataset(frames: &[FrameDetections], path: &Path) -> Result<(), IoError> {
    write(path, &dataset_to_string(frames))
}

/// Hash of the canonical serialized dataset.
pub fn dataset_hash(frames: &[FrameDetections]) -> String {
    super::sha256_hex(dataset_to_string(frames).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObjectRecord {
    pub object_id: i64,
    pub class_id: i64,
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GtFile {
    schema: String,
    objects: Vec<GtObjectRecord>,
}

pub fn save_gt_objects(objects: &[GtObject], path: &Path) -> Result<(), IoError> {
    let file = GtFile {
        schema: GT_SCHEMA.to_string(),
        objects: objects
            .iter()
            .map(|o| GtObjectRecord {
                object_id: o.object_id,
                class_id: o.class_id,
                center: o.bbox.center.into(),
                dims: o.bbox.dims.into(),
                yaw: o.bbox.yaw,
            })
            .collect(),
    };
    write(path, &(serde_json::to_string_pretty(&file).expect("gt serializes") + "\n"))
}

/// Ground-truth boxes with their class ids.
pub fn load_gt_objects(path: &Path) -> Result<Vec<(OrientedBox3, i64)>, IoError> {
    let value: serde_json::Value = serde_json::from_str(&read(path)?).map_err(|e| parse_err(1, e))?;
    check_schema(1, &value, GT_SCHEMA)?;
    let file: GtFile = serde_json::from_value(value).map_err(|e| parse_err(1, e))?;
    Ok(file
        .objects
        .iter()
        .map(|o| (OrientedBox3 { center: o.center.into(), dims: o.dims.into(), yaw: o.yaw }, o.class_id))
        .collect())
}

/// One line per frame: the id followed by the 3×4 `[R | t]` rows of the
/// world-from-camera pose.
pub fn poses_to_string(poses: &BTreeMap<FrameId, SE3Pose>) -> String {
    let mut out = String::new();
    for (id, p) in poses {
        write!(out, "{id}").unwrap();
        for r in 0..3 {
            for c in 0..3 {
                write!(out, " {}", p.rotation[(r, c)]).unwrap();
            }
            write!(out, " {}", p.t[r]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_poses(text: &str) -> Result<BTreeMap<FrameId, SE3Pose>, IoError> {
    let mut poses = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 13 {
            return Err(parse_err(line, format!("expected 13 fields, found {}", fields.len())));
        }
        let id: FrameId = fields[0].parse().map_err(|e| parse_err(line, e))?;
        let mut v = [0.0; 12];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|e| parse_err(line, e))?;
        }
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        poses.insert(id, SE3Pose::new(rotation, Vec3::new(v[3], v[7], v[11])));
    }
    Ok(poses)
}

pub fn save_poses(poses: &BTreeMap<FrameId, SE3Pose>, path: &Path) -> Result<(), IoError> {
    write(path, &poses_to_string(poses))
}

pub fn load_poses(path: &Path) -> Result<BTreeMap<FrameId, SE3Pose>, IoError> {
    parse_poses(&read(path)?)
}

/// World-from-camera poses of the registered frames.
pub fn map_camera_poses(map: &SceneMap) -> BTreeMap<FrameId, SE3Pose> {
    map.poses
        .registered()
        .map(|f| (f, map.poses.world_from_camera(f).expect("registered")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub score: f64,
    pub label: i64,
    /// (class id, probability) pairs in class order.
    pub class_distribution: Vec<(i64, f64)>,
    /// (frame id, detection index in the input frame).
    pub observations: Vec<(FrameId, usize)>,
}

impl TrackRecord {
    pub fn bbox(&self) -> OrientedBox3 {
        OrientedBox3 {
            center: self.center.into(),
            dims: self.dims.into(),
            yaw: self.yaw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFile {
    pub schema: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub poses: BTreeMap<FrameId, PoseRecord>,
    pub tracks: Vec<TrackRecord>,
}

impl MapFile {
    pub fn camera_poses(&self) -> BTreeMap<FrameId, SE3Pose> {
        self.poses.iter().map(|(&f, p)| (f, SE3Pose::from(p))).collect()
    }
}

/// Map file contents; observation indices are translated back to the input
/// frames through `frames` (the thresholded frames the tracks index into).
pub fn map_to_file(map: &SceneMap, frames: &BTreeMap<FrameId, FrameDetections>) -> MapFile {
    MapFile {
        schema: MAP_SCHEMA.to_string(),
        config_hash: map.config_hash.clone(),
        dataset_hash: map.dataset_hash.clone(),
        poses: map_camera_poses(map).iter().map(|(&f, p)| (f, PoseRecord::from(p))).collect(),
        tracks: map
            .tracks
            .iter()
            .map(|t| TrackRecord {
                center: t.representative_box.center.into(),
                dims: t.representative_box.dims.into(),
                yaw: t.representative_box.yaw,
                score: t.representative_score,
                label: t.label,
                class_distribution: t.class_distribution.iter().map(|(&c, &p)| (c, p)).collect(),
                observations: t
                    .observations
                    .iter()
                    .map(|&(f, d)| (f, frames[&f].detections[d].source_index))
                    .collect(),
            })
            .collect(),
    }
}

pub fn save_map(map: &SceneMap, frames: &BTreeMap<FrameId, FrameDetections>, path: &Path) -> Result<(), IoError> {
    write(path, &(serde_json::to_string_pretty(&map_to_file(map, frames)).expect("map serializes") + "\n"))
}

pub fn load_map(path: &Path) -> Result<MapFile, IoError> {
    let value: serde_json::Value = serde_json::from_str(&read(path)?).map_err(|e| parse_err(1, e))?;
    check_schema(1, &value, MAP_SCHEMA)?;
    serde_json::from_value(value).map_err(|e| parse_err(1, e))
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<(), IoError> {
    write(path, &(serde_json::to_string_pretty(value).expect("value serializes") + "\n"))
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    serde_json::from_str(&read(path)?).map_err(|e| parse_err(1, e))
}

/// Boxes as a Wavefront OBJ wireframe: 8 vertices and 12 edges per box.
pub fn wireframe_obj(boxes: &[OrientedBox3]) -> String {
    const EDGES: [(usize, usize); 12] = [
        (0, 1),
        (2, 3),
        (4, 5),
        (6, 7),
        (0, 2),
        (1, 3),
        (4, 6),
        (5, 7),
        (0, 4),
        (1, 5),
        (2, 6),
        (3, 7),
    ];
    let mut out = String::from("# oriented boxes\n");
    for (k, b) in boxes.iter().enumerate() {
        writeln!(out, "o box{k}").unwrap();
        for c in box_corners(b) {
            writeln!(out, "v {} {} {}", c.x, c.y, c.z).unwrap();
        }
        for (a, c) in EDGES {
            writeln!(out, "l {} {}", 8 * k + a + 1, 8 * k + c + 1).unwrap();
        }
    }
    out
}

pub fn save_wireframe(boxes: &[OrientedBox3], path: &Path) -> Result<(), IoError> {
    write(path, &wireframe_obj(boxes))
}
