//! End-to-end reconstruction: matching, verification, averaging,
//! registration, tracking, merging and optional box refinement.

pub mod io;
pub mod metrics;
pub mod reloc;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geom::{rectification_from_gravity, GeomError};
use crate::globalize::{build_view_graph, register, rotation_averaging, translation_averaging, AveragingConfig, GlobalizeError, ViewGraph};
use crate::matchcore::{match_corners, match_objects, threshold_detections, FrameDetections, FrameId, MatchConfig, MatchError, ObjectMatch};
use crate::optimize::{map_reprojection_cost, refine_map, BaConfig};
use crate::tracks::{
    build_track, corner_links, establish_point_tracks, establish_tracks, merge_and_suppress, observation_links, score_key, MatchScores, PointTrack, SceneMap,
    TrackConfig,
};
use crate::twoview::{verify_relative_pose, RelativePoseEstimate, VerifyConfig};

/// Environment variable holding the worker count used by the CLI.
pub const WORKERS_ENV: &str = "OBJSFM_WORKERS";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("nothing registered: no frame pair was verified")]
    NothingRegistered,
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("frame id {0} appears more than once")]
    DuplicateFrame(FrameId),
    #[error("frame {0}: {1}")]
    Gravity(FrameId, GeomError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Globalize(#[from] GlobalizeError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub matching: MatchConfig,
    pub verification: VerifyConfig,
    pub averaging: AveragingConfig,
    pub tracks: TrackConfig,
    pub ba: BaConfig,
    /// Keep only this many frame pairs, closest frame ids first.
    pub pair_budget: Option<usize>,
    /// 0 uses the default pool.
    pub workers: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            matching: MatchConfig::default(),
            verification: VerifyConfig::default(),
            averaging: AveragingConfig::default(),
            tracks: TrackConfig::default(),
            ba: BaConfig::default(),
            pair_budget: None,
            workers: 0,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// SHA-256 of the canonical JSON form, ignoring the worker count.
    pub fn hash(&self) -> String {
        let canonical = RunConfig { workers: 0, ..self.clone() };
        sha256_hex(serde_json::to_string(&canonical).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub frames: usize,
    pub pairs_evaluated: usize,
    pub pairs_with_matches: usize,
    pub verified_edges: usize,
    pub edges_after_rotation: usize,
    pub edges_after_translation: usize,
    pub registered_frames: usize,
    pub initial_tracks: usize,
    pub final_tracks: usize,
    pub ba_cost_before: Option<f64>,
    pub ba_cost_after: Option<f64>,
    pub timings: Vec<StageTiming>,
}

#[derive(Debug, Clone)]
pub struct PairResult {
    pub key: (FrameId, FrameId),
    pub matches: Vec<ObjectMatch>,
    pub estimate: Option<RelativePoseEstimate>,
    pub samples_evaluated: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub map: SceneMap,
    /// Thresholded frames; track observations index into these.
    pub frames: BTreeMap<FrameId, FrameDetections>,
    pub graph: ViewGraph,
    pub point_tracks: Vec<Vec<PointTrack>>,
    pub log: RunLog,
}

/// Runs `f` over `items` on `workers` threads (0: default pool), keeping
/// input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync + Send) -> Result<Vec<R>, PipelineError> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if workers == 0 {
            return Ok(items.par_iter().map(f).collect());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| PipelineError::Pool(e.to_string()))?;
        Ok(pool.install(|| items.par_iter().map(f).collect()))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        Ok(items.iter().map(f).collect())
    }
}

/// All frame pairs `(a, b)` with `a < b`, closest ids first when a budget
/// applies.
pub fn frame_pairs(ids: &[FrameId], budget: Option<usize>) -> Vec<(FrameId, FrameId)> {
    let mut pairs = Vec::with_capacity(ids.len() * ids.len().saturating_sub(1) / 2);
    for (k, &a) in ids.iter().enumerate() {
        for &b in &ids[k + 1..] {
            pairs.push((a, b));
        }
    }
    if let Some(cap) = budget {
        if cap < pairs.len() {
            pairs.sort_by_key(|&(a, b)| (b - a, a));
            pairs.truncate(cap);
            pairs.sort_unstable();
        }
    }
    pairs
}

/// Matches and verifies one frame pair.
pub fn process_pair(a: &FrameDetections, b: &FrameDetections, cfg: &RunConfig) -> Result<PairResult, MatchError> {
    let matches = match_objects(a, b, &cfg.matching)?;
    let corners = match_corners(a, b, &matches, &cfg.matching);
    let v = verify_relative_pose(a, b, &matches, &corners, &cfg.verification);
    Ok(PairResult {
        key: (a.frame_id, b.frame_id),
        matches,
        estimate: v.estimate,
        samples_evaluated: v.samples_evaluated,
    })
}

struct Stopwatch {
    start: Instant,
    timings: Vec<StageTiming>,
}

impl Stopwatch {
    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            millis: (now - self.start).as_secs_f64() * 1e3,
        });
        self.start = now;
    }
}

/// Reconstructs poses and the object map from raw frames.
pub fn run_pipeline(frames: &[FrameDetections], cfg: &RunConfig) -> Result<PipelineOutput, PipelineError> {
    if frames.len() < 2 {
        return Err(PipelineError::TooFewFrames(frames.len()));
    }
    let mut clock = Stopwatch {
        start: Instant::now(),
        timings: Vec::new(),
    };
    let mut log = RunLog {
        frames: frames.len(),
        ..Default::default()
    };

    let mut by_id: BTreeMap<FrameId, FrameDetections> = BTreeMap::new();
    for f in frames {
        if by_id.insert(f.frame_id, threshold_detections(f, cfg.matching.tau)).is_some() {
            return Err(PipelineError::DuplicateFrame(f.frame_id));
        }
    }
    let mut rectifications = BTreeMap::new();
    for (&id, f) in &by_id {
        let r = rectification_from_gravity(&f.gravity_dir_raw).map_err(|e| PipelineError::Gravity(id, e))?;
        rectifications.insert(id, r);
    }
    clock.lap("threshold");

    let ids: Vec<FrameId> = by_id.keys().copied().collect();
    let pairs = frame_pairs(&ids, cfg.pair_budget);
    let results = parallel_map(&pairs, cfg.workers, |&(a, b)| process_pair(&by_id[&a], &by_id[&b], cfg))?
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    log.pairs_evaluated = results.len();
    log.pairs_with_matches = results.iter().filter(|r| !r.matches.is_empty()).count();
    let mut scores = MatchScores::new();
    for r in &results {
        for m in &r.matches {
            scores.insert(score_key((r.key.0, m.index_a), (r.key.1, m.index_b)), m.score);
        }
    }
    clock.lap("match_and_verify");

    let graph = build_view_graph(results.into_iter().map(|r| (r.key, r.estimate)).collect())?;
    log.verified_edges = graph.edges.len();
    if graph.edges.is_empty() {
        return Err(PipelineError::NothingRegistered);
    }
    let (yaws, g1) = rotation_averaging(&graph, &cfg.averaging)?;
    log.edges_after_rotation = g1.edges.len();
    let (centers, g2) = translation_averaging(&g1, &yaws, &cfg.averaging)?;
    log.edges_after_translation = g2.edges.len();
    let poses = register(&g2, &yaws, &centers, &rectifications);
    log.registered_frames = poses.len();
    clock.lap("averaging");
    info!(
        "verified {} edges, {} after filtering, {} frames registered",
        log.verified_edges,
        log.edges_after_translation,
        poses.len()
    );

    // the registered component only
    let registered: BTreeSet<FrameId> = poses.registered().collect();
    let mut final_graph = g2;
    final_graph.nodes.retain(|f| registered.contains(f));
    final_graph
        .edges
        .retain(|k, _| registered.contains(&k.0) && registered.contains(&k.1));

    let counts: BTreeMap<FrameId, usize> = registered.iter().map(|&f| (f, by_id[&f].detections.len())).collect();
    let groups = establish_tracks(&observation_links(&final_graph), &counts, cfg.tracks.split_frame_conflicts);
    let tracks: Vec<_> = groups.into_iter().map(|g| build_track(g, &by_id, &poses)).collect();
    log.initial_tracks = tracks.len();
    let tracks = merge_and_suppress(tracks, &scores, &by_id, &poses, &cfg.tracks);
    log.final_tracks = tracks.len();
    clock.lap("tracks");

    let mut map = SceneMap {
        poses,
        tracks,
        config_hash: cfg.hash(),
        dataset_hash: io::dataset_hash(frames),
    };
    let clinks = corner_links(&final_graph);
    let point_tracks: Vec<Vec<PointTrack>> = map
        .tracks
        .iter()
        .map(|t| establish_point_tracks(&t.observations, t.representative_observation, &clinks))
        .collect();
    if cfg.ba.enabled {
        log.ba_cost_before = Some(map_reprojection_cost(&map, &point_tracks, &by_id, &cfg.ba));
        map = refine_map(&map, &point_tracks, &by_id, &cfg.ba);
        log.ba_cost_after = Some(map_reprojection_cost(&map, &point_tracks, &by_id, &cfg.ba));
        clock.lap("bundle_adjustment");
    }
    log.timings = clock.timings;
    Ok(PipelineOutput {
        map,
        frames: by_id,
        graph: final_graph,
        point_tracks,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::{simulate, NoiseModel, SceneSpec, TrajectoryConfig};

    #[test]
    fn pair_enumeration_and_budget() {
        let ids = [0, 1, 2, 5];
        assert_eq!(frame_pairs(&ids, None).len(), 6);
        assert_eq!(frame_pairs(&ids, Some(3)), vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn config_hash_ignores_workers() {
        let a = RunConfig::default();
        let b = RunConfig { workers: 7, ..RunConfig::default() };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn empty_frames_register_nothing() {
        let mut s = simulate(
            &SceneSpec { rng_seed: 2, ..Default::default() },
            &TrajectoryConfig { n_frames: 4, ..Default::default() },
            &NoiseModel::none(),
        )
        .unwrap();
        s.frames.iter_mut().for_each(|f| f.detections.clear());
        assert!(matches!(run_pipeline(&s.frames, &RunConfig::default()), Err(PipelineError::NothingRegistered)));
        assert!(matches!(run_pipeline(&s.frames[..1], &RunConfig::default()), Err(PipelineError::TooFewFrames(1))));
    }

    #[test]
    fn all_pairs_are_evaluated() {
        let s = simulate(
            &SceneSpec { rng_seed: 5, ..Default::default() },
            &TrajectoryConfig { n_frames: 8, ..Default::default() },
            &NoiseModel::none(),
        )
        .unwrap();
        let out = run_pipeline(&s.frames, &RunConfig::default()).unwrap();
        assert_eq!(out.log.pairs_evaluated, 8 * 7 / 2);
        assert_eq!(out.map.poses.len(), 8);
    }
}
