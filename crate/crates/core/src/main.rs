use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use objsfm::geom::SE3Pose;
use objsfm::matchcore::{FrameDetections, FrameId};
use objsfm::pipeline::io::{self, MapFile};
use objsfm::pipeline::metrics::{evaluate_poses, report, GtBox, MetricsReport, Prediction};
use objsfm::pipeline::reloc::{relocalize, MapIndex};
use objsfm::pipeline::{run_pipeline, PipelineError, RunConfig, WORKERS_ENV};
use objsfm::simkit::{simulate, NoiseModel, SceneSpec, TrajectoryConfig};

#[derive(Parser)]
#[command(name = "objsfm", version, about = "Object-centric structure from motion over oriented 3D box detections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Sim(SimArgs),
    /// Estimate camera poses and an object map from a dataset.
    Run(RunArgs),
    /// Score a map against ground-truth boxes and poses.
    EvalMap(EvalMapArgs),
    /// Score estimated camera poses against ground truth.
    EvalPoses(EvalPosesArgs),
    /// Localize query frames against a built map.
    Reloc(RelocArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum NoisePreset {
    None,
    Desk,
}

#[derive(Args)]
struct SimArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long, value_enum, default_value = "desk")]
    noise: NoisePreset,
    #[arg(long)]
    seed: Option<u64>,
    /// Move every k-th frame to queries.jsonl instead of the dataset.
    #[arg(long)]
    holdout_every: Option<usize>,
    /// JSON file with `scene`, `trajectory` and `noise` sections; wins over flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct SimConfig {
    scene: SceneSpec,
    trajectory: TrajectoryConfig,
    noise: NoiseModel,
    holdout_every: Option<usize>,
}

#[derive(Args, Default)]
struct ConfigFlags {
    /// JSON run configuration; its fields win over flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    match_threshold: Option<f64>,
    #[arg(long)]
    box_error_threshold: Option<f64>,
    #[arg(long)]
    min_inlier_ratio: Option<f64>,
    #[arg(long)]
    corner_radius: Option<f64>,
    #[arg(long)]
    rotation_rounds: Option<usize>,
    #[arg(long)]
    rotation_threshold_deg: Option<f64>,
    #[arg(long)]
    translation_rounds: Option<usize>,
    #[arg(long)]
    translation_threshold_m: Option<f64>,
    #[arg(long)]
    robust: Option<bool>,
    #[arg(long)]
    merge: Option<bool>,
    #[arg(long)]
    merge_gate_giou: Option<f64>,
    #[arg(long)]
    merge_affinity: Option<f64>,
    #[arg(long)]
    suppress_iou: Option<f64>,
    #[arg(long)]
    ba: Option<bool>,
    #[arg(long)]
    ba_iterations: Option<usize>,
    #[arg(long)]
    huber: Option<bool>,
    #[arg(long)]
    pair_budget: Option<usize>,
    /// Worker threads; defaults to the OBJSFM_WORKERS environment variable.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct EvalMapArgs {
    #[arg(long)]
    map: PathBuf,
    /// Ground-truth objects written by `sim`.
    #[arg(long)]
    gt: PathBuf,
    /// Ground-truth camera poses used to align the map.
    #[arg(long)]
    gt_poses: PathBuf,
    /// Average AP/AR over classes instead of pooling them.
    #[arg(long)]
    class_aware: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalPosesArgs {
    #[arg(long)]
    poses: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Frame count for the registration rate; defaults to the ground-truth count.
    #[arg(long)]
    total_frames: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RelocArgs {
    /// Dataset the map was built from.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Output poses file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: ConfigFlags,
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sim(a) => sim(a),
        Command::Run(a) => run(a),
        Command::EvalMap(a) => eval_map(a),
        Command::EvalPoses(a) => eval_poses(a),
        Command::Reloc(a) => reloc(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e.downcast_ref::<PipelineError>(), Some(PipelineError::NothingRegistered)) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn merge_json(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge_json(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Serializes `base`, overlays the JSON file when given, and parses back.
fn overlay<T: Serialize + for<'de> Deserialize<'de>>(base: &T, file: Option<&Path>) -> Result<T, Box<dyn std::error::Error>> {
    let mut value = serde_json::to_value(base)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        merge_json(&mut value, serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?);
    }
    Ok(serde_json::from_value(value)?)
}

fn resolve_run_config(f: &ConfigFlags) -> Result<RunConfig, Box<dyn std::error::Error>> {
    let mut c = RunConfig::default();
    macro_rules! set {
        ($flag:expr => $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(f.tau => c.matching.tau);
    set!(f.temperature => c.matching.temperature);
    set!(f.match_threshold => c.matching.match_threshold);
    set!(f.box_error_threshold => c.verification.box_error_threshold);
    set!(f.min_inlier_ratio => c.verification.min_inlier_ratio);
    set!(f.corner_radius => c.verification.corner_radius);
    set!(f.rotation_rounds => c.averaging.rotation_rounds);
    set!(f.rotation_threshold_deg => c.averaging.rotation_threshold_deg);
    set!(f.translation_rounds => c.averaging.translation_rounds);
    set!(f.translation_threshold_m => c.averaging.translation_threshold_m);
    set!(f.robust => c.averaging.robust);
    set!(f.merge => c.tracks.merge_enabled);
    set!(f.merge_gate_giou => c.tracks.merge_gate_giou);
    set!(f.merge_affinity => c.tracks.merge_affinity);
    set!(f.suppress_iou => c.tracks.suppress_iou);
    set!(f.ba => c.ba.enabled);
    set!(f.ba_iterations => c.ba.max_iterations);
    set!(f.huber => c.ba.huber);
    set!(f.seed => c.seed);
    if f.pair_budget.is_some() {
        c.pair_budget = f.pair_budget;
    }
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        c.workers = v.trim().parse().map_err(|_| format!("{WORKERS_ENV}: not a worker count: {v:?}"))?;
    }
    set!(f.workers => c.workers);
    overlay(&c, f.config.as_deref())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult {
    io::save_json(value, path)?;
    Ok(())
}

fn sim(a: SimArgs) -> CliResult {
    let mut c = SimConfig {
        noise: match a.noise {
            NoisePreset::None => NoiseModel::none(),
            NoisePreset::Desk => NoiseModel::desk(),
        },
        holdout_every: a.holdout_every,
        ..Default::default()
    };
    if let Some(n) = a.frames {
        c.trajectory.n_frames = n;
    }
    if let Some(n) = a.objects {
        c.scene.n_objects = n;
    }
    if let Some(s) = a.seed {
        c.scene.rng_seed = s;
        c.trajectory.seed = s;
    }
    let c: SimConfig = overlay(&c, a.config.as_deref())?;
    if c.holdout_every == Some(0) || c.holdout_every == Some(1) {
        return Err("holdout_every must be at least 2".into());
    }
    let scene = simulate(&c.scene, &c.trajectory, &c.noise)?;
    let (queries, frames): (Vec<_>, Vec<_>) = scene
        .frames
        .iter()
        .cloned()
        .enumerate()
        .partition(|(i, _)| c.holdout_every.is_some_and(|k| i % k == k - 1));
    let frames: Vec<_> = frames.into_iter().map(|(_, f)| f).collect();
    let queries: Vec<_> = queries.into_iter().map(|(_, f)| f).collect();
    std::fs::create_dir_all(&a.out)?;
    io::save_dataset(&frames, &a.out.join("dataset.jsonl"))?;
    if !queries.is_empty() {
        io::save_dataset(&queries, &a.out.join("queries.jsonl"))?;
    }
    io::save_gt_objects(&scene.observed_objects(), &a.out.join("gt_objects.json"))?;
    io::save_poses(&gt_poses(&frames), &a.out.join("gt_poses.txt"))?;
    if !queries.is_empty() {
        io::save_poses(&gt_poses(&queries), &a.out.join("queries_gt_poses.txt"))?;
    }
    write_json(&c, &a.out.join("sim_config.json"))?;
    println!("{} frames, {} queries, {} objects -> {}", frames.len(), queries.len(), scene.objects.len(), a.out.display());
    Ok(())
}

fn gt_poses(frames: &[FrameDetections]) -> BTreeMap<FrameId, SE3Pose> {
    frames.iter().map(|f| (f.frame_id, f.gt_pose.expect("simulated frames carry ground truth"))).collect()
}

fn run(a: RunArgs) -> CliResult {
    let cfg = resolve_run_config(&a.flags)?;
    let frames = io::load_dataset(&a.dataset)?;
    std::fs::create_dir_all(&a.out)?;
    write_json(&cfg, &a.out.join("config.json"))?;
    let out = run_pipeline(&frames, &cfg)?;
    io::save_poses(&io::map_camera_poses(&out.map), &a.out.join("poses.txt"))?;
    io::save_map(&out.map, &out.frames, &a.out.join("map.json"))?;
    let boxes: Vec<_> = out.map.tracks.iter().map(|t| t.representative_box).collect();
    io::save_wireframe(&boxes, &a.out.join("map.obj"))?;
    write_json(&out.log, &a.out.join("run_log.json"))?;
    println!(
        "registered {}/{} frames, {} tracks, {} edges -> {}",
        out.log.registered_frames,
        frames.len(),
        out.map.tracks.len(),
        out.log.edges_after_translation,
        a.out.display()
    );
    Ok(())
}

fn print_report(r: &MetricsReport, out: Option<&Path>) -> CliResult {
    println!(
        "registration {:.4}  ATE median {:.3} cm  RMSE {:.3} cm  ARE median {:.4} deg  RMSE {:.4} deg",
        r.registration_rate, r.ate_median_cm, r.ate_rmse_cm, r.are_median_deg, r.are_rmse_deg
    );
    println!("AP15 {:.4}  AR15 {:.4}  AP25 {:.4}  AR25 {:.4}", r.ap15, r.ar15, r.ap25, r.ar25);
    if let Some(p) = out {
        write_json(r, p)?;
    }
    Ok(())
}

fn eval_map(a: EvalMapArgs) -> CliResult {
    let map: MapFile = io::load_map(&a.map)?;
    let gt_poses = io::load_poses(&a.gt_poses)?;
    let preds: Vec<Prediction> = map
        .tracks
        .iter()
        .map(|t| Prediction {
            bbox: t.bbox(),
            score: t.score,
            label: t.label,
        })
        .collect();
    let gts: Vec<GtBox> = io::load_gt_objects(&a.gt)?.into_iter().map(|(bbox, class_id)| GtBox { bbox, class_id }).collect();
    let r = report(&map.camera_poses(), &gt_poses, &preds, &gts, gt_poses.len(), a.class_aware)?;
    print_report(&r, a.out.as_deref())
}

fn eval_poses(a: EvalPosesArgs) -> CliResult {
    let est = io::load_poses(&a.poses)?;
    let gt = io::load_poses(&a.gt)?;
    let r = evaluate_poses(&est, &gt, a.total_frames.unwrap_or(gt.len()))?;
    println!(
        "registration {:.4}  ATE median {:.3} cm  RMSE {:.3} cm  ARE median {:.4} deg  RMSE {:.4} deg  ({} frames)",
        r.registration_rate,
        100.0 * r.ate_median_m,
        100.0 * r.ate_rmse_m,
        r.are_median_deg,
        r.are_rmse_deg,
        r.evaluated_frames
    );
    if let Some(p) = a.out.as_deref() {
        write_json(&r, p)?;
    }
    Ok(())
}

fn reloc(a: RelocArgs) -> CliResult {
    let cfg = resolve_run_config(&a.flags)?;
    let frames = io::load_dataset(&a.dataset)?;
    let map = io::load_map(&a.map)?;
    let queries = io::load_dataset(&a.queries)?;
    let index = MapIndex::from_camera_poses(&frames, &map.camera_poses(), cfg.matching.tau)?;
    let mut poses = BTreeMap::new();
    for q in &queries {
        if let Some(r) = relocalize(&index, q, &cfg)? {
            poses.insert(q.frame_id, r.pose);
        }
    }
    io::save_poses(&poses, &a.out)?;
    println!("relocalized {}/{} queries -> {}", poses.len(), queries.len(), a.out.display());
    Ok(())
}
