use objsfm::pipeline::io::{dataset_to_string, map_camera_poses, parse_dataset};
use objsfm::pipeline::{run_pipeline, RunConfig};
use objsfm::simkit::{simulate, NoiseModel, SceneSpec, TrajectoryConfig};

fn desk(seed: u64, n_frames: usize) -> objsfm::simkit::SyntheticScene {
    let spec = SceneSpec { rng_seed: seed, ..Default::default() };
    let traj = TrajectoryConfig { n_frames, seed: seed + 50, ..Default::default() };
    simulate(&spec, &traj, &NoiseModel::desk()).unwrap()
}

#[test]
fn bundle_adjustment_never_increases_cost_on_the_same_registration() {
    for seed in 0..3 {
        let scene = desk(seed, 30);
        let plain = run_pipeline(&scene.frames, &RunConfig::default()).unwrap();
        let mut cfg = RunConfig::default();
        cfg.ba.enabled = true;
        let refined = run_pipeline(&scene.frames, &cfg).unwrap();
        assert_eq!(map_camera_poses(&plain.map), map_camera_poses(&refined.map));
        let (before, after) = (refined.log.ba_cost_before.unwrap(), refined.log.ba_cost_after.unwrap());
        assert!(after <= before, "seed {seed}: {before} -> {after}");
        assert_eq!(plain.map.tracks.len(), refined.map.tracks.len());
    }
}

#[test]
fn dataset_text_round_trip_reproduces_the_run() {
    let scene = desk(4, 20);
    let reloaded = parse_dataset(&dataset_to_string(&scene.frames)).unwrap();
    assert_eq!(reloaded, scene.frames);
    let a = run_pipeline(&scene.frames, &RunConfig::default()).unwrap();
    let b = run_pipeline(&reloaded, &RunConfig::default()).unwrap();
    assert_eq!(a.map, b.map);
}

#[test]
fn pair_budget_limits_evaluations() {
    let scene = desk(5, 20);
    let cfg = RunConfig { pair_budget: Some(60), ..Default::default() };
    let out = run_pipeline(&scene.frames, &cfg).unwrap();
    assert_eq!(out.log.pairs_evaluated, 60);
    let full = run_pipeline(&scene.frames, &RunConfig::default()).unwrap();
    assert_eq!(full.log.pairs_evaluated, 20 * 19 / 2);
}
