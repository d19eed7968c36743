use std::path::PathBuf;
use std::time::Instant;

use voxtrack_core::bench::scene_occupancy;
use voxtrack_core::config::RunConfig;
use voxtrack_core::pipeline::{Estimator, PipelineConfig};
use voxtrack_core::pose3d::{decode_poses, detect_roots};
use voxtrack_core::simulator::{sample_scene, ScenarioConfig};
use voxtrack_core::skeleton::PELVIS;
use voxtrack_core::volume::{build_sparse_feature_volume, smooth_volume, SPARSIFY_THRESHOLD};

fn config_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../config")
        .join(name)
}

#[test]
fn shipped_configs_load() {
    assert_eq!(
        RunConfig::load(&config_file("default.json")).unwrap(),
        RunConfig::default()
    );
    let minimal = RunConfig::load(&config_file("minimal.json")).unwrap();
    assert_eq!(minimal.grid_bins, [80, 80, 32]);
    let ablation = RunConfig::load(&config_file("ablation.json")).unwrap();
    assert_eq!(ablation.scenario.scripted.len(), 3);
    assert_eq!(
        ablation.scenario.cameras.azimuths_deg.len(),
        ablation.scenario.cameras.count
    );
    assert!(ablation.tracker.max_appearance_distance.is_some());
    for c in [minimal, ablation] {
        c.validate().unwrap();
    }
}

#[test]
fn feature_volume_stays_sparse_up_to_six_persons() {
    for n in [1, 2, 4, 6] {
        let s = ScenarioConfig {
            seed: 3,
            n_persons: n,
            frames: 1,
            ..ScenarioConfig::default()
        };
        let occ = scene_occupancy(&s, [160, 160, 64], SPARSIFY_THRESHOLD).unwrap();
        assert!(occ > 0.0 && occ < 0.05, "{n} persons: {occ}");
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

#[test]
fn decoding_time_grows_linearly_with_persons() {
    let s = ScenarioConfig {
        seed: 5,
        n_persons: 6,
        frames: 1,
        ..ScenarioConfig::default()
    };
    let scene = sample_scene(&s).unwrap();
    let grid = s.grid([160, 160, 64]).unwrap();
    let cfg = PipelineConfig::default();
    let est = Estimator::new(&grid, scene.cameras.clone(), s.heatmap_stride, cfg).unwrap();
    let obs = scene.render(&scene.gt_frame(0));
    let table = voxtrack_core::geometry::build_projection_table(est.grid(), est.cameras(), s.heatmap_stride).unwrap();
    let joints = smooth_volume(
        &build_sparse_feature_volume(&obs.heatmaps, &table, cfg.sparsify_threshold).unwrap(),
        &cfg.smooth,
    );
    let roots = detect_roots(&joints, PELVIS, &cfg.nms);
    assert_eq!(roots.len(), 6);

    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let time = |k: usize| {
        median(
            (0..7)
                .map(|_| {
                    let t = Instant::now();
                    let d = pool.install(|| decode_poses(&joints, &roots[..k], &cfg.crop));
                    assert_eq!(d.len(), k);
                    t.elapsed().as_secs_f64()
                })
                .collect(),
        )
    };
    let t1 = time(1);
    let t6 = time(6);
    let ratio = t6 / t1;
    assert!((3.0..12.0).contains(&ratio), "t1 {t1} t6 {t6}");
}
