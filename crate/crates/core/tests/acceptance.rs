//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero when any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxtrack_core::bench::{conv_discrepancy, random_kernel, random_sparse_volume, run_bench, BenchConfig};
use voxtrack_core::config::RunConfig;
use voxtrack_core::geometry::{Pose3D, VoxelGrid};
use voxtrack_core::metrics::{evaluate, EvalFrame, GtPose, MetricParams, MetricsReport, PredPose};
use voxtrack_core::occlusion::{ReliabilityParams, WeightMode};
use voxtrack_core::pipeline::{
    eval_frames, fuse_inputs, nearest_mpjpe, run_scene, Estimator, PipelineConfig, ReidSample, StageTimes,
};
use voxtrack_core::pose3d::{decode_poses, CropParams, Detection3D, RootCandidate};
use voxtrack_core::simulator::{sample_scene, ScenarioConfig};
use voxtrack_core::skeleton::{LIMBS, NUM_JOINTS};
use voxtrack_core::tracker::{CueMode, Tracker, TrackerParams};
use voxtrack_core::volume::{gt_heatmap3d, sparsify};

type Check = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn metrics(
    cfg: &RunConfig,
    gt: &[voxtrack_core::simulator::GtFrame],
    records: &[voxtrack_core::tracker::TrackRecord],
) -> MetricsReport {
    let frames = eval_frames(gt, records).unwrap();
    evaluate(&frames, &LIMBS, NUM_JOINTS, &cfg.metrics, &cfg.ap_thresholds_mm).unwrap()
}

/// Two persons, noiseless heatmaps, 160×160×64 grid, 50 frames.
fn estimation_accuracy() -> Outcome {
    let s = ScenarioConfig {
        seed: 1,
        n_persons: 2,
        frames: 50,
        ..ScenarioConfig::default()
    };
    let t = Instant::now();
    let scene = sample_scene(&s).unwrap();
    let out = run_scene(
        &scene,
        [160, 160, 64],
        PipelineConfig::default(),
        TrackerParams::default(),
    )
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    let mpjpe = nearest_mpjpe(&scene.gt_frames(), &out.detections).unwrap_or(f64::INFINITY);
    outcome(
        mpjpe < 31.25 && secs < 60.0,
        format!("MPJPE {mpjpe:.2} mm (< 31.25), 50 frames in {secs:.1} s (< 60)"),
    )
}

/// Sub-voxel recovery of single Gaussian blobs through crop and soft-argmax.
fn soft_argmax_precision() -> Outcome {
    let grid = VoxelGrid::new([0.0; 3], [1500.0; 3], [24; 3]).unwrap();
    let size = grid.voxel_size()[0];
    let params = CropParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = Vector3::from_fn(|_, _| rng.random_range(6.0 * size..18.0 * size));
        let pose = Pose3D::new(vec![p]);
        let vol = gt_heatmap3d(std::slice::from_ref(&pose), &grid, 1, size);
        let (index, confidence) = vol.argmax(0);
        let det = decode_poses(&sparsify(&vol, 0.0), &[RootCandidate { index, confidence }], &params);
        worst = worst.max((det[0].pose.joints[0] - p).norm());
    }
    outcome(
        worst < 5.0,
        format!("worst error over 1000 placements {worst:.3} mm (< 5)"),
    )
}

/// Sparse against dense convolution, then the timing ordering.
fn sparse_dense() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let bins = [
            rng.random_range(4..=32),
            rng.random_range(4..=32),
            rng.random_range(4..=32),
        ];
        let grid = VoxelGrid::new([0.0; 3], [bins[0] as f64, bins[1] as f64, bins[2] as f64], bins).unwrap();
        let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let vol = random_sparse_volume(&grid, ci, rng.random_range(0.01..0.5), &mut rng);
        let kernel = random_kernel(ci, co, 3, &mut rng);
        worst = worst.max(conv_discrepancy(&vol, &kernel).unwrap());
    }
    let big = run_bench(&BenchConfig {
        grids: vec![[160, 160, 160]],
        occupancies: vec![0.005, 0.01],
        channels: 2,
        warmup: 0,
        repeats: 1,
        ..BenchConfig::default()
    })
    .unwrap();
    let small = run_bench(&BenchConfig {
        grids: vec![[16, 16, 16]],
        occupancies: vec![0.5],
        channels: 2,
        warmup: 0,
        repeats: 3,
        ..BenchConfig::default()
    })
    .unwrap();
    let faster = big.iter().all(|r| r.sparse_ms < r.dense_ms);
    let rows: Vec<String> = big
        .iter()
        .chain(&small)
        .map(|r| format!("{:?}@{}% {:.1}x", r.grid, r.occupancy * 100.0, r.speedup()))
        .collect();
    outcome(
        worst < 1e-5 && faster,
        format!("max diff {worst:e} over 100 volumes; speedups {}", rows.join(", ")),
    )
}

/// Pose-only, appearance-only and occlusion-masked appearance tracking on
/// the scripted queue scenario. Detections are computed once and shared.
fn occlusion_ablation() -> Outcome {
    let cfg = RunConfig::load(&workspace().join("config/ablation.json")).unwrap();
    let s = &cfg.scenario;
    let scene = sample_scene(s).unwrap();
    let grid = s.grid(cfg.grid_bins).unwrap();
    let est = Estimator::new(&grid, scene.cameras.clone(), s.heatmap_stride, cfg.pipeline).unwrap();
    let gt = scene.gt_frames();
    let mut cached: Vec<(Vec<Detection3D>, Vec<ReidSample>)> = Vec::new();
    for g in &gt {
        let obs = scene.render(g);
        let dets = est.detect(&obs.heatmaps, &mut StageTimes::default()).unwrap();
        let samples = est.reid_samples(&dets, &obs.reid).unwrap();
        cached.push((dets, samples));
    }
    let run = |cues: CueMode, mode: WeightMode| {
        let rel = ReliabilityParams {
            mode,
            ..cfg.pipeline.reliability
        };
        let mut tracker = Tracker::new(TrackerParams { cues, ..cfg.tracker });
        let mut records = Vec::new();
        for (f, (dets, samples)) in cached.iter().enumerate() {
            let inputs = fuse_inputs(dets, samples, &rel, s.reid.dim);
            records.extend(tracker.step(f as u32, &inputs).unwrap());
        }
        metrics(&cfg, &gt, &records)
    };
    let poses = run(CueMode::LocationOnly, WeightMode::Off);
    let reid = run(CueMode::AppearanceOnly, WeightMode::Off);
    let masked = run(CueMode::AppearanceOnly, WeightMode::Hard);
    let pass = poses.id_switches > reid.id_switches
        && reid.id_switches > masked.id_switches
        && masked.id_switches == 0
        && masked.idf1 > poses.idf1
        && masked.idf1 > reid.idf1;
    outcome(
        pass,
        format!(
            "IDSW poses {} > Re-ID {} > Re-ID+mask {}; IDF1 {:.3} / {:.3} / {:.3}",
            poses.id_switches, reid.id_switches, masked.id_switches, poses.idf1, reid.idf1, masked.idf1
        ),
    )
}

/// Same scene watched by 3, 4 and 5 cameras.
fn view_count() -> Outcome {
    let cfg = RunConfig::default();
    let mut rows = Vec::new();
    for views in [3, 4, 5] {
        let mut s = ScenarioConfig {
            seed: 4,
            n_persons: 2,
            frames: 20,
            ..ScenarioConfig::default()
        };
        s.cameras.count = views;
        let scene = sample_scene(&s).unwrap();
        let out = run_scene(&scene, cfg.grid_bins, cfg.pipeline, cfg.tracker).unwrap();
        let gt = scene.gt_frames();
        let mpjpe = nearest_mpjpe(&gt, &out.detections).unwrap_or(f64::INFINITY);
        rows.push((views, mpjpe, metrics(&cfg, &gt, &out.records).id_switches));
    }
    let pass = rows[0].1 > rows[1].1 && rows[1].1 > rows[2].1 && rows.iter().all(|r| r.2 == 0);
    let text: Vec<String> = rows
        .iter()
        .map(|(v, m, sw)| format!("{v} views {m:.2} mm / {sw} IDSW"))
        .collect();
    outcome(pass, text.join(", "))
}

/// Maximum-cardinality, minimum-cost gated matching by enumeration.
fn brute_match(cost: &[Vec<Option<f64>>]) -> Vec<(usize, usize)> {
    fn go(
        r: usize,
        cost: &[Vec<Option<f64>>],
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        best: &mut (usize, f64, Vec<(usize, usize)>),
    ) {
        if r == cost.len() {
            let c: f64 = cur.iter().map(|&(a, b)| cost[a][b].unwrap()).sum();
            if cur.len() > best.0 || (cur.len() == best.0 && c < best.1) {
                *best = (cur.len(), c, cur.clone());
            }
            return;
        }
        go(r + 1, cost, used, cur, best);
        for c in 0..used.len() {
            if !used[c] && cost[r][c].is_some() {
                used[c] = true;
                cur.push((r, c));
                go(r + 1, cost, used, cur, best);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let cols = cost.first().map_or(0, |r| r.len());
    let mut best = (0, f64::INFINITY, Vec::new());
    go(0, cost, &mut vec![false; cols], &mut Vec::new(), &mut best);
    best.2
}

fn brute_identity(gt: &[u64], pred: &[u64], ov: &BTreeMap<(u64, u64), u64>) -> u64 {
    if gt.is_empty() {
        return 0;
    }
    let skip = brute_identity(&gt[1..], pred, ov);
    let take = (0..pred.len())
        .map(|j| {
            let rest: Vec<u64> = pred
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != j)
                .map(|(_, &p)| p)
                .collect();
            ov.get(&(gt[0], pred[j])).copied().unwrap_or(0) + brute_identity(&gt[1..], &rest, ov)
        })
        .max()
        .unwrap_or(0);
    skip.max(take)
}

/// Reference values computed by enumeration: (MOTA, IDF1, IDSW, AP, MPJPE, PCP).
fn brute_metrics(
    frames: &[EvalFrame],
    joints: usize,
    limbs: &[(usize, usize)],
    p: &MetricParams,
    ks: &[f64],
) -> (f64, f64, u64, Vec<f64>, Option<f64>, f64) {
    let (mut mota, mut idf1, mut switches) = (0.0, 0.0, 0u64);
    for j in 0..joints {
        let d = |a: &Pose3D, b: &Pose3D| (a.joints[j] - b.joints[j]).norm();
        let (mut errs, mut gt_n, mut pred_n) = (0u64, 0u64, 0u64);
        let mut last = BTreeMap::new();
        let mut ov = BTreeMap::new();
        let (mut gids, mut pids) = (BTreeSet::new(), BTreeSet::new());
        for f in frames {
            let cost: Vec<Vec<Option<f64>>> =
                f.gt.iter()
                    .map(|g| {
                        f.pred
                            .iter()
                            .map(|q| Some(d(&g.pose, &q.pose)).filter(|&x| x <= p.mot_threshold_mm))
                            .collect()
                    })
                    .collect();
            let m = brute_match(&cost);
            gt_n += f.gt.len() as u64;
            pred_n += f.pred.len() as u64;
            errs += (f.gt.len() + f.pred.len() - 2 * m.len()) as u64;
            for (a, b) in m {
                if let Some(prev) = last.insert(f.gt[a].id, f.pred[b].id) {
                    if prev != f.pred[b].id {
                        errs += 1;
                        switches += 1;
                    }
                }
            }
            gids.extend(f.gt.iter().map(|g| g.id));
            pids.extend(f.pred.iter().map(|q| q.id));
            for g in &f.gt {
                for q in &f.pred {
                    if d(&g.pose, &q.pose) <= p.mot_threshold_mm {
                        *ov.entry((g.id, q.id)).or_insert(0) += 1;
                    }
                }
            }
        }
        mota += 1.0 - errs as f64 / gt_n.max(1) as f64;
        let g: Vec<u64> = gids.into_iter().collect();
        let q: Vec<u64> = pids.into_iter().collect();
        idf1 += if gt_n + pred_n == 0 {
            1.0
        } else {
            2.0 * brute_identity(&g, &q, &ov) as f64 / (gt_n + pred_n) as f64
        };
    }

    let total_gt: usize = frames.iter().map(|f| f.gt.len()).sum();
    let mut ranked: Vec<(f64, usize, &PredPose)> = frames
        .iter()
        .enumerate()
        .flat_map(|(i, f)| f.pred.iter().map(move |q| (q.confidence, i, q)))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let kmax = ks.iter().copied().fold(f64::MIN, f64::max);
    let mut mpjpe = None;
    let aps = ks
        .iter()
        .map(|&k| {
            let mut claimed = BTreeSet::new();
            let (mut tp, mut errors, mut points) = (0usize, Vec::new(), Vec::new());
            for (rank, &(_, fi, q)) in ranked.iter().enumerate() {
                let nearest = frames[fi]
                    .gt
                    .iter()
                    .enumerate()
                    .map(|(gi, g)| (gi, q.pose.mpjpe(&g.pose)))
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((gi, e)) = nearest {
                    if e < k && claimed.insert((fi, gi)) {
                        tp += 1;
                        errors.push(e);
                    }
                }
                points.push((tp, tp as f64 / (rank + 1) as f64));
            }
            if k == kmax && !errors.is_empty() {
                mpjpe = Some(errors.iter().sum::<f64>() / errors.len() as f64);
            }
            if total_gt == 0 {
                return 0.0;
            }
            // each new true positive adds 1/total_gt recall at the best
            // precision reached from that rank on
            (0..points.len())
                .filter(|&i| points[i].0 > if i == 0 { 0 } else { points[i - 1].0 })
                .map(|i| points[i..].iter().map(|x| x.1).fold(0.0, f64::max) / total_gt as f64)
                .sum()
        })
        .collect();

    let mut per_actor: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for f in frames {
        for g in &f.gt {
            let e = per_actor.entry(g.id).or_default();
            e.1 += limbs.len();
            let Some(q) = f
                .pred
                .iter()
                .min_by(|a, b| g.pose.mpjpe(&a.pose).total_cmp(&g.pose.mpjpe(&b.pose)))
            else {
                continue;
            };
            e.0 += limbs
                .iter()
                .filter(|&&(a, b)| {
                    let len = (g.pose.joints[a] - g.pose.joints[b]).norm();
                    [a, b]
                        .iter()
                        .all(|&x| (g.pose.joints[x] - q.pose.joints[x]).norm() <= p.pcp_fraction * len)
                })
                .count();
        }
    }
    let pcp = if per_actor.is_empty() {
        0.0
    } else {
        per_actor.values().map(|&(ok, n)| ok as f64 / n as f64).sum::<f64>() / per_actor.len() as f64
    };
    (mota / joints as f64, idf1 / joints as f64, switches, aps, mpjpe, pcp)
}

fn metric_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = MetricParams::default();
    let ks = [25.0, 50.0, 100.0, 150.0];
    let limbs = [(0, 1), (1, 2)];
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let mut mismatches = 0;
    let trials = 300;
    for _ in 0..trials {
        let frames: Vec<EvalFrame> = (0..rng.random_range(1..6))
            .map(|fi| {
                let pose = |rng: &mut ChaCha8Rng| {
                    Pose3D::new(
                        (0..3)
                            .map(|_| Vector3::from_fn(|_, _| rng.random_range(0.0..300.0)))
                            .collect(),
                    )
                };
                let gt = (0..rng.random_range(0..4u64))
                    .map(|id| GtPose {
                        id,
                        pose: pose(&mut rng),
                    })
                    .collect();
                let mut ids: Vec<u64> = (0..5).collect();
                let pred = (0..rng.random_range(0..4usize))
                    .map(|_| {
                        let id = ids.remove(rng.random_range(0..ids.len()));
                        PredPose {
                            id,
                            pose: pose(&mut rng),
                            confidence: rng.random_range(0.0..1.0),
                        }
                    })
                    .collect();
                EvalFrame { frame: fi, gt, pred }
            })
            .collect();
        let r = evaluate(&frames, &limbs, 3, &params, &ks).unwrap();
        let (mota, idf1, sw, aps, mpjpe, pcp) = brute_metrics(&frames, 3, &limbs, &params, &ks);
        let same = close(r.mota, mota)
            && close(r.idf1, idf1)
            && r.id_switches == sw
            && r.ap.iter().zip(&aps).all(|(a, b)| close(a.1, *b))
            && match (r.mpjpe_mm, mpjpe) {
                (Some(a), Some(b)) => close(a, b),
                (a, b) => a == b,
            }
            && close(r.pcp3d.average, pcp);
        mismatches += usize::from(!same);
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches against enumeration over {trials} random sequences"),
    )
}

fn determinism() -> Outcome {
    let s = ScenarioConfig {
        seed: 8,
        n_persons: 3,
        frames: 8,
        ..ScenarioConfig::default()
    };
    let cfg = RunConfig::default();
    let once = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let scene = sample_scene(&s).unwrap();
            let out = run_scene(&scene, cfg.grid_bins, cfg.pipeline, cfg.tracker).unwrap();
            let report = metrics(&cfg, &scene.gt_frames(), &out.records);
            (
                serde_json::to_string(&out.records).unwrap(),
                format!("{:?}", out.detections),
                serde_json::to_string(&report).unwrap(),
            )
        })
    };
    let base = once(1);
    let same = [1, 2, 8].iter().all(|&t| once(t) == base);
    outcome(
        same,
        "records, detections and metrics identical across 1, 2 and 8 threads".into(),
    )
}

/// Property tests declared in the workspace sources.
fn count_properties(dir: &Path) -> usize {
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            if p.file_name().is_some_and(|f| f != "target") {
                n += count_properties(&p);
            }
        } else if p.extension().is_some_and(|x| x == "rs") {
            let text = std::fs::read_to_string(&p).unwrap();
            let mut depth = 0i32;
            for line in text.lines() {
                if depth == 0 {
                    if line.trim() == "proptest! {" {
                        depth = 1;
                    }
                    continue;
                }
                depth += line.matches('{').count() as i32 - line.matches('}').count() as i32;
                n += usize::from(line.trim() == "#[test]");
            }
        }
    }
    n
}

fn main() {
    let start = Instant::now();
    let checks: [Check; 7] = [
        ("estimation accuracy and speed", estimation_accuracy),
        ("soft-argmax precision", soft_argmax_precision),
        ("sparse convolution", sparse_dense),
        ("occlusion ablation", occlusion_ablation),
        ("view count", view_count),
        ("metric equivalence", metric_equivalence),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    let mut report = |i: usize, name: &str, o: Outcome| {
        failed += usize::from(!o.pass);
        println!(
            "criterion {i} {}: {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    for (i, (name, check)) in checks.iter().enumerate() {
        report(i + 1, name, check());
    }
    let props = count_properties(&workspace().join("crates"));
    let secs = start.elapsed().as_secs_f64();
    report(
        8,
        "test suite",
        outcome(
            props >= 30 && secs < 300.0,
            format!("{props} property tests (>= 30); acceptance run {secs:.1} s (< 300)"),
        ),
    );
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
