//! Per-frame estimation and tracking: heatmaps in, track records out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_projection_table, CameraParams, ProjectionTable, VoxelGrid};
use crate::heatmap2d::{Heatmap2D, ReidMap2D};
use crate::metrics::{EvalFrame, GtPose, PredPose};
use crate::occlusion::{fuse_reid, occlusion_matrix, reliability_weights, ReliabilityParams};
use crate::pose3d::{decode_poses, detect_roots, CropParams, Detection3D, NmsParams};
use crate::simulator::{FrameObservations, GtFrame, Scene};
use crate::skeleton::PELVIS;
use crate::tracker::{TrackInput, TrackRecord, Tracker, TrackerParams};
use crate::volume::{build_sparse_feature_volume, smooth_volume, SmoothParams, SPARSIFY_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub sparsify_threshold: f32,
    pub smooth: SmoothParams,
    pub nms: NmsParams,
    pub crop: CropParams,
    pub reliability: ReliabilityParams,
    /// Raster pitch for the occlusion fractions of detected poses, image
    /// pixels.
    pub occlusion_resolution_px: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sparsify_threshold: SPARSIFY_THRESHOLD,
            smooth: SmoothParams::default(),
            nms: NmsParams::default(),
            crop: CropParams::default(),
            reliability: ReliabilityParams::default(),
            occlusion_resolution_px: 4.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sparsify_threshold > 0.0 && self.sparsify_threshold <= 1.0) {
            return Err(Error::config("pipeline.sparsify_threshold", "must lie in (0, 1]"));
        }
        if !(self.occlusion_resolution_px > 0.0) {
            return Err(Error::config("pipeline.occlusion_resolution_px", "must be > 0"));
        }
        self.smooth.validate()?;
        self.nms.validate()?;
        self.crop.validate()?;
        self.reliability.validate()
    }
}

/// Wall-clock milliseconds spent in each stage of one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimes {
    /// Feature volume construction and sparsification.
    pub volume_ms: f64,
    /// Smoothing into joint heatmaps.
    pub jen_ms: f64,
    /// Root detection and per-person decoding.
    pub arn_ms: f64,
    /// Occlusion reasoning and Re-ID fusion.
    pub reid_ms: f64,
    pub tracking_ms: f64,
}

impl StageTimes {
    pub fn total_ms(&self) -> f64 {
        self.volume_ms + self.jen_ms + self.arn_ms + self.reid_ms + self.tracking_ms
    }

    pub fn mean(times: &[StageTimes]) -> StageTimes {
        let n = times.len().max(1) as f64;
        let mut m = StageTimes::default();
        for t in times {
            m.volume_ms += t.volume_ms / n;
            m.jen_ms += t.jen_ms / n;
            m.arn_ms += t.arn_ms / n;
            m.reid_ms += t.reid_ms / n;
            m.tracking_ms += t.tracking_ms / n;
        }
        m
    }
}

#[cfg(not(target_arch = "wasm32"))]
use std::time::Instant;

/// Zero-duration clock for wasm32-unknown-unknown.
#[cfg(target_arch = "wasm32")]
#[derive(Clone, Copy)]
struct Instant;

#[cfg(target_arch = "wasm32")]
impl Instant {
    fn now() -> Self {
        Instant
    }

    fn elapsed(&self) -> std::time::Duration {
        std::time::Duration::ZERO
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Heatmaps to 3D poses for a fixed camera rig.
#[derive(Debug, Clone)]
pub struct Estimator {
    cameras: Vec<CameraParams>,
    table: ProjectionTable,
    config: PipelineConfig,
}

impl Estimator {
    pub fn new(grid: &VoxelGrid, cameras: Vec<CameraParams>, stride: f64, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        grid.validate()?;
        let table = build_projection_table(grid, &cameras, stride)?;
        Ok(Estimator { cameras, table, config })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.table.grid
    }

    pub fn cameras(&self) -> &[CameraParams] {
        &self.cameras
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Detected poses with their pelvis projections filled in.
    pub fn detect(&self, heatmaps: &[Heatmap2D], times: &mut StageTimes) -> Result<Vec<Detection3D>> {
        let t = Instant::now();
        let sparse = build_sparse_feature_volume(heatmaps, &self.table, self.config.sparsify_threshold)?;
        times.volume_ms = ms(t);
        let t = Instant::now();
        let joints = smooth_volume(&sparse, &self.config.smooth);
        times.jen_ms = ms(t);
        let t = Instant::now();
        let roots = detect_roots(&joints, PELVIS, &self.config.nms);
        let mut dets = decode_poses(&joints, &roots, &self.config.crop);
        for d in &mut dets {
            d.project_pelvis(&self.cameras, PELVIS);
        }
        times.arn_ms = ms(t);
        Ok(dets)
    }

    /// Per-view Re-ID samples at each detection's pelvis, with occlusion
    /// fractions computed among the detections themselves.
    pub fn reid_samples(&self, dets: &[Detection3D], reid: &[ReidMap2D]) -> Result<Vec<ReidSample>> {
        if reid.len() != self.cameras.len() {
            return Err(Error::contract(format!(
                "{} Re-ID maps for {} cameras",
                reid.len(),
                self.cameras.len()
            )));
        }
        let poses: Vec<_> = dets.iter().map(|d| d.pose.clone()).collect();
        let occ = occlusion_matrix(&poses, &self.cameras, self.config.occlusion_resolution_px);
        let stride = self.table.stride;
        Ok(dets
            .iter()
            .zip(occ)
            .map(|(d, fractions)| ReidSample {
                features: d
                    .pelvis_projections
                    .iter()
                    .zip(reid)
                    .map(|(p, map)| p.as_ref().and_then(|p| map.sample_unit(p.u / stride, p.v / stride)))
                    .collect(),
                fractions,
            })
            .collect())
    }

    pub fn track_inputs(&self, dets: &[Detection3D], reid: &[ReidMap2D]) -> Result<Vec<TrackInput>> {
        let dim = reid.first().map_or(0, |r| r.dim());
        let samples = self.reid_samples(dets, reid)?;
        Ok(fuse_inputs(dets, &samples, &self.config.reliability, dim))
    }
}

/// One detection's per-view appearance evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidSample {
    pub features: Vec<Option<Vec<f32>>>,
    pub fractions: Vec<f64>,
}

/// Fuse each detection's samples with occlusion-derived weights.
pub fn fuse_inputs(
    dets: &[Detection3D],
    samples: &[ReidSample],
    reliability: &ReliabilityParams,
    dim: usize,
) -> Vec<TrackInput> {
    dets.iter()
        .zip(samples)
        .map(|(d, s)| {
            let w = reliability_weights(&s.fractions, reliability);
            TrackInput {
                pose: d.pose.clone(),
                confidence: d.confidence as f64,
                reid: fuse_reid(&s.features, &w, dim),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub records: Vec<TrackRecord>,
    pub detections: Vec<Detection3D>,
    pub times: StageTimes,
}

/// Estimator plus tracker.
#[derive(Debug, Clone)]
pub struct Pipeline {
    estimator: Estimator,
    tracker: Tracker,
}

impl Pipeline {
    pub fn new(estimator: Estimator, tracker: TrackerParams) -> Result<Self> {
        tracker.validate()?;
        Ok(Pipeline {
            estimator,
            tracker: Tracker::new(tracker),
        })
    }

    pub fn estimator(&self) -> &Estimator {
        &self.estimator
    }

    pub fn step(&mut self, obs: &FrameObservations) -> Result<FrameOutput> {
        let views = self.estimator.cameras.len();
        if obs.heatmaps.len() != views || obs.reid.len() != views {
            return Err(Error::Data {
                frame: obs.frame,
                message: format!(
                    "expected {views} views, got {} heatmaps and {} Re-ID maps",
                    obs.heatmaps.len(),
                    obs.reid.len()
                ),
            });
        }
        let data_err = |e: Error| match e {
            Error::Contract(m) => Error::Data {
                frame: obs.frame,
                message: m,
            },
            e => e,
        };
        let mut times = StageTimes::default();
        let detections = self.estimator.detect(&obs.heatmaps, &mut times).map_err(data_err)?;
        let t = Instant::now();
        let inputs = self.estimator.track_inputs(&detections, &obs.reid).map_err(data_err)?;
        times.reid_ms = ms(t);
        let t = Instant::now();
        let records = self.tracker.step(obs.frame, &inputs)?;
        times.tracking_ms = ms(t);
        Ok(FrameOutput {
            records,
            detections,
            times,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub records: Vec<TrackRecord>,
    pub detections: Vec<Vec<Detection3D>>,
    pub times: Vec<StageTimes>,
}

/// Render and process every frame of a simulated scene.
pub fn run_scene(scene: &Scene, bins: [usize; 3], config: PipelineConfig, tracker: TrackerParams) -> Result<RunOutput> {
    let grid = scene.config.grid(bins)?;
    let est = Estimator::new(&grid, scene.cameras.clone(), scene.config.heatmap_stride, config)?;
    let mut pipe = Pipeline::new(est, tracker)?;
    let mut out = RunOutput::default();
    for f in 0..scene.config.frames {
        let obs = scene.render(&scene.gt_frame(f));
        let fo = pipe.step(&obs)?;
        out.records.extend(fo.records);
        out.detections.push(fo.detections);
        out.times.push(fo.times);
    }
    Ok(out)
}

/// Pair ground truth with track records frame by frame. Records for frames
/// without ground truth are an error.
pub fn eval_frames(gt: &[GtFrame], records: &[TrackRecord]) -> Result<Vec<EvalFrame>> {
    let mut frames: Vec<EvalFrame> = gt
        .iter()
        .map(|g| EvalFrame {
            frame: g.frame,
            gt: g
                .persons
                .iter()
                .map(|p| GtPose {
                    id: p.id,
                    pose: p.pose.clone(),
                })
                .collect(),
            pred: Vec::new(),
        })
        .collect();
    for r in records {
        let slot = frames
            .iter_mut()
            .find(|f| f.frame == r.frame)
            .ok_or_else(|| Error::Data {
                frame: r.frame,
                message: "track record for a frame without ground truth".into(),
            })?;
        slot.pred.push(PredPose {
            id: r.track_id,
            pose: crate::geometry::Pose3D::from_arrays(&r.joints),
            confidence: r.confidence,
        });
    }
    Ok(frames)
}

/// Mean per-joint error of each ground-truth person against its nearest
/// detection, averaged over persons and frames. `None` when nothing was
/// detected.
pub fn nearest_mpjpe(gt: &[GtFrame], detections: &[Vec<Detection3D>]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (g, d) in gt.iter().zip(detections) {
        for p in &g.persons {
            let best = d.iter().map(|x| x.pose.mpjpe(&p.pose)).fold(f64::INFINITY, f64::min);
            if best.is_finite() {
                sum += best;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}
