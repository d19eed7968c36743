//! Browser demo bindings. Each operation has a plain Rust entry point that
//! returns JSON and a thin `wasm_bindgen` wrapper.

use nalgebra::Vector3;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use voxtrack_core::error::{Error, Result};
use voxtrack_core::geometry::{Pose3D, VoxelGrid};
use voxtrack_core::occlusion::{occlusion_matrix, reliability_weights, ReliabilityParams, WeightMode};
use voxtrack_core::pipeline::{Estimator, Pipeline, PipelineConfig};
use voxtrack_core::pose3d::{decode_poses, extract_crop, CropParams, RootCandidate};
use voxtrack_core::simulator::{place_pose, sample_scene, CameraRing, PoseKind, ScenarioConfig, Scene};
use voxtrack_core::skeleton::PELVIS;
use voxtrack_core::tracker::TrackerParams;
use voxtrack_core::volume::{gt_heatmap3d, sparsify};

const PROBE_BINS: usize = 24;
const PROBE_VOXEL_MM: f64 = 62.5;

/// Decode one Gaussian blob centred at `(x, y, z)` mm inside a 1.5 m cube.
/// Returns the estimate, its error and the masked crop slice through the
/// estimate's z layer.
pub fn soft_argmax_probe(x: f64, y: f64, z: f64, sigma_mm: f64, mask_radius: f64) -> Result<Value> {
    let extent = PROBE_BINS as f64 * PROBE_VOXEL_MM;
    let grid = VoxelGrid::new([0.0; 3], [extent; 3], [PROBE_BINS; 3])?;
    if ![x, y, z].iter().all(|v| (0.0..extent).contains(v)) {
        return Err(Error::config("probe", format!("point must lie in [0, {extent}) mm")));
    }
    if !(sigma_mm > 0.0) {
        return Err(Error::config("sigma_mm", "must be > 0"));
    }
    let params = CropParams {
        size: 16,
        mask_radius_voxels: mask_radius,
        ..CropParams::default()
    };
    params.validate()?;
    let truth = Vector3::new(x, y, z);
    let vol = gt_heatmap3d(&[Pose3D::new(vec![truth])], &grid, 1, sigma_mm);
    let (index, confidence) = vol.argmax(0);
    let sparse = sparsify(&vol, 0.0);
    let det = decode_poses(&sparse, &[RootCandidate { index, confidence }], &params);
    let estimate = det[0].pose.joints[0];
    let crop = extract_crop(&sparse, index, &params);
    let zc = crop.center();
    let slice: Vec<Vec<f32>> = (0..crop.size)
        .map(|cx| (0..crop.size).map(|cy| crop.get(0, [cx, cy, zc])).collect())
        .collect();
    Ok(json!({
        "estimate": [estimate.x, estimate.y, estimate.z],
        "error_mm": (estimate - truth).norm(),
        "peak_voxel": index,
        "slice": slice,
    }))
}

/// Occluded fraction of a standing target behind an occluder in each view
/// of a five-camera ring, and the Re-ID weights of each weighting mode.
pub fn occlusion_probe(occluder: [f64; 2], target: [f64; 2], cutoff: f64) -> Result<Value> {
    let ring = CameraRing::default();
    let cameras = ring.cameras()?;
    let poses = [
        place_pose(PoseKind::Stand, target, 0.0),
        place_pose(PoseKind::Stand, occluder, 0.0),
    ];
    let fractions = occlusion_matrix(&poses, &cameras, 4.0).swap_remove(0);
    let weights = |mode| -> Result<Vec<f64>> {
        let p = ReliabilityParams { mode, cutoff };
        p.validate()?;
        Ok(reliability_weights(&fractions, &p).weights)
    };
    let cams: Vec<[f64; 2]> = cameras.iter().map(|c| [c.center().x, c.center().y]).collect();
    Ok(json!({
        "cameras": cams,
        "fractions": fractions,
        "linear": weights(WeightMode::Linear)?,
        "hard": weights(WeightMode::Hard)?,
        "off": weights(WeightMode::Off)?,
    }))
}

/// A small simulated scene tracked frame by frame on an 80×80×32 grid.
pub struct SceneRunner {
    scene: Scene,
    pipeline: Pipeline,
    frame: u32,
}

impl SceneRunner {
    pub fn new(seed: u64, persons: usize, frames: u32) -> Result<Self> {
        let mut cfg = ScenarioConfig {
            seed,
            n_persons: persons,
            frames,
            ..ScenarioConfig::default()
        };
        cfg.noise.heatmap_sigma_px = 2.0;
        cfg.validate()?;
        let scene = sample_scene(&cfg)?;
        let grid = cfg.grid([80, 80, 32])?;
        let est = Estimator::new(
            &grid,
            scene.cameras.clone(),
            cfg.heatmap_stride,
            PipelineConfig::default(),
        )?;
        let pipeline = Pipeline::new(est, TrackerParams::default())?;
        Ok(SceneRunner {
            scene,
            pipeline,
            frame: 0,
        })
    }

    pub fn done(&self) -> bool {
        self.frame >= self.scene.config.frames
    }

    /// Process the next frame: ground-truth and tracked pelvis positions.
    pub fn step(&mut self) -> Result<Value> {
        if self.done() {
            return Err(Error::contract("scene finished"));
        }
        let gt = self.scene.gt_frame(self.frame);
        let out = self.pipeline.step(&self.scene.render(&gt))?;
        let persons: Vec<Value> = gt
            .persons
            .iter()
            .map(|p| {
                let r = p.pose.joints[PELVIS];
                json!({ "id": p.id, "xy": [r.x, r.y] })
            })
            .collect();
        let tracks: Vec<Value> = out
            .records
            .iter()
            .map(|r| json!({ "id": r.track_id, "xy": [r.joints[PELVIS][0], r.joints[PELVIS][1]] }))
            .collect();
        let frame = self.frame;
        self.frame += 1;
        Ok(json!({ "frame": frame, "persons": persons, "tracks": tracks }))
    }

    pub fn cameras(&self) -> Value {
        let cams: Vec<[f64; 2]> = self
            .scene
            .cameras
            .iter()
            .map(|c| [c.center().x, c.center().y])
            .collect();
        let s = &self.scene.config.space;
        json!({ "cameras": cams, "area": [s.origin[0], s.origin[1], s.origin[0] + s.extent[0], s.origin[1] + s.extent[1]] })
    }
}

fn to_js(r: Result<Value>) -> std::result::Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = softArgmaxProbe)]
pub fn soft_argmax_probe_js(
    x: f64,
    y: f64,
    z: f64,
    sigma_mm: f64,
    mask_radius: f64,
) -> std::result::Result<String, JsValue> {
    to_js(soft_argmax_probe(x, y, z, sigma_mm, mask_radius))
}

#[wasm_bindgen(js_name = occlusionProbe)]
pub fn occlusion_probe_js(ox: f64, oy: f64, tx: f64, ty: f64, cutoff: f64) -> std::result::Result<String, JsValue> {
    to_js(occlusion_probe([ox, oy], [tx, ty], cutoff))
}

#[wasm_bindgen]
pub struct SceneDemo(SceneRunner);

#[wasm_bindgen]
impl SceneDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, persons: usize, frames: u32) -> std::result::Result<SceneDemo, JsValue> {
        SceneRunner::new(seed, persons, frames)
            .map(SceneDemo)
            .map_err(|e| JsValue::from_str(&e.to_string()))
    }

    pub fn done(&self) -> bool {
        self.0.done()
    }

    pub fn step(&mut self) -> std::result::Result<String, JsValue> {
        to_js(self.0.step())
    }

    pub fn layout(&self) -> String {
        self.0.cameras().to_string()
    }
}
