//! Person-person occlusion per view, reliability weights and multi-view
//! Re-ID fusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraParams, Pose3D};
use crate::heatmap2d::normalize_in_place;

/// A person's image-plane box at its mean joint depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PersonDepthBox {
    pub view: usize,
    /// Mean camera-frame depth of the joints (mm).
    pub depth: f64,
    /// `(u_min, v_min, u_max, v_max)` in image pixels.
    pub bbox: [f64; 4],
    pub visible: bool,
}

impl PersonDepthBox {
    pub fn width(&self) -> f64 {
        self.bbox[2] - self.bbox[0]
    }

    pub fn height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.bbox[0] && u <= self.bbox[2] && v >= self.bbox[1] && v <= self.bbox[3]
    }
}

/// One box per pose. A person whose mean depth is not positive is marked
/// invisible; otherwise the box encloses the projections of the joints in
/// front of the camera.
pub fn person_depth_boxes(poses: &[Pose3D], camera: &CameraParams, view: usize) -> Vec<PersonDepthBox> {
    poses
        .iter()
        .map(|pose| {
            let cam: Vec<_> = pose.joints.iter().map(|j| camera.to_camera(j)).collect();
            let depth = cam.iter().map(|p| p.z).sum::<f64>() / cam.len().max(1) as f64;
            let mut bbox = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
            for p in cam.iter().filter(|p| p.z > 0.0) {
                let u = camera.fx * p.x / p.z + camera.cx;
                let v = camera.fy * p.y / p.z + camera.cy;
                bbox = [bbox[0].min(u), bbox[1].min(v), bbox[2].max(u), bbox[3].max(v)];
            }
            let visible = depth > 0.0 && bbox[0].is_finite();
            if !visible {
                bbox = [0.0; 4];
            }
            PersonDepthBox {
                view,
                depth,
                bbox,
                visible,
            }
        })
        .collect()
}

/// Share of `target`'s box covered by a strictly nearer box among `others`,
/// estimated on a grid of sample points with pitch close to `resolution`
/// pixels. Zero-area and invisible boxes report 0.
pub fn occluded_fraction(target: &PersonDepthBox, others: &[PersonDepthBox], resolution: f64) -> f64 {
    assert!(resolution > 0.0, "raster resolution must be positive");
    if !target.visible || !(target.width() > 0.0 && target.height() > 0.0) {
        return 0.0;
    }
    let nearer: Vec<&PersonDepthBox> = others.iter().filter(|o| o.visible && o.depth < target.depth).collect();
    if nearer.is_empty() {
        return 0.0;
    }
    let nx = (target.width() / resolution).ceil().max(1.0) as usize;
    let ny = (target.height() / resolution).ceil().max(1.0) as usize;
    let (sx, sy) = (target.width() / nx as f64, target.height() / ny as f64);
    let mut covered = 0usize;
    for iy in 0..ny {
        let v = target.bbox[1] + (iy as f64 + 0.5) * sy;
        for ix in 0..nx {
            let u = target.bbox[0] + (ix as f64 + 0.5) * sx;
            if nearer.iter().any(|o| o.contains(u, v)) {
                covered += 1;
            }
        }
    }
    covered as f64 / (nx * ny) as f64
}

/// Exact covered-area fraction by coordinate compression.
pub fn occluded_fraction_exact(target: &PersonDepthBox, others: &[PersonDepthBox]) -> f64 {
    if !target.visible || !(target.area() > 0.0) {
        return 0.0;
    }
    let t = target.bbox;
    let clipped: Vec<[f64; 4]> = others
        .iter()
        .filter(|o| o.visible && o.depth < target.depth)
        .map(|o| {
            [
                o.bbox[0].max(t[0]),
                o.bbox[1].max(t[1]),
                o.bbox[2].min(t[2]),
                o.bbox[3].min(t[3]),
            ]
        })
        .filter(|b| b[0] < b[2] && b[1] < b[3])
        .collect();
    let mut xs: Vec<f64> = clipped.iter().flat_map(|b| [b[0], b[2]]).collect();
    let mut ys: Vec<f64> = clipped.iter().flat_map(|b| [b[1], b[3]]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut area = 0.0;
    for i in 0..xs.len().saturating_sub(1) {
        let cx = 0.5 * (xs[i] + xs[i + 1]);
        for j in 0..ys.len().saturating_sub(1) {
            let cy = 0.5 * (ys[j] + ys[j + 1]);
            if clipped
                .iter()
                .any(|b| cx >= b[0] && cx <= b[2] && cy >= b[1] && cy <= b[3])
            {
                area += (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j]);
            }
        }
    }
    area / target.area()
}

/// Occluded fraction of every person in every view, `[person][view]`.
/// Persons invisible in a view report 1.
pub fn occlusion_matrix(poses: &[Pose3D], cameras: &[CameraParams], resolution: f64) -> Vec<Vec<f64>> {
    let boxes: Vec<Vec<PersonDepthBox>> = cameras
        .iter()
        .enumerate()
        .map(|(v, cam)| person_depth_boxes(poses, cam, v))
        .collect();
    (0..poses.len())
        .map(|p| {
            (0..cameras.len())
                .map(|v| {
                    let b = &boxes[v];
                    if !b[p].visible {
                        return 1.0;
                    }
                    let others: Vec<PersonDepthBox> =
                        b.iter().enumerate().filter(|(q, _)| *q != p).map(|(_, o)| *o).collect();
                    occluded_fraction(&b[p], &others, resolution)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `1 - fraction` up to the cutoff, 0 beyond.
    Linear,
    /// 1 up to the cutoff, 0 beyond.
    Hard,
    /// Every view weighted 1 (no occlusion masking).
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReliabilityParams {
    pub mode: WeightMode,
    /// Views occluded by more than this fraction get weight 0.
    pub cutoff: f64,
}

impl Default for ReliabilityParams {
    fn default() -> Self {
        ReliabilityParams {
            mode: WeightMode::Linear,
            cutoff: 0.7,
        }
    }
}

impl ReliabilityParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cutoff) {
            return Err(Error::config("reliability.cutoff", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn raw_weight(&self, fraction: f64) -> f64 {
        match self.mode {
            WeightMode::Off => 1.0,
            _ if fraction > self.cutoff => 0.0,
            WeightMode::Linear => 1.0 - fraction,
            WeightMode::Hard => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityWeights {
    pub weights: Vec<f64>,
    /// False when every view was rejected.
    pub valid: bool,
}

/// Per-view weights for one person, normalized to sum 1.
pub fn reliability_weights(fractions: &[f64], params: &ReliabilityParams) -> ReliabilityWeights {
    let raw: Vec<f64> = fractions.iter().map(|&f| params.raw_weight(f)).collect();
    let sum: f64 = raw.iter().sum();
    if sum > 0.0 {
        ReliabilityWeights {
            weights: raw.iter().map(|w| w / sum).collect(),
            valid: true,
        }
    } else {
        ReliabilityWeights {
            weights: vec![0.0; raw.len()],
            valid: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedReid {
    pub embedding: Vec<f32>,
    pub valid: bool,
}

/// Weighted sum of the per-view features, renormalized to unit length.
/// Missing features (`None`) contribute nothing.
pub fn fuse_reid(features: &[Option<Vec<f32>>], weights: &ReliabilityWeights, dim: usize) -> FusedReid {
    let mut acc = vec![0.0f64; dim];
    if weights.valid {
        for (f, &w) in features.iter().zip(&weights.weights) {
            if let (Some(f), true) = (f, w > 0.0) {
                for (a, &x) in acc.iter_mut().zip(f) {
                    *a += w * x as f64;
                }
            }
        }
    }
    let mut embedding: Vec<f32> = acc.iter().map(|&a| a as f32).collect();
    let valid = normalize_in_place(&mut embedding);
    if !valid {
        embedding.fill(0.0);
    }
    FusedReid { embedding, valid }
}
