//! Person detection and per-person joint decoding on 3D joint heatmaps.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_point, CameraParams, Pose3D, Projection, VoxelGrid};
use crate::volume::{JointHeatmap3D, VolumeView};

/// Root-joint peak extraction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsParams {
    pub min_confidence: f32,
    pub radius_mm: f64,
}

impl Default for NmsParams {
    fn default() -> Self {
        NmsParams {
            min_confidence: 0.3,
            radius_mm: 500.0,
        }
    }
}

impl NmsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_confidence > 0.0 && self.min_confidence < 1.0) {
            return Err(Error::config("nms.min_confidence", "must lie in (0, 1)"));
        }
        if !(self.radius_mm > 0.0 && self.radius_mm.is_finite()) {
            return Err(Error::config("nms.radius_mm", "must be > 0"));
        }
        Ok(())
    }
}

/// Crop and peak-window settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropParams {
    /// Edge length of the cubic crop in voxels.
    pub size: usize,
    /// Voxels farther than this from the selected peak are zeroed.
    pub mask_radius_voxels: f64,
    /// A local maximum is a peak candidate when it reaches this fraction of
    /// the crop channel's maximum.
    pub peak_fraction: f32,
}

impl Default for CropParams {
    fn default() -> Self {
        CropParams {
            size: 32,
            mask_radius_voxels: 4.0,
            peak_fraction: 0.5,
        }
    }
}

impl CropParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::config("crop.size", "must be >= 2"));
        }
        if !(self.mask_radius_voxels > 0.0) {
            return Err(Error::config("crop.mask_radius_voxels", "must be > 0"));
        }
        if !(self.peak_fraction > 0.0 && self.peak_fraction <= 1.0) {
            return Err(Error::config("crop.peak_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootCandidate {
    pub index: [usize; 3],
    pub confidence: f32,
}

const NEIGHBORS: [[isize; 3]; 26] = {
    let mut out = [[0isize; 3]; 26];
    let mut n = 0;
    let mut dx = -1;
    while dx <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dz = -1;
            while dz <= 1 {
                if !(dx == 0 && dy == 0 && dz == 0) {
                    out[n] = [dx, dy, dz];
                    n += 1;
                }
                dz += 1;
            }
            dy += 1;
        }
        dx += 1;
    }
    out
};

fn offset(index: [usize; 3], d: [isize; 3], bins: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let v = index[a] as isize + d[a];
        if v < 0 || v >= bins[a] as isize {
            return None;
        }
        out[a] = v as usize;
    }
    Some(out)
}

fn distance_mm(grid: &VoxelGrid, a: [usize; 3], b: [usize; 3]) -> f64 {
    let s = grid.voxel_size();
    (0..3)
        .map(|k| ((a[k] as f64 - b[k] as f64) * s[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Local maxima of `channel` over their 3×3×3 neighbourhood that reach
/// `min_confidence`, sorted by descending confidence (ties by voxel order).
/// On plateaus the lexicographically smallest voxel is the maximum.
pub fn local_peaks(heatmap: &JointHeatmap3D, channel: usize, min_confidence: f32) -> Vec<RootCandidate> {
    let grid = heatmap.grid();
    let bins = grid.bins;
    let mut out = Vec::new();
    for (i, &key) in heatmap.keys().iter().enumerate() {
        let v = heatmap.entry(i)[channel];
        if !(v >= min_confidence) {
            continue;
        }
        let index = grid.unravel(key);
        let is_peak = NEIGHBORS.iter().all(|&d| match offset(index, d, bins) {
            Some(n) => {
                let nv = heatmap.value(channel, n);
                nv < v || (nv == v && grid.linear_index(n) > key)
            }
            None => true,
        });
        if is_peak {
            out.push(RootCandidate { index, confidence: v });
        }
    }
    out.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.index.cmp(&b.index))
    });
    out
}

/// Root-joint NMS. A peak survives when no higher-ranked peak lies closer
/// than `radius_mm`, whether or not that peak survives itself. Any two
/// returned peaks are therefore at least `radius_mm` apart, and the output
/// only shrinks as either threshold grows.
pub fn detect_roots(heatmap: &JointHeatmap3D, root: usize, params: &NmsParams) -> Vec<RootCandidate> {
    let grid = heatmap.grid();
    let peaks = local_peaks(heatmap, root, params.min_confidence);
    peaks
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            peaks[..*i]
                .iter()
                .all(|q| distance_mm(grid, p.index, q.index) >= params.radius_mm)
        })
        .map(|(_, p)| *p)
        .collect()
}

/// Fixed-size window of the joint heatmaps around a detected root.
#[derive(Debug, Clone, PartialEq)]
pub struct CropVolume {
    pub anchor: [usize; 3],
    pub size: usize,
    pub channels: usize,
    /// `[c][x][y][z]` in crop coordinates.
    pub values: Vec<f32>,
    /// Channels that were all zero (left unnormalized).
    pub degenerate: Vec<bool>,
}

impl CropVolume {
    pub fn get(&self, c: usize, p: [usize; 3]) -> f32 {
        self.values[self.offset(c, p)]
    }

    fn offset(&self, c: usize, p: [usize; 3]) -> usize {
        ((c * self.size + p[0]) * self.size + p[1]) * self.size + p[2]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.size.pow(3);
        &self.values[c * n..(c + 1) * n]
    }

    /// Crop coordinate of the anchor voxel.
    pub fn center(&self) -> usize {
        self.size / 2
    }

    /// Grid voxel (possibly outside the grid) of crop coordinate `p`.
    pub fn to_grid(&self, p: [f64; 3]) -> [f64; 3] {
        let c = self.center() as f64;
        [
            self.anchor[0] as f64 + p[0] - c,
            self.anchor[1] as f64 + p[1] - c,
            self.anchor[2] as f64 + p[2] - c,
        ]
    }
}

/// Raw window around `anchor` (voxels `anchor - size/2 .. anchor + size/2`),
/// zero outside the grid.
pub fn crop_window(heatmap: &JointHeatmap3D, anchor: [usize; 3], size: usize) -> CropVolume {
    let grid = heatmap.grid();
    let bins = grid.bins;
    let channels = heatmap.channels();
    let half = (size / 2) as isize;
    let lo: Vec<isize> = (0..3).map(|a| anchor[a] as isize - half).collect();
    let mut crop = CropVolume {
        anchor,
        size,
        channels,
        values: vec![0.0; channels * size.pow(3)],
        degenerate: vec![false; channels],
    };
    let z_lo = lo[2].max(0) as usize;
    let z_hi = (lo[2] + size as isize - 1).min(bins[2] as isize - 1);
    if z_hi < z_lo as isize {
        return crop;
    }
    let z_hi = z_hi as usize;
    for cx in 0..size {
        let gx = lo[0] + cx as isize;
        if gx < 0 || gx >= bins[0] as isize {
            continue;
        }
        for cy in 0..size {
            let gy = lo[1] + cy as isize;
            if gy < 0 || gy >= bins[1] as isize {
                continue;
            }
            let k0 = grid.linear_index([gx as usize, gy as usize, z_lo]);
            let k1 = grid.linear_index([gx as usize, gy as usize, z_hi]);
            for i in heatmap.key_range(k0, k1) {
                let gz = grid.unravel(heatmap.keys()[i])[2];
                let cz = (gz as isize - lo[2]) as usize;
                let e = heatmap.entry(i);
                for (c, &v) in e.iter().enumerate() {
                    let o = crop.offset(c, [cx, cy, cz]);
                    crop.values[o] = v;
                }
            }
        }
    }
    crop
}

/// Peak of channel `c` used for masking: among crop-local maxima reaching
/// `fraction` of the channel maximum, the one nearest the crop centre.
fn select_peak(crop: &CropVolume, c: usize, fraction: f32) -> Option<[usize; 3]> {
    let s = crop.size;
    let ch = crop.channel(c);
    let max = ch.iter().copied().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return None;
    }
    let floor = fraction * max;
    let center = crop.center() as f64;
    let at = |p: [usize; 3]| ch[(p[0] * s + p[1]) * s + p[2]];
    let mut best: Option<([usize; 3], f64, f32)> = None;
    for x in 0..s {
        for y in 0..s {
            for z in 0..s {
                let p = [x, y, z];
                let v = at(p);
                if v < floor || v <= 0.0 {
                    continue;
                }
                let is_peak = NEIGHBORS.iter().all(|&d| match offset(p, d, [s, s, s]) {
                    Some(n) => {
                        let nv = at(n);
                        nv < v || (nv == v && n > p)
                    }
                    None => true,
                });
                if !is_peak {
                    continue;
                }
                let d2 = (x as f64 - center).powi(2) + (y as f64 - center).powi(2) + (z as f64 - center).powi(2);
                let better = match best {
                    None => true,
                    Some((_, bd, bv)) => d2 < bd || (d2 == bd && v > bv),
                };
                if better {
                    best = Some((p, d2, v));
                }
            }
        }
    }
    best.map(|b| b.0)
}

/// Crop around `anchor`, keep only a window of radius
/// `params.mask_radius_voxels` around each channel's selected peak, and
/// normalize every channel to unit sum.
pub fn extract_crop(heatmap: &JointHeatmap3D, anchor: [usize; 3], params: &CropParams) -> CropVolume {
    let mut crop = crop_window(heatmap, anchor, params.size);
    let s = crop.size;
    let r2 = params.mask_radius_voxels * params.mask_radius_voxels;
    for c in 0..crop.channels {
        let Some(peak) = select_peak(&crop, c, params.peak_fraction) else {
            crop.degenerate[c] = true;
            continue;
        };
        let n = s.pow(3);
        let ch = &mut crop.values[c * n..(c + 1) * n];
        let mut sum = 0.0f64;
        for x in 0..s {
            for y in 0..s {
                for z in 0..s {
                    let i = (x * s + y) * s + z;
                    let d2 = (x as f64 - peak[0] as f64).powi(2)
                        + (y as f64 - peak[1] as f64).powi(2)
                        + (z as f64 - peak[2] as f64).powi(2);
                    if d2 > r2 {
                        ch[i] = 0.0;
                    } else {
                        sum += ch[i] as f64;
                    }
                }
            }
        }
        for v in ch.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
    crop
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftArgmax {
    pub position: Vector3<f64>,
    pub degenerate: bool,
}

/// Centre of mass of channel `k`, in world millimetres. A degenerate
/// channel yields the anchor's voxel centre.
pub fn soft_argmax(crop: &CropVolume, k: usize, grid: &VoxelGrid) -> SoftArgmax {
    let s = crop.size;
    let ch = crop.channel(k);
    let mut acc = [0.0f64; 3];
    let mut total = 0.0f64;
    for x in 0..s {
        for y in 0..s {
            for z in 0..s {
                let w = ch[(x * s + y) * s + z] as f64;
                if w == 0.0 {
                    continue;
                }
                total += w;
                acc[0] += w * x as f64;
                acc[1] += w * y as f64;
                acc[2] += w * z as f64;
            }
        }
    }
    if crop.degenerate[k] || total <= 0.0 {
        let a = crop.anchor;
        return SoftArgmax {
            position: grid.lattice_point([a[0] as f64, a[1] as f64, a[2] as f64]),
            degenerate: true,
        };
    }
    let mean = [acc[0] / total, acc[1] / total, acc[2] / total];
    SoftArgmax {
        position: grid.lattice_point(crop.to_grid(mean)),
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection3D {
    pub pose: Pose3D,
    /// Root heatmap value at the detected peak.
    pub confidence: f32,
    pub anchor: [usize; 3],
    /// Joints whose crop channel was empty.
    pub degenerate: Vec<bool>,
    /// Pelvis projection per view (`None` when behind the camera), filled
    /// by [`Detection3D::project_pelvis`].
    pub pelvis_projections: Vec<Option<Projection>>,
}

impl Detection3D {
    pub fn project_pelvis(&mut self, cameras: &[CameraParams], root: usize) {
        let p = self.pose.joints[root];
        self.pelvis_projections = cameras.iter().map(|c| project_point(c, &p).ok()).collect();
    }
}

/// One pose per root candidate, decoded from its own crop.
pub fn decode_poses(heatmap: &JointHeatmap3D, roots: &[RootCandidate], params: &CropParams) -> Vec<Detection3D> {
    let grid = heatmap.grid();
    crate::par::map_collect(roots, |r| {
        let crop = extract_crop(heatmap, r.index, params);
        let mut joints = Vec::with_capacity(crop.channels);
        let mut degenerate = Vec::with_capacity(crop.channels);
        for k in 0..crop.channels {
            let sa = soft_argmax(&crop, k, grid);
            joints.push(sa.position);
            degenerate.push(sa.degenerate);
        }
        Detection3D {
            pose: Pose3D::new(joints),
            confidence: r.confidence,
            anchor: r.index,
            degenerate,
            pelvis_projections: Vec::new(),
        }
    })
}

/// Sum of componentwise absolute joint errors.
pub fn loss_arn(pred: &Pose3D, target: &Pose3D) -> Result<f64> {
    if pred.num_joints() != target.num_joints() {
        return Err(Error::contract(format!(
            "poses have {} and {} joints",
            pred.num_joints(),
            target.num_joints()
        )));
    }
    Ok(pred
        .joints
        .iter()
        .zip(&target.joints)
        .map(|(a, b)| (a - b).abs().sum())
        .sum())
}
