//! Pinhole cameras, the discretized capture volume, and voxel-to-pixel
//! projection tables.
//!
//! World coordinates are millimetres. Cameras follow the computer-vision
//! convention: `p_c = R·p + t`, x right, y down, z along the optical axis.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{NUM_JOINTS, PELVIS};

const ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraParams {
    pub id: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation (mm).
    pub translation: Vector3<f64>,
    pub image_width: u32,
    pub image_height: u32,
}

impl CameraParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        image_width: u32,
        image_height: u32,
    ) -> Result<Self> {
        let cam = CameraParams {
            id,
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            image_width,
            image_height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with world +z as up.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        id: u32,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        fx: f64,
        fy: f64,
        image_width: u32,
        image_height: u32,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::config("camera.look_at", "eye and target coincide"))?;
        let up = Vector3::z();
        let right = forward
            .cross(&up)
            .try_normalize(1e-9)
            .ok_or_else(|| Error::config("camera.look_at", "optical axis is vertical"))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        CameraParams::new(
            id,
            fx,
            fy,
            image_width as f64 / 2.0,
            image_height as f64 / 2.0,
            rotation,
            translation,
            image_width,
            image_height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("camera[{}].{f}", self.id);
        if !(self.fx > 0.0 && self.fx.is_finite()) {
            return Err(Error::config(field("fx"), "focal length must be positive"));
        }
        if !(self.fy > 0.0 && self.fy.is_finite()) {
            return Err(Error::config(field("fy"), "focal length must be positive"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::config(field("cx"), "principal point must be finite"));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::config(field("width"), "image dimensions must be positive"));
        }
        let r = &self.rotation;
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        if !(ortho <= ROTATION_TOL) || !((r.determinant() - 1.0).abs() <= ROTATION_TOL) {
            return Err(Error::config(
                field("R"),
                "rotation must be orthonormal with determinant +1",
            ));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::config(field("t"), "translation must be finite"));
        }
        Ok(())
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Inverse of [`project_point`]: the world point on the pixel ray at `depth`.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let pc = Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        self.rotation.transpose() * (pc - self.translation)
    }

    /// Same camera translated rigidly by `offset` in world space.
    pub fn translated(&self, offset: &Vector3<f64>) -> CameraParams {
        let mut cam = self.clone();
        cam.translation = self.translation - self.rotation * offset;
        cam
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// The point lies on or behind the camera plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehindCamera {
    pub depth: f64,
}

pub fn project_point(camera: &CameraParams, point: &Vector3<f64>) -> std::result::Result<Projection, BehindCamera> {
    let pc = camera.to_camera(point);
    if !(pc.z > 0.0) {
        return Err(BehindCamera { depth: pc.z });
    }
    Ok(Projection {
        u: camera.fx * pc.x / pc.z + camera.cx,
        v: camera.fy * pc.y / pc.z + camera.cy,
        depth: pc.z,
    })
}

/// Axis-aligned capture volume split into `bins` voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub origin: [f64; 3],
    pub extent: [f64; 3],
    pub bins: [usize; 3],
}

impl Default for VoxelGrid {
    /// 10 m × 10 m × 4 m split into 160 × 160 × 64 bins (62.5 mm voxels).
    fn default() -> Self {
        VoxelGrid {
            origin: [0.0, 0.0, 0.0],
            extent: [10_000.0, 10_000.0, 4_000.0],
            bins: [160, 160, 64],
        }
    }
}

impl VoxelGrid {
    pub fn new(origin: [f64; 3], extent: [f64; 3], bins: [usize; 3]) -> Result<Self> {
        let grid = VoxelGrid { origin, extent, bins };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.extent.iter().all(|&e| e > 0.0 && e.is_finite()) {
            return Err(Error::config("grid.extent", "extent components must be > 0"));
        }
        if !self.origin.iter().all(|o| o.is_finite()) {
            return Err(Error::config("grid.origin", "origin must be finite"));
        }
        if self.bins.contains(&0) {
            return Err(Error::config("grid.bins", "bin counts must be >= 1"));
        }
        Ok(())
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        [
            self.extent[0] / self.bins[0] as f64,
            self.extent[1] / self.bins[1] as f64,
            self.extent[2] / self.bins[2] as f64,
        ]
    }

    pub fn num_voxels(&self) -> usize {
        self.bins[0] * self.bins[1] * self.bins[2]
    }

    pub fn contains_index(&self, index: [usize; 3]) -> bool {
        index[0] < self.bins[0] && index[1] < self.bins[1] && index[2] < self.bins[2]
    }

    /// Centre of voxel `index`. Panics when the index is outside the grid.
    pub fn voxel_center(&self, index: [usize; 3]) -> Vector3<f64> {
        assert!(
            self.contains_index(index),
            "voxel index {index:?} outside grid {:?}",
            self.bins
        );
        self.lattice_point([index[0] as f64, index[1] as f64, index[2] as f64])
    }

    /// World position of a fractional lattice coordinate (voxel centres sit
    /// at integer coordinates). No bounds check.
    pub fn lattice_point(&self, coord: [f64; 3]) -> Vector3<f64> {
        let s = self.voxel_size();
        Vector3::new(
            self.origin[0] + (coord[0] + 0.5) * s[0],
            self.origin[1] + (coord[1] + 0.5) * s[1],
            self.origin[2] + (coord[2] + 0.5) * s[2],
        )
    }

    /// Voxel containing `point`, if any.
    pub fn voxel_of(&self, point: &Vector3<f64>) -> Option<[usize; 3]> {
        let s = self.voxel_size();
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((point[a] - self.origin[a]) / s[a]).floor();
            if !(f >= 0.0 && f < self.bins[a] as f64) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    pub fn linear_index(&self, index: [usize; 3]) -> usize {
        (index[0] * self.bins[1] + index[1]) * self.bins[2] + index[2]
    }

    pub fn unravel(&self, linear: usize) -> [usize; 3] {
        let z = linear % self.bins[2];
        let rest = linear / self.bins[2];
        [rest / self.bins[1], rest % self.bins[1], z]
    }

    pub fn translated(&self, offset: &Vector3<f64>) -> VoxelGrid {
        let mut g = self.clone();
        for a in 0..3 {
            g.origin[a] += offset[a];
        }
        g
    }
}

/// A 15-joint skeleton in world millimetres. Joint 0 is the pelvis.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    pub joints: Vec<Vector3<f64>>,
}

impl Pose3D {
    pub fn new(joints: Vec<Vector3<f64>>) -> Self {
        Pose3D { joints }
    }

    pub fn from_arrays(joints: &[[f64; 3]]) -> Self {
        Pose3D {
            joints: joints.iter().map(|j| Vector3::new(j[0], j[1], j[2])).collect(),
        }
    }

    pub fn to_arrays(&self) -> Vec<[f64; 3]> {
        self.joints.iter().map(|j| [j.x, j.y, j.z]).collect()
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn root(&self) -> Vector3<f64> {
        self.joints[PELVIS]
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().all(|j| j.iter().all(|v| v.is_finite()))
    }

    pub fn has_standard_layout(&self) -> bool {
        self.joints.len() == NUM_JOINTS
    }

    /// Mean per-joint Euclidean distance (MPJPE) to `other`.
    pub fn mpjpe(&self, other: &Pose3D) -> f64 {
        debug_assert_eq!(self.joints.len(), other.joints.len());
        if self.joints.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.joints.iter().zip(&other.joints).map(|(a, b)| (a - b).norm()).sum();
        sum / self.joints.len() as f64
    }

    pub fn translated(&self, offset: &Vector3<f64>) -> Pose3D {
        Pose3D {
            joints: self.joints.iter().map(|j| j + offset).collect(),
        }
    }
}

/// One voxel's projection into one view, in heatmap pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableEntry {
    pub u: f32,
    pub v: f32,
    pub depth: f32,
    pub visible: bool,
}

/// Voxel-to-heatmap-pixel projections for every view.
///
/// Coordinates are stored at heatmap resolution (image pixels divided by
/// `stride`) and are not rounded.
#[derive(Debug, Clone)]
pub struct ProjectionTable {
    pub grid: VoxelGrid,
    pub stride: f64,
    views: Vec<ViewTable>,
}

#[derive(Debug, Clone)]
struct ViewTable {
    width: usize,
    height: usize,
    // (u, v, depth); u is NaN for invisible voxels.
    entries: Vec<[f32; 3]>,
}

impl ProjectionTable {
    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn heatmap_size(&self, view: usize) -> (usize, usize) {
        (self.views[view].width, self.views[view].height)
    }

    pub fn entry(&self, view: usize, voxel: usize) -> TableEntry {
        let [u, v, depth] = self.views[view].entries[voxel];
        TableEntry {
            u,
            v,
            depth,
            visible: !u.is_nan(),
        }
    }

    /// `(u, v)` of a visible entry, `None` otherwise.
    #[inline]
    pub fn uv(&self, view: usize, voxel: usize) -> Option<(f32, f32)> {
        let e = &self.views[view].entries[voxel];
        if e[0].is_nan() {
            None
        } else {
            Some((e[0], e[1]))
        }
    }

    pub fn visible_count(&self, view: usize) -> usize {
        self.views[view].entries.iter().filter(|e| !e[0].is_nan()).count()
    }
}

/// Heatmap size for an image at the given stride (`image / stride`).
pub fn heatmap_size(camera: &CameraParams, stride: f64) -> (usize, usize) {
    (
        (camera.image_width as f64 / stride).floor() as usize,
        (camera.image_height as f64 / stride).floor() as usize,
    )
}

pub fn build_projection_table(grid: &VoxelGrid, cameras: &[CameraParams], stride: f64) -> Result<ProjectionTable> {
    if cameras.is_empty() {
        return Err(Error::contract("projection table needs at least one camera"));
    }
    if !(stride > 0.0) {
        return Err(Error::contract("stride must be positive"));
    }
    let n = grid.num_voxels();
    let plane = grid.bins[1] * grid.bins[2];
    let views = cameras
        .iter()
        .map(|cam| {
            let (width, height) = heatmap_size(cam, stride);
            let mut entries = vec![[f32::NAN; 3]; n];
            crate::par::for_each_chunk_mut(&mut entries, plane, |x, slab| {
                for (k, e) in slab.iter_mut().enumerate() {
                    let y = k / grid.bins[2];
                    let z = k % grid.bins[2];
                    let p = grid.voxel_center([x, y, z]);
                    match project_point(cam, &p) {
                        Ok(pr) => {
                            let u = pr.u / stride;
                            let v = pr.v / stride;
                            let inside = u >= 0.0 && u < width as f64 && v >= 0.0 && v < height as f64;
                            *e = if inside {
                                [u as f32, v as f32, pr.depth as f32]
                            } else {
                                [f32::NAN, f32::NAN, pr.depth as f32]
                            };
                        }
                        Err(b) => *e = [f32::NAN, f32::NAN, b.depth as f32],
                    }
                }
            });
            ViewTable { width, height, entries }
        })
        .collect();
    Ok(ProjectionTable {
        grid: grid.clone(),
        stride,
        views,
    })
}
