//! Synthetic scene generator: moving skeletons, a camera ring, and the
//! per-view heatmaps and Re-ID maps a trained network would produce.
//!
//! Every random draw comes from a ChaCha stream keyed by `(seed, tags)`, so
//! any frame or view can be rendered independently and in any order.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{heatmap_size, project_point, CameraParams, Pose3D, VoxelGrid};
use crate::heatmap2d::{normalize_in_place, render_gaussian_heatmap, Heatmap2D, Joint2D, ReidMap2D};
use crate::io;
use crate::occlusion::{occlusion_matrix, person_depth_boxes, PersonDepthBox};
use crate::skeleton::{NUM_JOINTS, PELVIS};

const TAG_TRAJECTORY: u64 = 1;
const TAG_IDENTITY: u64 = 2;
const TAG_HEATMAP: u64 = 3;
const TAG_REID: u64 = 4;
const SPAWN_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    pub origin: [f64; 3],
    pub extent: [f64; 3],
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig {
            origin: [0.0; 3],
            extent: [10000.0, 10000.0, 4000.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraRing {
    pub count: usize,
    pub radius_mm: f64,
    pub height_mm: f64,
    pub look_at: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub image_width: u32,
    pub image_height: u32,
    /// Angle of the first camera around the ring (degrees).
    pub phase_deg: f64,
    /// Explicit azimuths (degrees), one per camera. Empty spaces the
    /// cameras evenly from `phase_deg`.
    pub azimuths_deg: Vec<f64>,
}

impl Default for CameraRing {
    fn default() -> Self {
        CameraRing {
            count: 5,
            radius_mm: 7500.0,
            height_mm: 2500.0,
            look_at: [5000.0, 5000.0, 900.0],
            fx: 450.0,
            fy: 450.0,
            image_width: 800,
            image_height: 608,
            phase_deg: 0.0,
            azimuths_deg: Vec::new(),
        }
    }
}

impl CameraRing {
    /// Cameras evenly spaced on a horizontal circle around `look_at`.
    pub fn cameras(&self) -> Result<Vec<CameraParams>> {
        if !(self.radius_mm > 0.0) {
            return Err(Error::config("scenario.cameras.radius_mm", "must be > 0"));
        }
        if !self.azimuths_deg.is_empty() && self.azimuths_deg.len() != self.count {
            return Err(Error::config(
                "scenario.cameras.azimuths_deg",
                format!("{} azimuths for {} cameras", self.azimuths_deg.len(), self.count),
            ));
        }
        let target = Vector3::from(self.look_at);
        (0..self.count)
            .map(|i| {
                let deg = match self.azimuths_deg.get(i) {
                    Some(&a) => a,
                    None => self.phase_deg + 360.0 * i as f64 / self.count as f64,
                };
                let a = deg.to_radians();
                let eye = Vector3::new(
                    self.look_at[0] + self.radius_mm * a.cos(),
                    self.look_at[1] + self.radius_mm * a.sin(),
                    self.height_mm,
                );
                CameraParams::look_at(
                    i as u32,
                    eye,
                    target,
                    self.fx,
                    self.fy,
                    self.image_width,
                    self.image_height,
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    pub speed_mm_s: f64,
    pub waypoints: usize,
    /// Keep-out band along the walls of the space.
    pub margin_mm: f64,
    pub min_separation_mm: f64,
    /// Frames each gait pose is held.
    pub gait_frames: u32,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            speed_mm_s: 1000.0,
            waypoints: 4,
            margin_mm: 2000.0,
            min_separation_mm: 500.0,
            gait_frames: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Gaussian blob width in heatmap pixels.
    pub heatmap_sigma_px: f64,
    /// Std-dev of joint position jitter in heatmap pixels.
    pub jitter_px: f64,
    /// Probability of one spurious blob per view and channel.
    pub false_peak_rate: f64,
    pub missing_joint_rate: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            heatmap_sigma_px: 1.0,
            jitter_px: 0.0,
            false_peak_rate: 0.0,
            missing_joint_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReidCorruption {
    /// Mix in a random unit vector drawn per frame, view and person.
    RandomDistractor,
    /// Mix in the embedding of the person covering the largest share of
    /// the box.
    Occluder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReidConfig {
    pub dim: usize,
    /// Disc radius around the pelvis, heatmap pixels.
    pub disc_radius_px: f64,
    pub corruption: ReidCorruption,
}

impl Default for ReidConfig {
    fn default() -> Self {
        ReidConfig {
            dim: 64,
            disc_radius_px: 3.0,
            corruption: ReidCorruption::RandomDistractor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseKind {
    Stand,
    WalkLeft,
    WalkRight,
    Sit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keyframe {
    pub frame: u32,
    /// Pelvis ground position (mm).
    pub xy: [f64; 2],
}

/// A person with a hand-written path, interpolated linearly between
/// keyframes and held constant outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedPerson {
    pub keyframes: Vec<Keyframe>,
    #[serde(default)]
    pub pose: Option<PoseKind>,
    /// Facing direction in degrees when not moving.
    #[serde(default)]
    pub heading_deg: f64,
}

/// Removes a person from the observations of some views for frames
/// `start..end`. The person still occludes others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dropout {
    pub person: usize,
    pub start: u32,
    pub end: u32,
    #[serde(default)]
    pub views: Option<Vec<usize>>,
}

impl Dropout {
    fn hides(&self, person: usize, frame: u32, view: usize) -> bool {
        self.person == person
            && (self.start..self.end).contains(&frame)
            && self.views.as_ref().is_none_or(|vs| vs.contains(&view))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_persons: usize,
    pub frames: u32,
    pub fps: f64,
    pub space: SpaceConfig,
    pub cameras: CameraRing,
    pub motion: MotionConfig,
    pub noise: NoiseConfig,
    pub reid: ReidConfig,
    /// Image-to-heatmap downsampling factor.
    pub heatmap_stride: f64,
    /// Raster pitch for occlusion fractions, image pixels.
    pub occlusion_resolution_px: f64,
    /// Scripted persons take the first ids; the rest are random walkers.
    pub scripted: Vec<ScriptedPerson>,
    pub dropouts: Vec<Dropout>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            n_persons: 2,
            frames: 30,
            fps: 15.0,
            space: SpaceConfig::default(),
            cameras: CameraRing::default(),
            motion: MotionConfig::default(),
            noise: NoiseConfig::default(),
            reid: ReidConfig::default(),
            heatmap_stride: 4.0,
            occlusion_resolution_px: 4.0,
            scripted: Vec::new(),
            dropouts: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, f: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("scenario.{f}"), "must be > 0"))
            }
        };
        let rate = |v: f64, f: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("scenario.{f}"), "must lie in [0, 1]"))
            }
        };
        positive(self.fps, "fps")?;
        positive(self.heatmap_stride, "heatmap_stride")?;
        positive(self.occlusion_resolution_px, "occlusion_resolution_px")?;
        positive(self.noise.heatmap_sigma_px, "noise.heatmap_sigma_px")?;
        positive(self.reid.disc_radius_px, "reid.disc_radius_px")?;
        rate(self.noise.false_peak_rate, "noise.false_peak_rate")?;
        rate(self.noise.missing_joint_rate, "noise.missing_joint_rate")?;
        if !(self.noise.jitter_px >= 0.0) {
            return Err(Error::config("scenario.noise.jitter_px", "must be >= 0"));
        }
        if !(self.motion.speed_mm_s >= 0.0) {
            return Err(Error::config("scenario.motion.speed_mm_s", "must be >= 0"));
        }
        if self.motion.waypoints == 0 {
            return Err(Error::config("scenario.motion.waypoints", "need at least one waypoint"));
        }
        if self.motion.gait_frames == 0 {
            return Err(Error::config("scenario.motion.gait_frames", "must be >= 1"));
        }
        if self.reid.dim == 0 {
            return Err(Error::config("scenario.reid.dim", "must be >= 1"));
        }
        if self.cameras.count == 0 {
            return Err(Error::config("scenario.cameras.count", "need at least one camera"));
        }
        if self.scripted.len() > self.n_persons {
            return Err(Error::config(
                "scenario.scripted",
                format!(
                    "{} scripted persons but n_persons is {}",
                    self.scripted.len(),
                    self.n_persons
                ),
            ));
        }
        for (i, s) in self.scripted.iter().enumerate() {
            if s.keyframes.is_empty() {
                return Err(Error::config(
                    format!("scenario.scripted[{i}].keyframes"),
                    "must not be empty",
                ));
            }
            if s.keyframes.windows(2).any(|w| w[1].frame <= w[0].frame) {
                return Err(Error::config(
                    format!("scenario.scripted[{i}].keyframes"),
                    "frames must be strictly increasing",
                ));
            }
        }
        for (i, d) in self.dropouts.iter().enumerate() {
            if d.person >= self.n_persons {
                return Err(Error::config(
                    format!("scenario.dropouts[{i}].person"),
                    "no such person",
                ));
            }
            if let Some(vs) = &d.views {
                if vs.iter().any(|&v| v >= self.cameras.count) {
                    return Err(Error::config(format!("scenario.dropouts[{i}].views"), "no such view"));
                }
            }
        }
        let _ = self.walk_area()?;
        self.cameras.cameras()?;
        Ok(())
    }

    pub fn grid(&self, bins: [usize; 3]) -> Result<VoxelGrid> {
        VoxelGrid::new(self.space.origin, self.space.extent, bins)
    }

    fn walk_area(&self) -> Result<([f64; 2], [f64; 2])> {
        let m = self.motion.margin_mm;
        let lo = [self.space.origin[0] + m, self.space.origin[1] + m];
        let hi = [
            self.space.origin[0] + self.space.extent[0] - m,
            self.space.origin[1] + self.space.extent[1] - m,
        ];
        if !(lo[0] <= hi[0] && lo[1] <= hi[1]) {
            return Err(Error::config(
                "scenario.motion.margin_mm",
                "margin leaves no walkable area",
            ));
        }
        Ok((lo, hi))
    }
}

/// Counter-based random stream for one entity.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed ^ 0x5851_f42d_4c95_7f2d);
    for &t in tags {
        h = splitmix(h ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Canonical skeleton in a body frame: x to the person's right, y forward,
/// z up, millimetres, feet on the floor.
pub fn canonical_pose(kind: PoseKind) -> [[f64; 3]; NUM_JOINTS] {
    let stand = [
        [0.0, 0.0, 900.0],
        [0.0, 0.0, 1450.0],
        [0.0, 80.0, 1580.0],
        [-190.0, 0.0, 1400.0],
        [-230.0, 0.0, 1130.0],
        [-250.0, 30.0, 880.0],
        [-100.0, 0.0, 900.0],
        [-105.0, 20.0, 480.0],
        [-110.0, 0.0, 100.0],
        [190.0, 0.0, 1400.0],
        [230.0, 0.0, 1130.0],
        [250.0, 30.0, 880.0],
        [100.0, 0.0, 900.0],
        [105.0, 20.0, 480.0],
        [110.0, 0.0, 100.0],
    ];
    match kind {
        PoseKind::Stand => stand,
        PoseKind::WalkLeft => stride_pose(stand, 1.0),
        PoseKind::WalkRight => stride_pose(stand, -1.0),
        PoseKind::Sit => [
            [0.0, 0.0, 450.0],
            [0.0, -30.0, 1000.0],
            [0.0, 50.0, 1130.0],
            [-190.0, -30.0, 950.0],
            [-230.0, 60.0, 720.0],
            [-250.0, 250.0, 700.0],
            [-100.0, 0.0, 450.0],
            [-105.0, 420.0, 470.0],
            [-110.0, 430.0, 100.0],
            [190.0, -30.0, 950.0],
            [230.0, 60.0, 720.0],
            [250.0, 250.0, 700.0],
            [100.0, 0.0, 450.0],
            [105.0, 420.0, 470.0],
            [110.0, 430.0, 100.0],
        ],
    }
}

/// `side = 1` puts the left leg forward and swings the right arm forward.
fn stride_pose(mut p: [[f64; 3]; NUM_JOINTS], side: f64) -> [[f64; 3]; NUM_JOINTS] {
    let (lead_knee, lead_ankle, back_knee, back_ankle) = if side > 0.0 { (7, 8, 13, 14) } else { (13, 14, 7, 8) };
    p[lead_knee][1] = 150.0;
    p[lead_knee][2] = 490.0;
    p[lead_ankle][1] = 300.0;
    p[lead_ankle][2] = 110.0;
    p[back_knee][1] = -100.0;
    p[back_knee][2] = 480.0;
    p[back_ankle][1] = -250.0;
    p[back_ankle][2] = 130.0;
    let (fwd_elbow, fwd_wrist, back_elbow, back_wrist) = if side > 0.0 { (10, 11, 4, 5) } else { (4, 5, 10, 11) };
    p[fwd_elbow][1] = 60.0;
    p[fwd_wrist][1] = 160.0;
    p[fwd_wrist][2] = 900.0;
    p[back_elbow][1] = -50.0;
    p[back_wrist][1] = -120.0;
    p
}

/// Place a canonical pose with its pelvis over `xy`, facing `heading`
/// (radians, counter-clockwise from +x).
pub fn place_pose(kind: PoseKind, xy: [f64; 2], heading: f64) -> Pose3D {
    let (s, c) = heading.sin_cos();
    let forward = [c, s];
    let right = [s, -c];
    let joints = canonical_pose(kind)
        .iter()
        .map(|l| {
            Vector3::new(
                xy[0] + l[0] * right[0] + l[1] * forward[0],
                xy[1] + l[0] * right[1] + l[1] * forward[1],
                l[2],
            )
        })
        .collect();
    Pose3D::new(joints)
}

/// Ground truth for one person in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GtPerson {
    pub id: u64,
    pub pose: Pose3D,
    pub embedding: Vec<f32>,
    /// True occluded fraction per view.
    pub occlusion: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtFrame {
    pub frame: u32,
    pub persons: Vec<GtPerson>,
}

#[derive(Debug, Clone)]
pub struct FrameObservations {
    pub frame: u32,
    pub heatmaps: Vec<Heatmap2D>,
    pub reid: Vec<ReidMap2D>,
}

#[derive(Debug, Clone)]
struct Trajectory {
    /// `(frame, xy)` samples, strictly increasing in frame.
    keys: Vec<(f64, [f64; 2])>,
    pose: Option<PoseKind>,
    heading: f64,
}

impl Trajectory {
    fn at(&self, t: f64) -> ([f64; 2], f64, bool) {
        let k = &self.keys;
        if k.len() == 1 || t <= k[0].0 {
            return (k[0].1, self.heading_of(0), false);
        }
        for i in 0..k.len() - 1 {
            let (t0, a) = k[i];
            let (t1, b) = k[i + 1];
            if t <= t1 {
                let s = (t - t0) / (t1 - t0);
                let xy = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])];
                let moving = a != b;
                return (xy, self.heading_of(i), moving);
            }
        }
        let last = k.len() - 1;
        (k[last].1, self.heading_of(last.saturating_sub(1)), false)
    }

    fn heading_of(&self, seg: usize) -> f64 {
        let k = &self.keys;
        if seg + 1 < k.len() {
            let d = [k[seg + 1].1[0] - k[seg].1[0], k[seg + 1].1[1] - k[seg].1[1]];
            if d[0] != 0.0 || d[1] != 0.0 {
                return d[1].atan2(d[0]);
            }
        }
        self.heading
    }
}

fn random_path(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng, lo: [f64; 2], hi: [f64; 2]) -> Trajectory {
    let pick = |rng: &mut ChaCha8Rng| {
        [
            if hi[0] > lo[0] {
                rng.random_range(lo[0]..hi[0])
            } else {
                lo[0]
            },
            if hi[1] > lo[1] {
                rng.random_range(lo[1]..hi[1])
            } else {
                lo[1]
            },
        ]
    };
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let pts: Vec<[f64; 2]> = (0..cfg.motion.waypoints).map(|_| pick(rng)).collect();
    let step = cfg.motion.speed_mm_s / cfg.fps;
    let mut keys = vec![(0.0, pts[0])];
    if step > 0.0 && pts.len() > 1 {
        // walk the polyline forth and back until the sequence ends
        let horizon = cfg.frames as f64;
        let mut t = 0.0;
        let mut i = 0usize;
        let mut dir: isize = 1;
        while t < horizon {
            let j = (i as isize + dir) as usize;
            let d = ((pts[j][0] - pts[i][0]).powi(2) + (pts[j][1] - pts[i][1]).powi(2)).sqrt();
            t += (d / step).max(1e-9);
            keys.push((t, pts[j]));
            i = j;
            if i == pts.len() - 1 {
                dir = -1;
            } else if i == 0 {
                dir = 1;
            }
        }
    }
    Trajectory {
        keys,
        pose: None,
        heading,
    }
}

fn scripted_path(s: &ScriptedPerson) -> Trajectory {
    Trajectory {
        keys: s.keyframes.iter().map(|k| (k.frame as f64, k.xy)).collect(),
        pose: s.pose,
        heading: s.heading_deg.to_radians(),
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let mut e: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if normalize_in_place(&mut e) {
            return e;
        }
    }
}

/// A sampled scene: paths, identities and cameras; frames are generated on
/// demand.
#[derive(Debug, Clone)]
pub struct Scene {
    pub config: ScenarioConfig,
    pub cameras: Vec<CameraParams>,
    paths: Vec<Trajectory>,
    embeddings: Vec<Vec<f32>>,
}

/// Sample trajectories and identities for every person.
pub fn sample_scene(config: &ScenarioConfig) -> Result<Scene> {
    config.validate()?;
    let cameras = config.cameras.cameras()?;
    let (lo, hi) = config.walk_area()?;
    let mut paths: Vec<Trajectory> = config.scripted.iter().map(scripted_path).collect();
    for p in paths.len()..config.n_persons {
        let mut rng = stream(config.seed, &[TAG_TRAJECTORY, p as u64]);
        let mut found = None;
        for _ in 0..SPAWN_ATTEMPTS {
            let cand = random_path(config, &mut rng, lo, hi);
            if separated(&cand, &paths, config) {
                found = Some(cand);
                break;
            }
        }
        let path = found.ok_or_else(|| {
            Error::config(
                "scenario.n_persons",
                format!(
                    "space too small for {} persons kept {} mm apart",
                    config.n_persons, config.motion.min_separation_mm
                ),
            )
        })?;
        paths.push(path);
    }
    let embeddings = (0..config.n_persons)
        .map(|p| random_unit(&mut stream(config.seed, &[TAG_IDENTITY, p as u64]), config.reid.dim))
        .collect();
    Ok(Scene {
        config: config.clone(),
        cameras,
        paths,
        embeddings,
    })
}

fn separated(cand: &Trajectory, others: &[Trajectory], cfg: &ScenarioConfig) -> bool {
    let min2 = cfg.motion.min_separation_mm.powi(2);
    (0..cfg.frames.max(1)).all(|f| {
        let a = cand.at(f as f64).0;
        others.iter().all(|o| {
            let b = o.at(f as f64).0;
            (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) >= min2
        })
    })
}

impl Scene {
    pub fn num_persons(&self) -> usize {
        self.paths.len()
    }

    pub fn embedding(&self, person: usize) -> &[f32] {
        &self.embeddings[person]
    }

    /// Ground-truth poses of every person at `frame`, without occlusion.
    pub fn poses(&self, frame: u32) -> Vec<Pose3D> {
        let gait = [
            PoseKind::Stand,
            PoseKind::WalkLeft,
            PoseKind::Stand,
            PoseKind::WalkRight,
        ];
        self.paths
            .iter()
            .map(|path| {
                let (xy, heading, moving) = path.at(frame as f64);
                let kind = path.pose.unwrap_or(if moving {
                    gait[(frame / self.config.motion.gait_frames) as usize % gait.len()]
                } else {
                    PoseKind::Stand
                });
                place_pose(kind, xy, heading)
            })
            .collect()
    }

    pub fn gt_frame(&self, frame: u32) -> GtFrame {
        let poses = self.poses(frame);
        let occ = occlusion_matrix(&poses, &self.cameras, self.config.occlusion_resolution_px);
        GtFrame {
            frame,
            persons: poses
                .into_iter()
                .zip(occ)
                .enumerate()
                .map(|(p, (pose, occlusion))| GtPerson {
                    id: p as u64 + 1,
                    pose,
                    embedding: self.embeddings[p].clone(),
                    occlusion,
                })
                .collect(),
        }
    }

    pub fn gt_frames(&self) -> Vec<GtFrame> {
        (0..self.config.frames).map(|f| self.gt_frame(f)).collect()
    }

    pub fn render(&self, gt: &GtFrame) -> FrameObservations {
        render_frame(gt, &self.cameras, &self.config)
    }
}

/// Heatmaps and Re-ID maps of every view for one ground-truth frame.
pub fn render_frame(gt: &GtFrame, cameras: &[CameraParams], config: &ScenarioConfig) -> FrameObservations {
    let views: Vec<usize> = (0..cameras.len()).collect();
    let rendered = crate::par::map_collect(&views, |&v| render_view(gt, cameras, v, config));
    let (heatmaps, reid) = rendered.into_iter().unzip();
    FrameObservations {
        frame: gt.frame,
        heatmaps,
        reid,
    }
}

fn render_view(gt: &GtFrame, cameras: &[CameraParams], v: usize, cfg: &ScenarioConfig) -> (Heatmap2D, ReidMap2D) {
    let cam = &cameras[v];
    let stride = cfg.heatmap_stride;
    let (w, h) = heatmap_size(cam, stride);
    let noise = &cfg.noise;
    let hidden = |p: usize| cfg.dropouts.iter().any(|d| d.hides(p, gt.frame, v));

    let mut rng = stream(cfg.seed, &[TAG_HEATMAP, gt.frame as u64, v as u64]);
    let mut persons = Vec::with_capacity(gt.persons.len());
    for (p, person) in gt.persons.iter().enumerate() {
        let mut joints = Vec::with_capacity(NUM_JOINTS);
        for j in &person.pose.joints {
            // draw every variate so the stream layout ignores the outcome
            let missing = rng.random::<f64>() < noise.missing_joint_rate;
            let du: f64 = StandardNormal.sample(&mut rng);
            let dv: f64 = StandardNormal.sample(&mut rng);
            match project_point(cam, j) {
                Ok(pr) if !missing && !hidden(p) => joints.push(Joint2D::new(
                    pr.u / stride + noise.jitter_px * du,
                    pr.v / stride + noise.jitter_px * dv,
                )),
                _ => joints.push(Joint2D::hidden()),
            }
        }
        persons.push(joints);
    }
    let mut hm = render_gaussian_heatmap(&persons, noise.heatmap_sigma_px, NUM_JOINTS, h, w);
    for c in 0..NUM_JOINTS {
        let spurious = rng.random::<f64>() < noise.false_peak_rate;
        let u = rng.random::<f64>() * (w.max(1) - 1) as f64;
        let vv = rng.random::<f64>() * (h.max(1) - 1) as f64;
        if spurious {
            hm.splat_gaussian(c, u, vv, noise.heatmap_sigma_px);
        }
    }

    let mut reid = ReidMap2D::zeros(cfg.reid.dim, h, w);
    let boxes = person_depth_boxes(&gt.persons.iter().map(|p| p.pose.clone()).collect::<Vec<_>>(), cam, v);
    let mut order: Vec<usize> = (0..gt.persons.len())
        .filter(|&p| boxes[p].visible && !hidden(p))
        .collect();
    // far to near so nearer discs overwrite
    order.sort_by(|&a, &b| boxes[b].depth.total_cmp(&boxes[a].depth).then(a.cmp(&b)));
    for p in order {
        let person = &gt.persons[p];
        let Ok(pr) = project_point(cam, &person.pose.joints[PELVIS]) else {
            continue;
        };
        let f = person.occlusion.get(v).copied().unwrap_or(0.0);
        let emb = corrupted_embedding(gt, &boxes, p, v, f, cfg);
        reid.paint_disc(pr.u / stride, pr.v / stride, cfg.reid.disc_radius_px, &emb);
    }
    (hm, reid)
}

/// `normalize((1 - f)·e + f·d)` with the distractor `d` chosen by the
/// corruption rule.
fn corrupted_embedding(
    gt: &GtFrame,
    boxes: &[PersonDepthBox],
    p: usize,
    v: usize,
    f: f64,
    cfg: &ScenarioConfig,
) -> Vec<f32> {
    let e = &gt.persons[p].embedding;
    if f <= 0.0 {
        return e.clone();
    }
    let d = match cfg.reid.corruption {
        ReidCorruption::Occluder => main_occluder(boxes, p)
            .map(|q| gt.persons[q].embedding.clone())
            .unwrap_or_else(|| {
                random_unit(
                    &mut stream(cfg.seed, &[TAG_REID, gt.frame as u64, v as u64, p as u64]),
                    e.len(),
                )
            }),
        ReidCorruption::RandomDistractor => random_unit(
            &mut stream(cfg.seed, &[TAG_REID, gt.frame as u64, v as u64, p as u64]),
            e.len(),
        ),
    };
    let mut out: Vec<f32> = e
        .iter()
        .zip(&d)
        .map(|(&a, &b)| ((1.0 - f) * a as f64 + f * b as f64) as f32)
        .collect();
    if !normalize_in_place(&mut out) {
        out.clone_from(e);
    }
    out
}

/// Nearer person whose box overlaps `p`'s box the most.
fn main_occluder(boxes: &[PersonDepthBox], p: usize) -> Option<usize> {
    let t = &boxes[p];
    let mut best: Option<(usize, f64)> = None;
    for (q, b) in boxes.iter().enumerate() {
        if q == p || !b.visible || b.depth >= t.depth {
            continue;
        }
        let ix = (t.bbox[2].min(b.bbox[2]) - t.bbox[0].max(b.bbox[0])).max(0.0);
        let iy = (t.bbox[3].min(b.bbox[3]) - t.bbox[1].max(b.bbox[1])).max(0.0);
        let a = ix * iy;
        if a > 0.0 && best.is_none_or(|(_, ba)| a > ba) {
            best = Some((q, a));
        }
    }
    best.map(|(q, _)| q)
}

/// Write `scenario.json`, `cameras.json`, `gt.jsonl` and, if asked, the
/// per-frame VXHM dumps of every view's heatmap and Re-ID map.
pub fn export_dataset(scene: &Scene, dir: &Path, dump_heatmaps: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_json(&dir.join(io::SCENARIO_FILE), &scene.config)?;
    io::write_cameras(&dir.join(io::CAMERAS_FILE), &scene.cameras)?;
    let frames = scene.gt_frames();
    let records: Vec<io::GtRecord> = frames.iter().flat_map(io::gt_records).collect();
    io::write_jsonl(&dir.join(io::GT_FILE), &records)?;
    if dump_heatmaps {
        for gt in &frames {
            let obs = scene.render(gt);
            for v in 0..obs.heatmaps.len() {
                io::write_vxhm(&io::heatmap_path(dir, gt.frame, v), obs.heatmaps[v].map())?;
                io::write_vxhm(&io::reid_path(dir, gt.frame, v), obs.reid[v].map())?;
            }
        }
    }
    Ok(())
}

/// An exported scene read back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub config: ScenarioConfig,
    pub cameras: Vec<CameraParams>,
    pub gt: Vec<GtFrame>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let config: ScenarioConfig = io::read_json(&dir.join(io::SCENARIO_FILE))?;
        config.validate()?;
        let cameras = io::read_cameras(&dir.join(io::CAMERAS_FILE))?;
        let records: Vec<io::GtRecord> = io::read_jsonl(&dir.join(io::GT_FILE))?;
        let gt = io::gt_frames_from_records(&records, config.frames)?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            config,
            cameras,
            gt,
        })
    }

    pub fn has_dumps(&self) -> bool {
        self.dir.join(io::HEATMAP_DIR).is_dir()
    }

    /// Observations of one frame, read from the dumps when present and
    /// rendered from ground truth otherwise.
    pub fn observations(&self, frame: u32) -> Result<FrameObservations> {
        let gt = self.gt.get(frame as usize).ok_or_else(|| Error::Data {
            frame,
            message: "frame outside the dataset".into(),
        })?;
        if !self.has_dumps() {
            return Ok(render_frame(gt, &self.cameras, &self.config));
        }
        let load = |p: PathBuf, v: usize| {
            if !p.is_file() {
                return Err(Error::Data {
                    frame,
                    message: format!("view {v} missing: {}", p.display()),
                });
            }
            io::read_vxhm(&p)
        };
        let mut heatmaps = Vec::with_capacity(self.cameras.len());
        let mut reid = Vec::with_capacity(self.cameras.len());
        for v in 0..self.cameras.len() {
            heatmaps.push(Heatmap2D::from_map(load(io::heatmap_path(&self.dir, frame, v), v)?));
            reid.push(ReidMap2D::from_map(load(io::reid_path(&self.dir, frame, v), v)?));
        }
        Ok(FrameObservations { frame, heatmaps, reid })
    }
}
