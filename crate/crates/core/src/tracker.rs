//! Frame-to-frame identity linking.

use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::error::{Error, Result};
use crate::geometry::Pose3D;
use crate::heatmap2d::normalize_in_place;
use crate::occlusion::FusedReid;
use crate::skeleton::PELVIS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueMode {
    /// Mean of location and appearance distances.
    Combined,
    LocationOnly,
    AppearanceOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    MeanJoint,
    Pelvis,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerParams {
    /// Weight of the old embedding when blending.
    pub alpha: f32,
    /// Largest raw distance allowed per elapsed frame (mm).
    pub gate_mm: f64,
    /// A tracklet unmatched for more than this many frames goes inactive.
    pub max_missed_frames: u32,
    pub cues: CueMode,
    pub distance: DistanceMode,
    /// Reject pairs whose cosine distance exceeds this, when appearance is
    /// in use and both embeddings are valid. `None` disables the check.
    pub max_appearance_distance: Option<f64>,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            alpha: 0.9,
            gate_mm: 500.0,
            max_missed_frames: 30,
            cues: CueMode::Combined,
            distance: DistanceMode::MeanJoint,
            max_appearance_distance: None,
        }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("tracker.alpha", "must lie in [0, 1]"));
        }
        if let Some(d) = self.max_appearance_distance {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::config("tracker.max_appearance_distance", "must lie in [0, 1]"));
            }
        }
        if !(self.gate_mm > 0.0) {
            return Err(Error::config("tracker.gate_mm", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackState {
    Active,
    Inactive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: u64,
    pub pose: Pose3D,
    /// Blended unit embedding; `None` until a valid feature was seen.
    pub embedding: Option<Vec<f32>>,
    pub frames_since_match: u32,
    pub state: TrackState,
}

/// One tracked person in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub frame: u32,
    pub track_id: u64,
    pub joints: Vec<[f64; 3]>,
    pub confidence: f64,
}

/// A decoded pose with its fused appearance feature.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackInput {
    pub pose: Pose3D,
    pub confidence: f64,
    pub reid: FusedReid,
}

/// Raw distance between two poses.
pub fn pose_distance(a: &Pose3D, b: &Pose3D, mode: DistanceMode) -> f64 {
    match mode {
        DistanceMode::MeanJoint => a.mpjpe(b),
        DistanceMode::Pelvis => (a.joints[PELVIS] - b.joints[PELVIS]).norm(),
    }
}

/// Divide each row by its maximum; all-zero rows stay zero.
pub fn row_normalize(raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    raw.iter()
        .map(|row| {
            let m = row.iter().copied().fold(0.0f64, f64::max);
            if m > 0.0 {
                row.iter().map(|x| x / m).collect()
            } else {
                vec![0.0; row.len()]
            }
        })
        .collect()
}

/// `0.5 · (1 − a·b)` for unit vectors.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    (0.5 * (1.0 - dot)).clamp(0.0, 1.0)
}

/// Appearance distances; cells without two valid embeddings take the
/// corresponding location distance instead.
pub fn appearance_distance(
    tracks: &[Option<&[f32]>],
    detections: &[&FusedReid],
    location: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    tracks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            detections
                .iter()
                .enumerate()
                .map(|(j, d)| match t {
                    Some(e) if d.valid => cosine_distance(e, &d.embedding),
                    _ => location[i][j],
                })
                .collect()
        })
        .collect()
}

/// Combine cue matrices and gate on raw distance.
pub fn final_cost(
    location: &[Vec<f64>],
    appearance: &[Vec<f64>],
    raw: &[Vec<f64>],
    gates: &[f64],
    cues: CueMode,
) -> Vec<Vec<Option<f64>>> {
    location
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &loc)| {
                    if raw[i][j] > gates[i] {
                        return None;
                    }
                    let app = appearance[i][j];
                    Some(match cues {
                        CueMode::Combined => 0.5 * (loc + app),
                        CueMode::LocationOnly => loc,
                        CueMode::AppearanceOnly => app,
                    })
                })
                .collect()
        })
        .collect()
}

/// Sequential tracking state machine.
#[derive(Debug, Clone)]
pub struct Tracker {
    params: TrackerParams,
    tracklets: Vec<Tracklet>,
    next_id: u64,
    last_frame: Option<u32>,
}

impl Tracker {
    pub fn new(params: TrackerParams) -> Self {
        Tracker {
            params,
            tracklets: Vec::new(),
            next_id: 1,
            last_frame: None,
        }
    }

    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    pub fn params(&self) -> &TrackerParams {
        &self.params
    }

    /// Process one frame. Returns a record for every matched or newly
    /// started tracklet, ordered by track id.
    pub fn step(&mut self, frame: u32, detections: &[TrackInput]) -> Result<Vec<TrackRecord>> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(Error::Data {
                    frame,
                    message: format!("frame index not increasing (previous {last})"),
                });
            }
        }
        self.last_frame = Some(frame);
        let p = self.params;
        let active: Vec<usize> = (0..self.tracklets.len())
            .filter(|&i| self.tracklets[i].state == TrackState::Active)
            .collect();

        let mut det_track: Vec<Option<usize>> = vec![None; detections.len()];
        let mut matched = vec![false; active.len()];
        if !active.is_empty() && !detections.is_empty() {
            let raw: Vec<Vec<f64>> = active
                .iter()
                .map(|&t| {
                    detections
                        .iter()
                        .map(|d| pose_distance(&self.tracklets[t].pose, &d.pose, p.distance))
                        .collect()
                })
                .collect();
            let loc = row_normalize(&raw);
            let embs: Vec<Option<&[f32]>> = active.iter().map(|&t| self.tracklets[t].embedding.as_deref()).collect();
            let reids: Vec<&FusedReid> = detections.iter().map(|d| &d.reid).collect();
            let app = appearance_distance(&embs, &reids, &loc);
            let gates: Vec<f64> = active
                .iter()
                .map(|&t| p.gate_mm * (self.tracklets[t].frames_since_match as f64 + 1.0))
                .collect();
            let mut cost = final_cost(&loc, &app, &raw, &gates, p.cues);
            if let (Some(max), false) = (p.max_appearance_distance, p.cues == CueMode::LocationOnly) {
                for (row, emb) in cost.iter_mut().zip(&embs) {
                    let Some(e) = emb else { continue };
                    for (cell, r) in row.iter_mut().zip(&reids) {
                        if r.valid && cosine_distance(e, &r.embedding) > max {
                            *cell = None;
                        }
                    }
                }
            }
            for (r, c) in hungarian(&cost) {
                matched[r] = true;
                det_track[c] = Some(active[r]);
            }
        }

        let mut records = Vec::new();
        for (j, det) in detections.iter().enumerate() {
            let idx = match det_track[j] {
                Some(t) => {
                    let tr = &mut self.tracklets[t];
                    tr.pose = det.pose.clone();
                    tr.frames_since_match = 0;
                    if det.reid.valid {
                        tr.embedding = Some(match tr.embedding.take() {
                            Some(old) => blend(&old, &det.reid.embedding, p.alpha),
                            None => det.reid.embedding.clone(),
                        });
                    }
                    t
                }
                None => {
                    self.tracklets.push(Tracklet {
                        id: self.next_id,
                        pose: det.pose.clone(),
                        embedding: det.reid.valid.then(|| det.reid.embedding.clone()),
                        frames_since_match: 0,
                        state: TrackState::Active,
                    });
                    self.next_id += 1;
                    self.tracklets.len() - 1
                }
            };
            records.push(TrackRecord {
                frame,
                track_id: self.tracklets[idx].id,
                joints: det.pose.to_arrays(),
                confidence: det.confidence,
            });
        }
        for (k, &t) in active.iter().enumerate() {
            if !matched[k] {
                let tr = &mut self.tracklets[t];
                tr.frames_since_match += 1;
                if tr.frames_since_match > p.max_missed_frames {
                    tr.state = TrackState::Inactive;
                }
            }
        }
        records.sort_by_key(|r| r.track_id);
        Ok(records)
    }
}

/// `normalize(α·old + (1−α)·new)`; keeps `old` if the blend vanishes.
pub fn blend(old: &[f32], new: &[f32], alpha: f32) -> Vec<f32> {
    let mut out: Vec<f32> = old
        .iter()
        .zip(new)
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect();
    if normalize_in_place(&mut out) {
        out
    } else {
        old.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pose_at(x: f64, y: f64) -> Pose3D {
        Pose3D::from_arrays(&[[x, y, 900.0], [x, y, 1500.0], [x + 100.0, y, 1000.0]])
    }

    fn det(x: f64, y: f64, emb: Option<Vec<f32>>) -> TrackInput {
        let (embedding, valid) = match emb {
            Some(e) => (e, true),
            None => (vec![0.0; 2], false),
        };
        TrackInput {
            pose: pose_at(x, y),
            confidence: 0.9,
            reid: FusedReid { embedding, valid },
        }
    }

    #[test]
    fn location_rows() {
        let t = pose_at(0.0, 0.0);
        let raw = vec![vec![
            pose_distance(&t, &pose_at(100.0, 0.0), DistanceMode::MeanJoint),
            pose_distance(&t, &pose_at(400.0, 0.0), DistanceMode::MeanJoint),
        ]];
        assert_eq!(row_normalize(&raw), vec![vec![0.25, 1.0]]);
        assert_eq!(row_normalize(&[vec![0.0]]), vec![vec![0.0]]);
        assert_eq!(row_normalize(&[vec![42.0]]), vec![vec![1.0]]);
        assert_eq!(pose_distance(&t, &t, DistanceMode::Pelvis), 0.0);
    }

    #[test]
    fn appearance_values_and_fallback() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]), 0.5);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]), 1.0);
        let bad = FusedReid {
            embedding: vec![0.0, 0.0],
            valid: false,
        };
        let good = FusedReid {
            embedding: vec![0.0, 1.0],
            valid: true,
        };
        let a = appearance_distance(
            &[Some(&[1.0, 0.0]), None],
            &[&bad, &good],
            &[vec![0.3, 0.4], vec![0.7, 0.8]],
        );
        assert_eq!(a, vec![vec![0.3, 0.5], vec![0.7, 0.8]]);
    }

    #[test]
    fn final_cost_examples() {
        let c = final_cost(
            &[vec![0.0, 0.2]],
            &[vec![0.0, 0.4]],
            &[vec![0.0, 100.0]],
            &[500.0],
            CueMode::Combined,
        );
        assert_eq!(c[0][0], Some(0.0));
        assert!((c[0][1].unwrap() - 0.3).abs() < 1e-12);
        let g = final_cost(&[vec![0.0]], &[vec![0.0]], &[vec![2000.0]], &[500.0], CueMode::Combined);
        assert_eq!(g[0][0], None);
    }

    #[test]
    fn first_frame_spawns_sequential_ids() {
        let mut t = Tracker::new(TrackerParams::default());
        let r = t
            .step(
                0,
                &[det(0.0, 0.0, None), det(3000.0, 0.0, None), det(6000.0, 0.0, None)],
            )
            .unwrap();
        assert_eq!(r.iter().map(|r| r.track_id).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(t.step(0, &[]).is_err());
    }

    #[test]
    fn inactivity_boundary() {
        let mut t = Tracker::new(TrackerParams::default());
        t.step(0, &[det(0.0, 0.0, None)]).unwrap();
        for f in 1..=30 {
            assert!(t.step(f, &[]).unwrap().is_empty());
        }
        assert_eq!(t.tracklets()[0].state, TrackState::Active);
        let r = t.step(31, &[det(0.0, 0.0, None)]).unwrap();
        assert_eq!(r[0].track_id, 1);

        let mut t = Tracker::new(TrackerParams::default());
        t.step(0, &[det(0.0, 0.0, None)]).unwrap();
        for f in 1..=31 {
            t.step(f, &[]).unwrap();
        }
        assert_eq!(t.tracklets()[0].state, TrackState::Inactive);
        let r = t.step(32, &[det(0.0, 0.0, None)]).unwrap();
        assert_eq!(r[0].track_id, 2);
    }

    #[test]
    fn alpha_one_freezes_embedding() {
        let mut t = Tracker::new(TrackerParams {
            alpha: 1.0,
            ..TrackerParams::default()
        });
        t.step(0, &[det(0.0, 0.0, Some(vec![1.0, 0.0]))]).unwrap();
        t.step(1, &[det(10.0, 0.0, Some(vec![0.0, 1.0]))]).unwrap();
        assert_eq!(t.tracklets()[0].embedding, Some(vec![1.0, 0.0]));

        let mut t = Tracker::new(TrackerParams::default());
        t.step(0, &[det(0.0, 0.0, Some(vec![1.0, 0.0]))]).unwrap();
        t.step(1, &[det(10.0, 0.0, Some(vec![0.0, 1.0]))]).unwrap();
        let e = t.tracklets()[0].embedding.clone().unwrap();
        let n = (0.81f32 + 0.01).sqrt();
        assert!((e[0] - 0.9 / n).abs() < 1e-6 && (e[1] - 0.1 / n).abs() < 1e-6);
    }

    #[test]
    fn appearance_resolves_ambiguous_location() {
        // two people move toward each other; location alone prefers the
        // crossed assignment, appearance keeps the ids
        let a = vec![1.0f32, 0.0];
        let b = vec![-1.0f32, 0.0];
        let mut t = Tracker::new(TrackerParams::default());
        t.step(0, &[det(0.0, 0.0, Some(a.clone())), det(300.0, 0.0, Some(b.clone()))])
            .unwrap();
        let r = t
            .step(1, &[det(100.0, 0.0, Some(b)), det(200.0, 0.0, Some(a))])
            .unwrap();
        assert_eq!(r[0].track_id, 1);
        assert_eq!(r[0].joints[0][0], 200.0);
        assert_eq!(r[1].joints[0][0], 100.0);

        let mut t = Tracker::new(TrackerParams {
            cues: CueMode::LocationOnly,
            ..TrackerParams::default()
        });
        t.step(0, &[det(0.0, 0.0, None), det(300.0, 0.0, None)]).unwrap();
        let r = t.step(1, &[det(100.0, 0.0, None), det(200.0, 0.0, None)]).unwrap();
        assert_eq!(r[0].joints[0][0], 100.0);
    }

    #[test]
    fn appearance_gate_starts_a_new_track() {
        let gated = TrackerParams {
            max_appearance_distance: Some(0.2),
            ..TrackerParams::default()
        };
        let mut t = Tracker::new(gated);
        t.step(0, &[det(0.0, 0.0, Some(vec![1.0, 0.0]))]).unwrap();
        let r = t.step(1, &[det(10.0, 0.0, Some(vec![0.0, 1.0]))]).unwrap();
        assert_eq!(r[0].track_id, 2);
        // location-only ignores the gate
        let mut t = Tracker::new(TrackerParams {
            cues: CueMode::LocationOnly,
            ..gated
        });
        t.step(0, &[det(0.0, 0.0, Some(vec![1.0, 0.0]))]).unwrap();
        let r = t.step(1, &[det(10.0, 0.0, Some(vec![0.0, 1.0]))]).unwrap();
        assert_eq!(r[0].track_id, 1);
        // invalid detection embeddings fall back to location and pass
        let mut t = Tracker::new(gated);
        t.step(0, &[det(0.0, 0.0, Some(vec![1.0, 0.0]))]).unwrap();
        let r = t.step(1, &[det(10.0, 0.0, None)]).unwrap();
        assert_eq!(r[0].track_id, 1);
        assert!(TrackerParams {
            max_appearance_distance: Some(1.5),
            ..gated
        }
        .validate()
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn separated_slow_persons_keep_ids(seed in any::<u64>(), n in 1usize..5, frames in 5usize..40) {
            let p = TrackerParams { cues: CueMode::LocationOnly, ..TrackerParams::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tracker::new(p);
            let base: Vec<Vector3<f64>> = (0..n).map(|i| Vector3::new(i as f64 * 3000.0, 0.0, 0.0)).collect();
            let mut pos = base.clone();
            let mut owner: Vec<Option<u64>> = vec![None; n];
            for f in 0..frames {
                for (i, q) in pos.iter_mut().enumerate() {
                    let step = Vector3::new(rng.random_range(-170.0..170.0), rng.random_range(-170.0..170.0), 0.0);
                    let next = *q + step;
                    if (next - base[i]).norm() < 700.0 {
                        *q = next;
                    }
                }
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                let dets: Vec<TrackInput> = order.iter().map(|&i| det(pos[i].x, pos[i].y, None)).collect();
                let recs = t.step(f as u32, &dets).unwrap();
                for r in recs {
                    let who = (0..n).find(|&i| (r.joints[0][0] - pos[i].x).abs() < 1e-9 && (r.joints[0][1] - pos[i].y).abs() < 1e-9).unwrap();
                    match owner[who] {
                        None => owner[who] = Some(r.track_id),
                        Some(id) => prop_assert_eq!(id, r.track_id),
                    }
                }
            }
        }

        #[test]
        fn ids_strictly_increase_and_step_is_deterministic(seed in any::<u64>()) {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut t = Tracker::new(TrackerParams::default());
                let mut out = Vec::new();
                for f in 0..20u32 {
                    let k = rng.random_range(0..4);
                    let dets: Vec<TrackInput> = (0..k)
                        .map(|_| {
                            let e = vec![rng.random_range(-1.0..1.0f32), rng.random_range(-1.0..1.0f32)];
                            let mut e2 = e.clone();
                            let ok = normalize_in_place(&mut e2);
                            det(rng.random_range(0.0..3000.0), rng.random_range(0.0..3000.0), ok.then_some(e2))
                        })
                        .collect();
                    out.extend(t.step(f, &dets).unwrap());
                }
                (out, t.tracklets().iter().map(|t| t.id).collect::<Vec<_>>())
            };
            let (a, ids) = run();
            let (b, _) = run();
            prop_assert_eq!(&a, &b);
            prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
