//! Pose estimation and tracking metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::error::{Error, Result};
use crate::geometry::Pose3D;

#[derive(Debug, Clone, PartialEq)]
pub struct GtPose {
    pub id: u64,
    pub pose: Pose3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredPose {
    pub id: u64,
    pub pose: Pose3D,
    pub confidence: f64,
}

/// Ground truth and predictions of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalFrame {
    pub frame: u32,
    pub gt: Vec<GtPose>,
    pub pred: Vec<PredPose>,
}

impl EvalFrame {
    fn validate(&self) -> Result<()> {
        let mut g = BTreeSet::new();
        if !self.gt.iter().all(|p| g.insert(p.id)) {
            return Err(Error::Data {
                frame: self.frame,
                message: "duplicate ground-truth id".into(),
            });
        }
        let mut h = BTreeSet::new();
        if !self.pred.iter().all(|p| h.insert(p.id)) {
            return Err(Error::Data {
                frame: self.frame,
                message: "duplicate track id".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricParams {
    /// A limb is correct when both endpoint errors are within this
    /// fraction of its ground-truth length.
    pub pcp_fraction: f64,
    /// Joint match gate for the tracking metrics (mm).
    pub mot_threshold_mm: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            pcp_fraction: 0.5,
            mot_threshold_mm: 150.0,
        }
    }
}

pub const DEFAULT_AP_THRESHOLDS: [f64; 6] = [25.0, 50.0, 75.0, 100.0, 125.0, 150.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcpReport {
    /// Fraction of correct limbs per ground-truth id.
    pub per_actor: BTreeMap<u64, f64>,
    pub average: f64,
}

/// PCP against each ground truth's closest prediction (by mean joint
/// distance). False positives are not penalized.
pub fn pcp3d(frames: &[EvalFrame], limbs: &[(usize, usize)], fraction: f64) -> PcpReport {
    let mut counts: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for f in frames {
        for g in &f.gt {
            let e = counts.entry(g.id).or_default();
            e.1 += limbs.len();
            let closest = f
                .pred
                .iter()
                .map(|p| (g.pose.mpjpe(&p.pose), p))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            let Some((_, p)) = closest else { continue };
            for &(a, b) in limbs {
                let len = (g.pose.joints[a] - g.pose.joints[b]).norm();
                let ea = (g.pose.joints[a] - p.pose.joints[a]).norm();
                let eb = (g.pose.joints[b] - p.pose.joints[b]).norm();
                if ea <= fraction * len && eb <= fraction * len {
                    e.0 += 1;
                }
            }
        }
    }
    let per_actor: BTreeMap<u64, f64> = counts
        .iter()
        .map(|(&id, &(ok, n))| (id, if n == 0 { 0.0 } else { ok as f64 / n as f64 }))
        .collect();
    let average = if per_actor.is_empty() {
        0.0
    } else {
        per_actor.values().sum::<f64>() / per_actor.len() as f64
    };
    PcpReport { per_actor, average }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// `(K, AP_K)` pairs in input order.
    pub ap: Vec<(f64, f64)>,
    /// Mean MPJPE of the true positives at the largest K.
    pub mpjpe: Option<f64>,
}

/// Area under the precision envelope over all recall points.
pub fn average_precision(tp_flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &t) in tp_flags.iter().enumerate() {
        tp += t as usize;
        recall.push(tp as f64 / total_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    let mut mrec = vec![0.0];
    mrec.extend(&recall);
    mrec.push(1.0);
    let mut mpre = vec![0.0];
    mpre.extend(&precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (0..mrec.len() - 1)
        .filter(|&i| mrec[i + 1] != mrec[i])
        .map(|i| (mrec[i + 1] - mrec[i]) * mpre[i + 1])
        .sum()
}

/// AP_K with predictions ranked by confidence. Each prediction is compared
/// with its nearest ground truth in the frame; it is a true positive when
/// that distance is below K and no higher-ranked prediction claimed the
/// same ground truth.
pub fn ap_and_mpjpe(frames: &[EvalFrame], ks: &[f64]) -> ApReport {
    let total_gt: usize = frames.iter().map(|f| f.gt.len()).sum();
    // (confidence, frame slot, pred slot, nearest gt slot, distance)
    let mut ranked: Vec<(f64, usize, usize, Option<usize>, f64)> = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        for (pi, p) in f.pred.iter().enumerate() {
            let nearest =
                f.gt.iter()
                    .enumerate()
                    .map(|(gi, g)| (gi, p.pose.mpjpe(&g.pose)))
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let (g, d) = nearest.map_or((None, f64::INFINITY), |(g, d)| (Some(g), d));
            ranked.push((p.confidence, fi, pi, g, d));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let kmax = ks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut mpjpe = None;
    let ap = ks
        .iter()
        .map(|&k| {
            let mut claimed = BTreeSet::new();
            let mut errors = Vec::new();
            let flags: Vec<bool> = ranked
                .iter()
                .map(|&(_, fi, _, g, d)| match g {
                    Some(g) if d < k && claimed.insert((fi, g)) => {
                        errors.push(d);
                        true
                    }
                    _ => false,
                })
                .collect();
            if k == kmax && !errors.is_empty() {
                mpjpe = Some(errors.iter().sum::<f64>() / errors.len() as f64);
            }
            (k, average_precision(&flags, total_gt))
        })
        .collect();
    ApReport { ap, mpjpe }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointMot {
    pub mota: f64,
    pub idf1: f64,
    pub id_switches: u64,
    pub false_negatives: u64,
    pub false_positives: u64,
    pub gt_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotReport {
    /// Mean over joints.
    pub mota: f64,
    /// Mean over joints.
    pub idf1: f64,
    /// Sum over joints.
    pub id_switches: u64,
    pub per_joint: Vec<JointMot>,
}

/// Frame-wise gated matching of one joint: `(gt slot, pred slot)` pairs.
fn match_joint(f: &EvalFrame, j: usize, threshold: f64) -> Vec<(usize, usize)> {
    let cost: Vec<Vec<Option<f64>>> =
        f.gt.iter()
            .map(|g| {
                f.pred
                    .iter()
                    .map(|p| {
                        let d = (g.pose.joints[j] - p.pose.joints[j]).norm();
                        (d <= threshold).then_some(d)
                    })
                    .collect()
            })
            .collect();
    hungarian(&cost)
}

/// Per-joint CLEAR-MOT accuracy, identity switches and IDF1.
///
/// MOTA is `1 - (FN + FP + IDSW) / GT` (with GT at least 1). An identity
/// switch is counted when a ground truth is matched to a different track
/// than at its previous match. IDF1 uses the one-to-one assignment of
/// ground-truth ids to track ids that maximizes the number of frames in
/// which the pair is within the gate.
pub fn mot_per_joint(frames: &[EvalFrame], num_joints: usize, threshold: f64) -> Result<MotReport> {
    if frames.is_empty() {
        return Err(Error::contract("tracking metrics need at least one frame"));
    }
    for f in frames {
        f.validate()?;
    }
    let per_joint: Vec<JointMot> = (0..num_joints)
        .map(|j| {
            let (mut fn_, mut fp, mut sw, mut gt_n, mut pred_n) = (0u64, 0u64, 0u64, 0u64, 0u64);
            let mut last: BTreeMap<u64, u64> = BTreeMap::new();
            let mut overlap: BTreeMap<(u64, u64), u64> = BTreeMap::new();
            let mut gt_ids = BTreeSet::new();
            let mut pred_ids = BTreeSet::new();
            for f in frames {
                let m = match_joint(f, j, threshold);
                gt_n += f.gt.len() as u64;
                pred_n += f.pred.len() as u64;
                fn_ += (f.gt.len() - m.len()) as u64;
                fp += (f.pred.len() - m.len()) as u64;
                for &(g, p) in &m {
                    let (gid, pid) = (f.gt[g].id, f.pred[p].id);
                    if let Some(prev) = last.insert(gid, pid) {
                        if prev != pid {
                            sw += 1;
                        }
                    }
                }
                for g in &f.gt {
                    gt_ids.insert(g.id);
                    for p in &f.pred {
                        pred_ids.insert(p.id);
                        if (g.pose.joints[j] - p.pose.joints[j]).norm() <= threshold {
                            *overlap.entry((g.id, p.id)).or_default() += 1;
                        }
                    }
                }
            }
            let idtp = max_identity_overlap(&gt_ids, &pred_ids, &overlap);
            let idf1 = if gt_n + pred_n == 0 {
                1.0
            } else {
                2.0 * idtp as f64 / (gt_n + pred_n) as f64
            };
            JointMot {
                mota: 1.0 - (fn_ + fp + sw) as f64 / gt_n.max(1) as f64,
                idf1,
                id_switches: sw,
                false_negatives: fn_,
                false_positives: fp,
                gt_count: gt_n,
            }
        })
        .collect();
    let n = per_joint.len().max(1) as f64;
    Ok(MotReport {
        mota: per_joint.iter().map(|m| m.mota).sum::<f64>() / n,
        idf1: per_joint.iter().map(|m| m.idf1).sum::<f64>() / n,
        id_switches: per_joint.iter().map(|m| m.id_switches).sum(),
        per_joint,
    })
}

fn max_identity_overlap(gt: &BTreeSet<u64>, pred: &BTreeSet<u64>, overlap: &BTreeMap<(u64, u64), u64>) -> u64 {
    let g: Vec<u64> = gt.iter().copied().collect();
    let p: Vec<u64> = pred.iter().copied().collect();
    let cost: Vec<Vec<Option<f64>>> = g
        .iter()
        .map(|a| {
            p.iter()
                .map(|b| Some(-(overlap.get(&(*a, *b)).copied().unwrap_or(0) as f64)))
                .collect()
        })
        .collect();
    hungarian(&cost)
        .iter()
        .map(|&(r, c)| overlap.get(&(g[r], p[c])).copied().unwrap_or(0))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    pub pcp3d: PcpReport,
    pub ap: Vec<(f64, f64)>,
    pub mpjpe_mm: Option<f64>,
    pub mota: f64,
    pub idf1: f64,
    pub id_switches: u64,
    pub per_joint: Vec<JointMot>,
}

pub fn evaluate(
    frames: &[EvalFrame],
    limbs: &[(usize, usize)],
    num_joints: usize,
    params: &MetricParams,
    ks: &[f64],
) -> Result<MetricsReport> {
    let mot = mot_per_joint(frames, num_joints, params.mot_threshold_mm)?;
    let ap = ap_and_mpjpe(frames, ks);
    Ok(MetricsReport {
        frames: frames.len(),
        pcp3d: pcp3d(frames, limbs, params.pcp_fraction),
        ap: ap.ap,
        mpjpe_mm: ap.mpjpe,
        mota: mot.mota,
        idf1: mot.idf1,
        id_switches: mot.id_switches,
        per_joint: mot.per_joint,
    })
}

impl MetricsReport {
    /// Aligned plain-text table; rates are shown as percentages.
    pub fn to_table(&self) -> String {
        let mut head = vec!["Average PCP3D".to_string(), "MPJPE".to_string()];
        let mut row = vec![
            format!("{:.2}", 100.0 * self.pcp3d.average),
            self.mpjpe_mm.map_or("-".to_string(), |m| format!("{m:.2}")),
        ];
        for (k, ap) in &self.ap {
            head.push(format!("AP{k}"));
            row.push(format!("{:.2}", 100.0 * ap));
        }
        head.extend(["MOTA".into(), "ID Switch".into(), "IDF1".into()]);
        row.push(format!("{:.2}", 100.0 * self.mota));
        row.push(self.id_switches.to_string());
        row.push(format!("{:.2}", 100.0 * self.idf1));
        let widths: Vec<usize> = head.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
        };
        let mut out = String::new();
        let _ = writeln!(out, "{}", line(&head));
        let _ = writeln!(
            out,
            "{}",
            widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-")
        );
        let _ = writeln!(out, "{}", line(&row));
        if !self.pcp3d.per_actor.is_empty() {
            let _ = writeln!(out);
            for (id, v) in &self.pcp3d.per_actor {
                let _ = writeln!(out, "actor {id:>4}  PCP3D {:>6.2}", 100.0 * v);
            }
        }
        out
    }
}
