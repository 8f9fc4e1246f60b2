//! Detection and 3D pose evaluation.
//!
//! Detection quality is all-point interpolated average precision. Pose
//! quality is measured after pairing detections with ground truths by box
//! overlap: each predicted (normalized, root-relative) pose is rescaled by
//! its ground truth's total bone length and placed at the ground-truth root
//! before measuring joint errors in millimeters. Missed people count every
//! joint as incorrect in 3DPCK and are left out of MPJPE.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decode::DetectionRecord;
use crate::error::{Error, Result};
use crate::geometry::{iou, Box2D, Point3D};
use crate::par;
use crate::synthdata::{SceneSample, Skeleton};

pub const AP_IOU_THRESHOLD: f64 = 0.5;
pub const PAIRING_MIN_IOU: f64 = 0.1;
pub const PCK_THRESHOLD_MM: f64 = 150.0;

/// Root-depth bins in meters, `[lo, hi)`.
pub const DISTANCE_BINS: [(f64, f64); 5] = [
    (0.0, 10.0),
    (10.0, 20.0),
    (20.0, 30.0),
    (30.0, 40.0),
    (40.0, f64::INFINITY),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    /// False when there are no ground truths; `ap` is then 0.
    pub defined: bool,
    pub n_ground_truths: usize,
    pub n_detections: usize,
    pub true_positives: usize,
}

/// All-point interpolated AP. `dets[i]` and `gts[i]` belong to image `i`;
/// detections are `(score, box)`.
pub fn average_precision(dets: &[Vec<(f64, Box2D)>], gts: &[Vec<Box2D>], iou_threshold: f64) -> Result<ApResult> {
    if dets.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} detection images vs {} ground-truth images",
            dets.len(),
            gts.len()
        )));
    }
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, d)| (0..d.len()).map(move |k| (i, k)))
        .collect();
    order.sort_by(|&(ia, ka), &(ib, kb)| dets[ib][kb].0.total_cmp(&dets[ia][ka].0).then((ia, ka).cmp(&(ib, kb))));

    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(order.len());
    for &(i, k) in &order {
        let b = &dets[i][k].1;
        let best = gts[i]
            .iter()
            .enumerate()
            .filter(|(g, _)| !used[i][*g])
            .map(|(g, gb)| (g, iou(b, gb)))
            .fold(None, |acc: Option<(usize, f64)>, (g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        match best {
            Some((g, v)) if v >= iou_threshold => {
                used[i][g] = true;
                tp_flags.push(true);
            }
            _ => tp_flags.push(false),
        }
    }
    let tp_total = tp_flags.iter().filter(|&&t| t).count();
    if n_gt == 0 {
        return Ok(ApResult {
            ap: 0.0,
            defined: false,
            n_ground_truths: 0,
            n_detections: order.len(),
            true_positives: 0,
        });
    }
    Ok(ApResult {
        ap: ap_from_flags(&tp_flags, n_gt),
        defined: true,
        n_ground_truths: n_gt,
        n_detections: order.len(),
        true_positives: tp_total,
    })
}

/// Area under the precision envelope for ranked TP/FP flags.
pub fn ap_from_flags(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for (rank, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    // precision envelope from the right
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &points {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    /// `(detection, ground_truth)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub missed: Vec<usize>,
}

/// Greedy pairing by descending box IoU (ties by detection then ground-truth
/// index); pairs need IoU above [`PAIRING_MIN_IOU`].
pub fn match_for_pose_eval(dets: &[Box2D], gts: &[Box2D]) -> Pairing {
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (d, db) in dets.iter().enumerate() {
        for (g, gb) in gts.iter().enumerate() {
            let v = iou(db, gb);
            if v > PAIRING_MIN_IOU {
                cand.push((v, d, g));
            }
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut det_used = vec![false; dets.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for (_, d, g) in cand {
        if !det_used[d] && !gt_used[g] {
            det_used[d] = true;
            gt_used[g] = true;
            pairs.push((d, g));
        }
    }
    pairs.sort_by_key(|&(_, g)| g);
    Pairing {
        pairs,
        missed: (0..gts.len()).filter(|&g| !gt_used[g]).collect(),
    }
}

/// A ground-truth person and, when detected, the paired prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSubject {
    /// Metric camera-frame joints, meters.
    pub gt_pose3d: Vec<Point3D>,
    /// Root depth, meters.
    pub depth: f64,
    /// Normalized root-relative prediction; `None` for a missed person.
    pub pred_pose3d: Option<Vec<Point3D>>,
}

/// Prediction rescaled by the ground truth's bone-length sum and moved to
/// the ground-truth root.
pub fn rescale_to_ground_truth(pred: &[Point3D], gt: &[Point3D], skeleton: &Skeleton) -> Vec<Point3D> {
    let scale = skeleton.bone_length_sum(gt);
    let root = gt[skeleton.root_index()];
    let pred_root = pred[skeleton.root_index()];
    pred.iter().map(|&p| (p - pred_root) * scale + root).collect()
}

/// Per-joint errors in millimeters of a paired subject.
pub fn joint_errors_mm(pred: &[Point3D], gt: &[Point3D], skeleton: &Skeleton) -> Vec<f64> {
    rescale_to_ground_truth(pred, gt, skeleton)
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p - g).norm() * 1000.0)
        .collect()
}

/// Mean joint error over detected subjects; `None` when none were detected.
pub fn mpjpe(subjects: &[EvalSubject], skeleton: &Skeleton) -> Option<f64> {
    let errors: Vec<f64> = subjects
        .iter()
        .filter_map(|s| s.pred_pose3d.as_ref().map(|p| joint_errors_mm(p, &s.gt_pose3d, skeleton)))
        .flatten()
        .collect();
    (!errors.is_empty()).then(|| par::ordered_sum(errors.iter().copied()) / errors.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub label: String,
    pub min_m: f64,
    pub max_m: Option<f64>,
    pub n_subjects: usize,
    /// `None` when the bin is empty.
    pub pck: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckResult {
    pub pck: f64,
    pub per_joint: Vec<f64>,
    pub per_distance_bin: Vec<DistanceBin>,
}

fn bin_label(lo: f64, hi: f64) -> String {
    if lo == 0.0 {
        format!("<{hi}")
    } else if hi.is_infinite() {
        format!(">{lo}")
    } else {
        format!("{lo}-{hi}")
    }
}

/// 3DPCK in percent: a joint is correct when its error is below
/// `threshold_mm`; every joint of a missed subject is incorrect.
pub fn pck3d(subjects: &[EvalSubject], skeleton: &Skeleton, threshold_mm: f64) -> PckResult {
    let nk = skeleton.n_joints();
    let correct: Vec<Vec<bool>> = par::map_slice(subjects, |s| match &s.pred_pose3d {
        Some(p) => joint_errors_mm(p, &s.gt_pose3d, skeleton)
            .iter()
            .map(|&e| e < threshold_mm)
            .collect(),
        None => vec![false; nk],
    });
    let pct = |hits: usize, total: usize| if total == 0 { 0.0 } else { 100.0 * hits as f64 / total as f64 };
    let total_hits: usize = correct.iter().flatten().filter(|&&c| c).count();
    let per_joint = (0..nk)
        .map(|k| pct(correct.iter().filter(|c| c[k]).count(), subjects.len()))
        .collect();
    let per_distance_bin = DISTANCE_BINS
        .iter()
        .map(|&(lo, hi)| {
            let members: Vec<usize> = (0..subjects.len())
                .filter(|&s| subjects[s].depth >= lo && subjects[s].depth < hi)
                .collect();
            let hits: usize = members.iter().map(|&s| correct[s].iter().filter(|&&c| c).count()).sum();
            DistanceBin {
                label: bin_label(lo, hi),
                min_m: lo,
                max_m: hi.is_finite().then_some(hi),
                n_subjects: members.len(),
                pck: (!members.is_empty()).then(|| pct(hits, members.len() * nk)),
            }
        })
        .collect();
    PckResult {
        pck: pct(total_hits, subjects.len() * nk),
        per_joint,
        per_distance_bin,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub detections: usize,
    pub ground_truths: usize,
    pub matched: usize,
    pub misses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPck {
    pub joint: String,
    pub pck: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap_defined: bool,
    pub mpjpe_mm: Option<f64>,
    pub pck3d: f64,
    pub pck_threshold_mm: f64,
    pub pck3d_per_joint: Vec<JointPck>,
    pub pck3d_per_distance_bin: Vec<DistanceBin>,
    pub counts: EvalCounts,
}

/// Evaluates detection records against a dataset.
pub fn evaluate(
    detections: &[DetectionRecord],
    dataset: &[SceneSample],
    skeleton: &Skeleton,
    threshold_mm: f64,
) -> Result<EvalReport> {
    let mut by_image: BTreeMap<u64, Vec<&DetectionRecord>> = BTreeMap::new();
    for d in detections {
        by_image.entry(d.image_id).or_default().push(d);
    }
    let index: BTreeMap<u64, usize> = dataset.iter().enumerate().map(|(k, s)| (s.image_id, k)).collect();
    if let Some(id) = by_image.keys().find(|id| !index.contains_key(id)) {
        return Err(Error::InvalidInput(format!("detections reference unknown image {id}")));
    }
    let nk = skeleton.n_joints();
    for d in detections {
        if d.pose3d.len() != nk {
            return Err(Error::ShapeMismatch(format!(
                "detection on image {} has {} joints, skeleton {nk}",
                d.image_id,
                d.pose3d.len()
            )));
        }
    }
    for s in dataset {
        if s.people.iter().any(|p| p.pose3d.len() != nk) {
            return Err(Error::ShapeMismatch(format!("image {} joint count differs from skeleton", s.image_id)));
        }
    }

    let empty = Vec::new();
    let per_image: Vec<(Vec<(f64, Box2D)>, Vec<Box2D>, Vec<EvalSubject>)> = par::map_slice(dataset, |scene| {
        let dets = by_image.get(&scene.image_id).unwrap_or(&empty);
        let det_boxes: Vec<Box2D> = dets.iter().map(|d| d.bbox).collect();
        let gt_boxes: Vec<Box2D> = scene.people.iter().map(|p| p.bbox).collect();
        let pairing = match_for_pose_eval(&det_boxes, &gt_boxes);
        let mut pred_for_gt: Vec<Option<Vec<Point3D>>> = vec![None; gt_boxes.len()];
        for &(d, g) in &pairing.pairs {
            pred_for_gt[g] = Some(dets[d].pose3d.clone());
        }
        let subjects = scene
            .people
            .iter()
            .zip(pred_for_gt)
            .map(|(p, pred)| EvalSubject {
                gt_pose3d: p.pose3d.clone(),
                depth: p.depth,
                pred_pose3d: pred,
            })
            .collect();
        (dets.iter().map(|d| (d.score, d.bbox)).collect(), gt_boxes, subjects)
    });

    let mut ap_dets = Vec::with_capacity(per_image.len());
    let mut ap_gts = Vec::with_capacity(per_image.len());
    let mut subjects = Vec::new();
    for (d, g, s) in per_image {
        ap_dets.push(d);
        ap_gts.push(g);
        subjects.extend(s);
    }
    let ap = average_precision(&ap_dets, &ap_gts, AP_IOU_THRESHOLD)?;
    let pck = pck3d(&subjects, skeleton, threshold_mm);
    let matched = subjects.iter().filter(|s| s.pred_pose3d.is_some()).count();
    Ok(EvalReport {
        ap: ap.ap,
        ap_defined: ap.defined,
        mpjpe_mm: mpjpe(&subjects, skeleton),
        pck3d: pck.pck,
        pck_threshold_mm: threshold_mm,
        pck3d_per_joint: skeleton
            .names()
            .iter()
            .zip(&pck.per_joint)
            .map(|(n, &v)| JointPck {
                joint: n.clone(),
                pck: v,
            })
            .collect(),
        pck3d_per_distance_bin: pck.per_distance_bin,
        counts: EvalCounts {
            detections: ap.n_detections,
            ground_truths: subjects.len(),
            matched,
            misses: subjects.len() - matched,
        },
    })
}

/// Plain-text distance-wise and joint-wise 3DPCK tables.
pub fn render_tables(report: &EvalReport) -> String {
    let mut out = String::new();
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
    let _ = writeln!(out, "AP@0.5: {:.1}", 100.0 * report.ap);
    let _ = writeln!(out, "MPJPE (mm): {}", fmt(report.mpjpe_mm));
    let _ = writeln!(out);
    let _ = writeln!(out, "Distance-wise 3DPCK");
    let mut header = vec!["Dist. (m)".to_string()];
    let mut row = vec!["3DPCK".to_string()];
    for b in &report.pck3d_per_distance_bin {
        header.push(b.label.clone());
        row.push(fmt(b.pck));
    }
    header.push("All".into());
    row.push(format!("{:.1}", report.pck3d));
    write_table(&mut out, &[header, row]);
    let _ = writeln!(out);
    let _ = writeln!(out, "Joint-wise 3DPCK");
    let mut header = vec!["Joint".to_string()];
    let mut row = vec!["3DPCK".to_string()];
    for j in &report.pck3d_per_joint {
        header.push(j.joint.clone());
        row.push(format!("{:.1}", j.pck));
    }
    write_table(&mut out, &[header, row]);
    out
}

fn write_table(out: &mut String, rows: &[Vec<String>]) {
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    for r in rows {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(c, &w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
}
