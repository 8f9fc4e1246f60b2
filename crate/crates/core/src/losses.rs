//! Pixel-wise losses, pose-aware readout labels and the automatically
//! weighted objective, with hand-derived gradients.
//!
//! Every trainable weight is stored as `s = ln λ`. Each task contributes
//!
//! ```text
//! λ_t / norm_t · Σ_a λ_a · Σ_ij L(i,j,a)  −  s_t  −  mean_a s_a
//! ```
//!
//! with `norm = H·W·N_A` for classification, `N⁺` for box localisation and
//! `N_K·N⁺` for the two pose terms (whose per-anchor weights are per joint).
//! Readout labels are recomputed from the current 2D predictions and treated
//! as constants when differentiating.

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorGrid, MatchResult, POSITIVE_PONO};
use crate::error::{Error, Result};
use crate::geometry::{
    decode_box, decode_box_with_jacobian, image_to_anchor, iou, iou_with_grad, unit_square_iou,
    unit_square_iou_with_grad, Point2D, Point3D,
};
use crate::par;
use crate::synthdata::Skeleton;

/// Readout label threshold on `pono × overlap`.
pub const READOUT_THRESHOLD: f64 = 0.5;

/// Raw network outputs for one image, flat row-major over
/// `(i, j, a[, k][, c])`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTensors {
    pub height: usize,
    pub width: usize,
    pub n_anchors: usize,
    pub n_joints: usize,
    pub cls_logits: Vec<f64>,
    pub box_offsets: Vec<f64>,
    pub pose2d: Vec<f64>,
    pub pose3d: Vec<f64>,
}

impl PredictionTensors {
    pub fn zeros(height: usize, width: usize, n_anchors: usize, n_joints: usize) -> Self {
        let n = height * width * n_anchors;
        PredictionTensors {
            height,
            width,
            n_anchors,
            n_joints,
            cls_logits: vec![0.0; n],
            box_offsets: vec![0.0; n * 4],
            pose2d: vec![0.0; n * n_joints * 2],
            pose3d: vec![0.0; n * n_joints * 3],
        }
    }

    pub fn for_grid(grid: &AnchorGrid, n_joints: usize) -> Self {
        Self::zeros(grid.height(), grid.width(), grid.n_anchors(), n_joints)
    }

    /// Number of anchors.
    pub fn len(&self) -> usize {
        self.cls_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cls_logits.is_empty()
    }

    /// Total number of scalar outputs.
    pub fn n_values(&self) -> usize {
        self.cls_logits.len() + self.box_offsets.len() + self.pose2d.len() + self.pose3d.len()
    }

    pub fn check_shape(&self, grid: &AnchorGrid, n_joints: usize) -> Result<()> {
        let n = grid.len();
        if self.height != grid.height()
            || self.width != grid.width()
            || self.n_anchors != grid.n_anchors()
            || self.n_joints != n_joints
            || self.cls_logits.len() != n
            || self.box_offsets.len() != n * 4
            || self.pose2d.len() != n * n_joints * 2
            || self.pose3d.len() != n * n_joints * 3
        {
            return Err(Error::ShapeMismatch(format!(
                "predictions {}x{}x{} with {} joints do not fit grid {}x{}x{} with {} joints",
                self.height,
                self.width,
                self.n_anchors,
                self.n_joints,
                grid.height(),
                grid.width(),
                grid.n_anchors(),
                n_joints
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// All outputs in storage order: logits, offsets, 2D, 3D.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.cls_logits
            .iter()
            .chain(&self.box_offsets)
            .chain(&self.pose2d)
            .chain(&self.pose3d)
            .copied()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.cls_logits
            .iter_mut()
            .chain(self.box_offsets.iter_mut())
            .chain(self.pose2d.iter_mut())
            .chain(self.pose3d.iter_mut())
    }

    /// Overwrites every output from `flat` (storage order).
    pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_values() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a tensor of {}",
                flat.len(),
                self.n_values()
            )));
        }
        for (dst, &src) in self.values_mut().zip(flat) {
            *dst = src;
        }
        Ok(())
    }

    pub fn offsets(&self, idx: usize) -> [f64; 4] {
        let o = &self.box_offsets[idx * 4..idx * 4 + 4];
        [o[0], o[1], o[2], o[3]]
    }

    pub fn set_offsets(&mut self, idx: usize, t: [f64; 4]) {
        self.box_offsets[idx * 4..idx * 4 + 4].copy_from_slice(&t);
    }

    pub fn joint2d(&self, idx: usize, k: usize) -> Point2D {
        let o = (idx * self.n_joints + k) * 2;
        Point2D::new(self.pose2d[o], self.pose2d[o + 1])
    }

    pub fn set_joint2d(&mut self, idx: usize, k: usize, p: Point2D) {
        let o = (idx * self.n_joints + k) * 2;
        self.pose2d[o] = p.x;
        self.pose2d[o + 1] = p.y;
    }

    pub fn joint3d(&self, idx: usize, k: usize) -> Point3D {
        let o = (idx * self.n_joints + k) * 3;
        Point3D::new(self.pose3d[o], self.pose3d[o + 1], self.pose3d[o + 2])
    }

    pub fn set_joint3d(&mut self, idx: usize, k: usize, p: Point3D) {
        let o = (idx * self.n_joints + k) * 3;
        self.pose3d[o] = p.x;
        self.pose3d[o + 1] = p.y;
        self.pose3d[o + 2] = p.z;
    }
}

/// Index of each task in [`LossWeights`]' task block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Cls = 0,
    Loc = 1,
    Pose2d = 2,
    Pose3d = 3,
}

/// Log-weights `s = ln λ`: 4 task weights, per-anchor classification and
/// localisation weights, per-(anchor, joint) 2D and 3D weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub n_anchors: usize,
    pub n_joints: usize,
    /// `[task(4) | anchor_cls(N_A) | anchor_loc(N_A) | joint_2d(N_A·N_K) | joint_3d(N_A·N_K)]`
    pub values: Vec<f64>,
}

impl LossWeights {
    /// All λ = 1.
    pub fn ones(n_anchors: usize, n_joints: usize) -> Self {
        LossWeights {
            n_anchors,
            n_joints,
            values: vec![0.0; 4 + 2 * n_anchors + 2 * n_anchors * n_joints],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_shape(&self, n_anchors: usize, n_joints: usize) -> Result<()> {
        if self.n_anchors != n_anchors
            || self.n_joints != n_joints
            || self.values.len() != 4 + 2 * n_anchors + 2 * n_anchors * n_joints
        {
            return Err(Error::ShapeMismatch(format!(
                "loss weights for {}x{} do not fit {}x{}",
                self.n_anchors, self.n_joints, n_anchors, n_joints
            )));
        }
        Ok(())
    }

    pub fn task_index(t: Task) -> usize {
        t as usize
    }

    pub fn anchor_cls_index(&self, a: usize) -> usize {
        4 + a
    }

    pub fn anchor_loc_index(&self, a: usize) -> usize {
        4 + self.n_anchors + a
    }

    pub fn joint_2d_index(&self, a: usize, k: usize) -> usize {
        4 + 2 * self.n_anchors + a * self.n_joints + k
    }

    pub fn joint_3d_index(&self, a: usize, k: usize) -> usize {
        4 + 2 * self.n_anchors + self.n_anchors * self.n_joints + a * self.n_joints + k
    }

    pub fn s_task(&self, t: Task) -> f64 {
        self.values[t as usize]
    }

    pub fn lambda_task(&self, t: Task) -> f64 {
        self.s_task(t).exp()
    }

    pub fn lambdas(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(|s| s.exp())
    }
}

/// Loss values of one evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub loc: f64,
    pub pose2d: f64,
    pub pose3d: f64,
    pub total: f64,
    /// Unweighted sums of the pixel-wise losses.
    pub raw_cls: f64,
    pub raw_loc: f64,
    pub raw_pose2d: f64,
    pub raw_pose3d: f64,
    /// `−s_t − mean s_a` parts of each task term.
    pub reg_cls: f64,
    pub reg_loc: f64,
    pub reg_pose2d: f64,
    pub reg_pose3d: f64,
    pub n_positive: usize,
    pub n_readout: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.cls,
            self.loc,
            self.pose2d,
            self.pose3d,
            self.total,
            self.raw_cls,
            self.raw_loc,
            self.raw_pose2d,
            self.raw_pose3d,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, for diagnostics.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("cls", self.cls),
            ("loc", self.loc),
            ("pose2d", self.pose2d),
            ("pose3d", self.pose3d),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Gradients of the total objective.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub breakdown: LossBreakdown,
    pub pred: PredictionTensors,
    /// Same layout as [`LossWeights::values`].
    pub weights: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Root-relative copy of `pose` scaled so the skeleton's bone lengths sum to 1.
pub fn normalize_pose3d(pose: &[Point3D], skeleton: &Skeleton) -> Result<Vec<Point3D>> {
    if pose.len() != skeleton.n_joints() {
        return Err(Error::ShapeMismatch(format!(
            "pose has {} joints, skeleton {}",
            pose.len(),
            skeleton.n_joints()
        )));
    }
    let root = pose[skeleton.root_index()];
    let total = skeleton.bone_length_sum(pose);
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Degenerate(format!("pose has total bone length {total}")));
    }
    Ok(pose.iter().map(|&p| (p - root) * (1.0 / total)).collect())
}

/// `BCE(y, σ(z))` in the overflow-free logit form, and its derivative in `z`.
pub fn bce_with_logits(z: f64, label: bool) -> (f64, f64) {
    let y = if label { 1.0 } else { 0.0 };
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - y)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Localisation loss per anchor plus the predicted-box overlap `Ô` (the
/// overlap is reported for every matched anchor, the loss only at positives).
#[derive(Debug, Clone, PartialEq)]
pub struct LocLossMap {
    pub loss: Vec<f64>,
    pub overlap: Vec<f64>,
}

pub fn loc_loss_map(pred: &PredictionTensors, m: &MatchResult, grid: &AnchorGrid) -> LocLossMap {
    let cells: Vec<(f64, f64)> = par::map_range(m.len(), |idx| match m.matched_box(idx) {
        Some(gt) => {
            let o = iou(gt, &decode_box(&grid.anchor_flat(idx), &pred.offsets(idx)));
            let l = if m.positive_mask[idx] { (1.0 - o) * (1.0 - o) } else { 0.0 };
            (l, o)
        }
        None => (0.0, 0.0),
    });
    LocLossMap {
        loss: cells.iter().map(|c| c.0).collect(),
        overlap: cells.iter().map(|c| c.1).collect(),
    }
}

/// 2D joint losses per `(anchor, joint)`, per-joint overlaps, and the
/// per-anchor mean overlap over the matched person's visible joints.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose2dLossMap {
    pub loss: Vec<f64>,
    pub overlap: Vec<f64>,
    pub mean_overlap: Vec<f64>,
}

pub fn pose2d_loss_map(pred: &PredictionTensors, m: &MatchResult, grid: &AnchorGrid) -> Pose2dLossMap {
    let nk = pred.n_joints;
    let cells: Vec<(Vec<f64>, Vec<f64>, f64)> = par::map_range(m.len(), |idx| {
        let (Some(target), Some(vis)) = (m.matched_pose2d(idx), m.matched_visibility(idx)) else {
            return (vec![0.0; nk], vec![0.0; nk], 0.0);
        };
        let anchor = grid.anchor_flat(idx);
        let mut loss = vec![0.0; nk];
        let mut overlap = vec![0.0; nk];
        let mut sum = 0.0;
        let mut n_vis = 0usize;
        for k in 0..nk {
            if !vis[k] {
                continue;
            }
            let o = unit_square_iou(pred.joint2d(idx, k), image_to_anchor(target[k], &anchor));
            overlap[k] = o;
            sum += o;
            n_vis += 1;
            if m.positive_mask[idx] {
                loss[k] = (1.0 - o) * (1.0 - o);
            }
        }
        let mean = if n_vis > 0 { sum / n_vis as f64 } else { 0.0 };
        (loss, overlap, mean)
    });
    let mut out = Pose2dLossMap {
        loss: Vec::with_capacity(m.len() * nk),
        overlap: Vec::with_capacity(m.len() * nk),
        mean_overlap: Vec::with_capacity(m.len()),
    };
    for (l, o, mean) in cells {
        out.loss.extend(l);
        out.overlap.extend(o);
        out.mean_overlap.push(mean);
    }
    out
}

/// Squared error to the normalized target per `(anchor, joint)`.
pub fn pose3d_loss_map(pred: &PredictionTensors, m: &MatchResult) -> Vec<f64> {
    let nk = pred.n_joints;
    par::map_range(m.len(), |idx| {
        let mut loss = vec![0.0; nk];
        if m.positive_mask[idx] {
            let target = m.matched_pose3d_normalized(idx).expect("positive anchors are matched");
            let vis = m.matched_visibility(idx).expect("positive anchors are matched");
            for k in 0..nk {
                if vis[k] {
                    loss[k] = (pred.joint3d(idx, k) - target[k]).norm_squared();
                }
            }
        }
        loss
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Which overlap gates the positive readout labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutRule {
    /// `pono × mean 2D joint overlap > 0.5`.
    PoseAware,
    /// `pono × predicted-box overlap > 0.5`.
    BoxAware,
    /// `pono > 0.5`.
    PonoOnly,
}

/// Pose-aware readout labels: `pono × mean 2D overlap > 0.5`.
pub fn readout_labels(m: &MatchResult, pose2d_overlap: &[f64]) -> Vec<bool> {
    m.pono
        .iter()
        .zip(pose2d_overlap)
        .map(|(&o, &p)| o * p > READOUT_THRESHOLD)
        .collect()
}

pub fn readout_labels_with_rule(
    rule: ReadoutRule,
    pred: &PredictionTensors,
    m: &MatchResult,
    grid: &AnchorGrid,
) -> Vec<bool> {
    match rule {
        ReadoutRule::PoseAware => readout_labels(m, &pose2d_loss_map(pred, m, grid).mean_overlap),
        ReadoutRule::BoxAware => readout_labels(m, &loc_loss_map(pred, m, grid).overlap),
        ReadoutRule::PonoOnly => m.pono.iter().map(|&o| o > POSITIVE_PONO).collect(),
    }
}

pub fn cls_loss_map(pred: &PredictionTensors, labels: &[bool]) -> Vec<f64> {
    pred.cls_logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| bce_with_logits(z, y).0)
        .collect()
}

/// Per-positive-anchor raw losses and their derivatives.
struct PositiveTerms {
    idx: usize,
    loc: f64,
    dloc: [f64; 4],
    l2d: Vec<f64>,
    d2d: Vec<f64>,
    mean_overlap: f64,
    l3d: Vec<f64>,
    d3d: Vec<f64>,
}

fn positive_terms(pred: &PredictionTensors, m: &MatchResult, grid: &AnchorGrid, idx: usize) -> PositiveTerms {
    let nk = pred.n_joints;
    let anchor = grid.anchor_flat(idx);
    let gt_box = m.matched_box(idx).expect("positive anchors are matched");
    let gt2d = m.matched_pose2d(idx).expect("positive anchors are matched");
    let gt3d = m.matched_pose3d_normalized(idx).expect("positive anchors are matched");
    let vis = m.matched_visibility(idx).expect("positive anchors are matched");

    let (decoded, jac) = decode_box_with_jacobian(&anchor, &pred.offsets(idx));
    let (o, g) = iou_with_grad(&decoded, gt_box);
    let loc = (1.0 - o) * (1.0 - o);
    let scale = -2.0 * (1.0 - o);
    let mut dloc = [0.0; 4];
    for (t, d) in dloc.iter_mut().enumerate() {
        *d = scale * (0..4).map(|c| g[c] * jac[c][t]).sum::<f64>();
    }

    let mut l2d = vec![0.0; nk];
    let mut d2d = vec![0.0; nk * 2];
    let mut l3d = vec![0.0; nk];
    let mut d3d = vec![0.0; nk * 3];
    let mut sum = 0.0;
    let mut n_vis = 0usize;
    for k in 0..nk {
        if !vis[k] {
            continue;
        }
        let target = image_to_anchor(gt2d[k], &anchor);
        let (o2, g2) = unit_square_iou_with_grad(pred.joint2d(idx, k), target);
        l2d[k] = (1.0 - o2) * (1.0 - o2);
        d2d[2 * k] = -2.0 * (1.0 - o2) * g2[0];
        d2d[2 * k + 1] = -2.0 * (1.0 - o2) * g2[1];
        sum += o2;
        n_vis += 1;

        let diff = pred.joint3d(idx, k) - gt3d[k];
        l3d[k] = diff.norm_squared();
        d3d[3 * k] = 2.0 * diff.x;
        d3d[3 * k + 1] = 2.0 * diff.y;
        d3d[3 * k + 2] = 2.0 * diff.z;
    }
    PositiveTerms {
        idx,
        loc,
        dloc,
        l2d,
        d2d,
        mean_overlap: if n_vis > 0 { sum / n_vis as f64 } else { 0.0 },
        l3d,
        d3d,
    }
}

fn check_inputs(pred: &PredictionTensors, m: &MatchResult, grid: &AnchorGrid, weights: &LossWeights) -> Result<()> {
    pred.check_shape(grid, pred.n_joints)?;
    weights.check_shape(grid.n_anchors(), pred.n_joints)?;
    if m.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "match result has {} anchors, grid {}",
            m.len(),
            grid.len()
        )));
    }
    if m.scene.poses2d.iter().any(|p| p.len() != pred.n_joints) {
        return Err(Error::ShapeMismatch("scene joint count differs from predictions".into()));
    }
    Ok(())
}

fn evaluate(
    pred: &PredictionTensors,
    m: &MatchResult,
    grid: &AnchorGrid,
    weights: &LossWeights,
    labels: Option<&[bool]>,
    want_grad: bool,
) -> Result<LossGradients> {
    check_inputs(pred, m, grid, weights)?;
    let n = m.len();
    let na = grid.n_anchors();
    let nk = pred.n_joints;
    let hw = (grid.height() * grid.width()) as f64;

    let positives = m.positive_indices();
    let terms: Vec<PositiveTerms> = par::map_slice(&positives, |&idx| positive_terms(pred, m, grid, idx));

    let labels: Vec<bool> = match labels {
        Some(l) => {
            if l.len() != n {
                return Err(Error::ShapeMismatch(format!("{} labels for {n} anchors", l.len())));
            }
            l.to_vec()
        }
        None => {
            let mut mean = vec![0.0; n];
            for t in &terms {
                mean[t.idx] = t.mean_overlap;
            }
            readout_labels(m, &mean)
        }
    };

    let cls: Vec<(f64, f64)> = par::map_range(n, |idx| bce_with_logits(pred.cls_logits[idx], labels[idx]));

    // per-anchor (and per anchor-joint) sums, reduced in index order
    let mut s_cls = vec![0.0; na];
    for (idx, &(l, _)) in cls.iter().enumerate() {
        s_cls[idx % na] += l;
    }
    let mut s_loc = vec![0.0; na];
    let mut s_2d = vec![0.0; na * nk];
    let mut s_3d = vec![0.0; na * nk];
    for t in &terms {
        let a = t.idx % na;
        s_loc[a] += t.loc;
        for k in 0..nk {
            s_2d[a * nk + k] += t.l2d[k];
            s_3d[a * nk + k] += t.l3d[k];
        }
    }

    let w = &weights.values;
    let lam = |i: usize| w[i].exp();
    let n_pos = positives.len();
    let norm_cls = hw * na as f64;
    let norm_loc = n_pos as f64;
    let norm_pose = (nk * n_pos) as f64;

    let mean_s = |range: std::ops::Range<usize>| {
        let len = range.len() as f64;
        par::ordered_sum(w[range].iter().copied()) / len
    };
    let cls_off = weights.anchor_cls_index(0);
    let loc_off = weights.anchor_loc_index(0);
    let j2_off = weights.joint_2d_index(0, 0);
    let j3_off = weights.joint_3d_index(0, 0);

    let reg_cls = -w[Task::Cls as usize] - mean_s(cls_off..cls_off + na);
    let reg_loc = -w[Task::Loc as usize] - mean_s(loc_off..loc_off + na);
    let reg_2d = -w[Task::Pose2d as usize] - mean_s(j2_off..j2_off + na * nk);
    let reg_3d = -w[Task::Pose3d as usize] - mean_s(j3_off..j3_off + na * nk);

    let weighted = |sums: &[f64], off: usize| par::ordered_sum(sums.iter().enumerate().map(|(q, &s)| lam(off + q) * s));
    let inner_cls = weighted(&s_cls, cls_off);
    let inner_loc = weighted(&s_loc, loc_off);
    let inner_2d = weighted(&s_2d, j2_off);
    let inner_3d = weighted(&s_3d, j3_off);

    let lt = |t: Task| lam(t as usize);
    let data_cls = lt(Task::Cls) * inner_cls / norm_cls;
    let (data_loc, data_2d, data_3d) = if n_pos > 0 {
        (
            lt(Task::Loc) * inner_loc / norm_loc,
            lt(Task::Pose2d) * inner_2d / norm_pose,
            lt(Task::Pose3d) * inner_3d / norm_pose,
        )
    } else {
        (0.0, 0.0, 0.0)
    };

    let breakdown = {
        let cls_v = data_cls + reg_cls;
        let loc_v = data_loc + reg_loc;
        let p2_v = data_2d + reg_2d;
        let p3_v = data_3d + reg_3d;
        LossBreakdown {
            cls: cls_v,
            loc: loc_v,
            pose2d: p2_v,
            pose3d: p3_v,
            total: cls_v + loc_v + p2_v + p3_v,
            raw_cls: par::ordered_sum(cls.iter().map(|c| c.0)),
            raw_loc: par::ordered_sum(s_loc.iter().copied()),
            raw_pose2d: par::ordered_sum(s_2d.iter().copied()),
            raw_pose3d: par::ordered_sum(s_3d.iter().copied()),
            reg_cls,
            reg_loc,
            reg_pose2d: reg_2d,
            reg_pose3d: reg_3d,
            n_positive: n_pos,
            n_readout: labels.iter().filter(|&&l| l).count(),
        }
    };

    let mut grad_pred = PredictionTensors::zeros(grid.height(), grid.width(), na, nk);
    let mut grad_w = vec![0.0; weights.len()];
    if want_grad {
        let c_cls = lt(Task::Cls) / norm_cls;
        for (idx, &(_, dz)) in cls.iter().enumerate() {
            grad_pred.cls_logits[idx] = c_cls * lam(cls_off + idx % na) * dz;
        }
        grad_w[Task::Cls as usize] = data_cls - 1.0;
        for a in 0..na {
            grad_w[cls_off + a] = c_cls * lam(cls_off + a) * s_cls[a] - 1.0 / na as f64;
        }

        grad_w[Task::Loc as usize] = data_loc - 1.0;
        grad_w[Task::Pose2d as usize] = data_2d - 1.0;
        grad_w[Task::Pose3d as usize] = data_3d - 1.0;
        let inv_na = 1.0 / na as f64;
        let inv_nak = 1.0 / (na * nk) as f64;
        if n_pos > 0 {
            let c_loc = lt(Task::Loc) / norm_loc;
            let c_2d = lt(Task::Pose2d) / norm_pose;
            let c_3d = lt(Task::Pose3d) / norm_pose;
            for a in 0..na {
                grad_w[loc_off + a] = c_loc * lam(loc_off + a) * s_loc[a] - inv_na;
                for k in 0..nk {
                    let q = a * nk + k;
                    grad_w[j2_off + q] = c_2d * lam(j2_off + q) * s_2d[q] - inv_nak;
                    grad_w[j3_off + q] = c_3d * lam(j3_off + q) * s_3d[q] - inv_nak;
                }
            }
            for t in &terms {
                let a = t.idx % na;
                let wl = c_loc * lam(loc_off + a);
                let o = t.idx * 4;
                for c in 0..4 {
                    grad_pred.box_offsets[o + c] = wl * t.dloc[c];
                }
                for k in 0..nk {
                    let w2 = c_2d * lam(j2_off + a * nk + k);
                    let w3 = c_3d * lam(j3_off + a * nk + k);
                    let o2 = (t.idx * nk + k) * 2;
                    let o3 = (t.idx * nk + k) * 3;
                    grad_pred.pose2d[o2] = w2 * t.d2d[2 * k];
                    grad_pred.pose2d[o2 + 1] = w2 * t.d2d[2 * k + 1];
                    for c in 0..3 {
                        grad_pred.pose3d[o3 + c] = w3 * t.d3d[3 * k + c];
                    }
                }
            }
        } else {
            for a in 0..na {
                grad_w[loc_off + a] = -inv_na;
                for k in 0..nk {
                    grad_w[j2_off + a * nk + k] = -inv_nak;
                    grad_w[j3_off + a * nk + k] = -inv_nak;
                }
            }
        }
    }

    Ok(LossGradients {
        breakdown,
        pred: grad_pred,
        weights: grad_w,
        labels,
    })
}

/// Total objective with readout labels computed from `pred`.
pub fn total_loss(
    pred: &PredictionTensors,
    m: &MatchResult,
    grid: &AnchorGrid,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    evaluate(pred, m, grid, weights, None, false).map(|g| g.breakdown)
}

/// Total objective with caller-supplied (fixed) classification labels.
pub fn total_loss_with_labels(
    pred: &PredictionTensors,
    m: &MatchResult,
    grid: &AnchorGrid,
    weights: &LossWeights,
    labels: &[bool],
) -> Result<LossBreakdown> {
    evaluate(pred, m, grid, weights, Some(labels), false).map(|g| g.breakdown)
}

/// Gradient of [`total_loss`] with respect to every prediction and every
/// log-weight; labels are held constant.
pub fn gradients(
    pred: &PredictionTensors,
    m: &MatchResult,
    grid: &AnchorGrid,
    weights: &LossWeights,
) -> Result<LossGradients> {
    evaluate(pred, m, grid, weights, None, true)
}

pub fn gradients_with_labels(
    pred: &PredictionTensors,
    m: &MatchResult,
    grid: &AnchorGrid,
    weights: &LossWeights,
    labels: &[bool],
) -> Result<LossGradients> {
    evaluate(pred, m, grid, weights, Some(labels), true)
}
