//! Anchor priors, the anchor grid and ground-truth matching.
//!
//! Every anchor is matched to the ground truth it overlaps most (ties go to
//! the lowest ground-truth index). Its per-object normalised overlap (PONO)
//! is that IoU divided by the best IoU any anchor matched to the same ground
//! truth achieves, and the positive set is `pono > 0.5`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, AnchorBox, Box2D, Point2D, Point3D};
use crate::losses::normalize_pose3d;
use crate::par;
use crate::synthdata::{SceneSample, Skeleton};

pub const DEFAULT_STRIDE: usize = 8;
pub const DEFAULT_NUM_ANCHORS: usize = 10;
/// Anchors with PONO strictly above this are positive.
pub const POSITIVE_PONO: f64 = 0.5;

/// Anchor prior sizes `(width, height)` in pixels, sorted by area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AnchorSetRepr", into = "AnchorSetRepr")]
pub struct AnchorSet {
    priors: Vec<(f64, f64)>,
}

#[derive(Serialize, Deserialize)]
struct AnchorSetRepr {
    priors: Vec<[f64; 2]>,
}

impl TryFrom<AnchorSetRepr> for AnchorSet {
    type Error = Error;
    fn try_from(r: AnchorSetRepr) -> Result<Self> {
        AnchorSet::new(r.priors.into_iter().map(|[w, h]| (w, h)).collect())
    }
}

impl From<AnchorSet> for AnchorSetRepr {
    fn from(s: AnchorSet) -> Self {
        AnchorSetRepr {
            priors: s.priors.into_iter().map(|(w, h)| [w, h]).collect(),
        }
    }
}

impl AnchorSet {
    pub fn new(mut priors: Vec<(f64, f64)>) -> Result<Self> {
        if priors.is_empty() {
            return Err(Error::InvalidInput("anchor set needs at least one prior".into()));
        }
        if let Some((w, h)) = priors
            .iter()
            .find(|(w, h)| !(w.is_finite() && h.is_finite() && *w > 0.0 && *h > 0.0))
        {
            return Err(Error::InvalidInput(format!("anchor prior {w}x{h} is not positive")));
        }
        priors.sort_by(|a, b| {
            (a.0 * a.1)
                .total_cmp(&(b.0 * b.1))
                .then(a.0.total_cmp(&b.0))
        });
        Ok(AnchorSet { priors })
    }

    pub fn priors(&self) -> &[(f64, f64)] {
        &self.priors
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    pub fn scaled(&self, s: f64) -> Self {
        AnchorSet {
            priors: self.priors.iter().map(|&(w, h)| (w * s, h * s)).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// The `height x width x n_anchors` lattice of prior boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    height: usize,
    width: usize,
    stride: f64,
    priors: AnchorSet,
}

impl AnchorGrid {
    pub fn new(height: usize, width: usize, stride: f64, priors: AnchorSet) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!("grid {height}x{width} is empty")));
        }
        if !(stride >= 1.0) {
            return Err(Error::InvalidInput(format!("stride {stride} must be >= 1")));
        }
        Ok(AnchorGrid {
            height,
            width,
            stride,
            priors,
        })
    }

    /// Grid covering an image of the given pixel size (rounded up).
    pub fn for_image(image_width: u32, image_height: u32, stride: usize, priors: AnchorSet) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidInput("stride must be >= 1".into()));
        }
        let w = (image_width as usize).div_ceil(stride);
        let h = (image_height as usize).div_ceil(stride);
        Self::new(h, w, stride as f64, priors)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn priors(&self) -> &AnchorSet {
        &self.priors
    }

    pub fn n_anchors(&self) -> usize {
        self.priors.len()
    }

    /// Total number of anchors, `H * W * N_A`.
    pub fn len(&self) -> usize {
        self.height * self.width * self.n_anchors()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat_index(&self, i: usize, j: usize, a: usize) -> usize {
        (i * self.width + j) * self.n_anchors() + a
    }

    pub fn unflatten(&self, idx: usize) -> (usize, usize, usize) {
        let na = self.n_anchors();
        let a = idx % na;
        let cell = idx / na;
        (cell / self.width, cell % self.width, a)
    }

    pub fn anchor_at(&self, i: usize, j: usize, a: usize) -> Result<AnchorBox> {
        if i >= self.height || j >= self.width || a >= self.n_anchors() {
            return Err(Error::OutOfRange(format!(
                "anchor ({i}, {j}, {a}) outside grid {}x{}x{}",
                self.height,
                self.width,
                self.n_anchors()
            )));
        }
        Ok(self.anchor_unchecked(self.flat_index(i, j, a)))
    }

    /// Anchor at a flat index; panics if out of range.
    pub fn anchor_flat(&self, idx: usize) -> AnchorBox {
        assert!(idx < self.len(), "anchor index {idx} out of range");
        self.anchor_unchecked(idx)
    }

    fn anchor_unchecked(&self, idx: usize) -> AnchorBox {
        let (i, j, a) = self.unflatten(idx);
        let (w, h) = self.priors.priors[a];
        AnchorBox {
            center_x: (j as f64 + 0.5) * self.stride,
            center_y: (i as f64 + 0.5) * self.stride,
            width: w,
            height: h,
        }
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.height, self.width, self.stride * s, self.priors.scaled(s))
    }
}

/// Ground-truth people of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene {
    pub boxes: Vec<Box2D>,
    pub poses2d: Vec<Vec<Point2D>>,
    /// Metric camera-frame joints.
    pub poses3d: Vec<Vec<Point3D>>,
    pub visibility: Vec<Vec<bool>>,
    /// Root-relative, unit-bone-sum copies of `poses3d`.
    pub poses3d_normalized: Vec<Vec<Point3D>>,
}

impl GroundTruthScene {
    pub fn new(
        boxes: Vec<Box2D>,
        poses2d: Vec<Vec<Point2D>>,
        poses3d: Vec<Vec<Point3D>>,
        visibility: Vec<Vec<bool>>,
        skeleton: &Skeleton,
    ) -> Result<Self> {
        let n = boxes.len();
        if poses2d.len() != n || poses3d.len() != n || visibility.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "scene lists disagree: {} boxes, {} 2D poses, {} 3D poses, {} visibility",
                n,
                poses2d.len(),
                poses3d.len(),
                visibility.len()
            )));
        }
        let nk = skeleton.n_joints();
        for p in 0..n {
            if poses2d[p].len() != nk || poses3d[p].len() != nk || visibility[p].len() != nk {
                return Err(Error::ShapeMismatch(format!(
                    "person {p} does not have {nk} joints"
                )));
            }
            if !boxes[p].is_valid() {
                return Err(Error::InvalidInput(format!("person {p} has an invalid box")));
            }
        }
        let poses3d_normalized = poses3d
            .iter()
            .map(|pose| normalize_pose3d(pose, skeleton))
            .collect::<Result<Vec<_>>>()?;
        Ok(GroundTruthScene {
            boxes,
            poses2d,
            poses3d,
            visibility,
            poses3d_normalized,
        })
    }

    pub fn empty() -> Self {
        GroundTruthScene {
            boxes: vec![],
            poses2d: vec![],
            poses3d: vec![],
            visibility: vec![],
            poses3d_normalized: vec![],
        }
    }

    pub fn from_sample(sample: &SceneSample, skeleton: &Skeleton) -> Result<Self> {
        let people = &sample.people;
        Self::new(
            people.iter().map(|p| p.bbox).collect(),
            people.iter().map(|p| p.pose2d.clone()).collect(),
            people.iter().map(|p| p.pose3d.clone()).collect(),
            people.iter().map(|p| p.visible.clone()).collect(),
            skeleton,
        )
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Same people in the order given by `order` (a permutation).
    pub fn permuted(&self, order: &[usize]) -> Self {
        GroundTruthScene {
            boxes: order.iter().map(|&k| self.boxes[k]).collect(),
            poses2d: order.iter().map(|&k| self.poses2d[k].clone()).collect(),
            poses3d: order.iter().map(|&k| self.poses3d[k].clone()).collect(),
            visibility: order.iter().map(|&k| self.visibility[k].clone()).collect(),
            poses3d_normalized: order
                .iter()
                .map(|&k| self.poses3d_normalized[k].clone())
                .collect(),
        }
    }
}

/// Per-anchor matching targets for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub height: usize,
    pub width: usize,
    pub n_anchors: usize,
    /// Matched ground-truth index per anchor, `-1` when unmatched.
    pub match_index: Vec<i32>,
    /// IoU between each anchor and its matched ground truth.
    pub match_iou: Vec<f64>,
    pub pono: Vec<f64>,
    pub positive_mask: Vec<bool>,
    /// Ground truths that no anchor overlaps at all.
    pub unmatched_ground_truths: usize,
    pub scene: GroundTruthScene,
}

impl MatchResult {
    pub fn len(&self) -> usize {
        self.match_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.match_index.is_empty()
    }

    pub fn matched(&self, idx: usize) -> Option<usize> {
        usize::try_from(self.match_index[idx]).ok()
    }

    pub fn n_positive(&self) -> usize {
        self.positive_mask.iter().filter(|&&p| p).count()
    }

    pub fn positive_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.positive_mask[k]).collect()
    }

    pub fn matched_box(&self, idx: usize) -> Option<&Box2D> {
        self.matched(idx).map(|n| &self.scene.boxes[n])
    }

    pub fn matched_pose2d(&self, idx: usize) -> Option<&[Point2D]> {
        self.matched(idx).map(|n| self.scene.poses2d[n].as_slice())
    }

    pub fn matched_pose3d(&self, idx: usize) -> Option<&[Point3D]> {
        self.matched(idx).map(|n| self.scene.poses3d[n].as_slice())
    }

    pub fn matched_pose3d_normalized(&self, idx: usize) -> Option<&[Point3D]> {
        self.matched(idx)
            .map(|n| self.scene.poses3d_normalized[n].as_slice())
    }

    pub fn matched_visibility(&self, idx: usize) -> Option<&[bool]> {
        self.matched(idx).map(|n| self.scene.visibility[n].as_slice())
    }
}

/// Matches every anchor of `grid` against the people of `scene`.
pub fn match_scene(grid: &AnchorGrid, scene: &GroundTruthScene) -> MatchResult {
    let n = grid.len();
    let best: Vec<(i32, f64)> = par::map_range(n, |idx| {
        let anchor = grid.anchor_flat(idx).to_box();
        let mut best = (-1i32, 0.0f64);
        for (g, b) in scene.boxes.iter().enumerate() {
            let v = iou(b, &anchor);
            if v > best.1 {
                best = (g as i32, v);
            }
        }
        best
    });

    let mut per_gt_max = vec![0.0f64; scene.len()];
    for &(g, v) in &best {
        if g >= 0 && v > per_gt_max[g as usize] {
            per_gt_max[g as usize] = v;
        }
    }

    let mut match_index = Vec::with_capacity(n);
    let mut match_iou = Vec::with_capacity(n);
    let mut pono = Vec::with_capacity(n);
    let mut positive_mask = Vec::with_capacity(n);
    for &(g, v) in &best {
        let o = if g >= 0 { v / per_gt_max[g as usize] } else { 0.0 };
        match_index.push(g);
        match_iou.push(v);
        pono.push(o);
        positive_mask.push(o > POSITIVE_PONO);
    }
    let unmatched_ground_truths = per_gt_max.iter().filter(|&&m| m == 0.0).count();
    if unmatched_ground_truths > 0 {
        log::warn!("{unmatched_ground_truths} ground truth(s) overlap no anchor");
    }

    MatchResult {
        height: grid.height(),
        width: grid.width(),
        n_anchors: grid.n_anchors(),
        match_index,
        match_iou,
        pono,
        positive_mask,
        unmatched_ground_truths,
        scene: scene.clone(),
    }
}

/// IoU of two boxes sharing a corner at the origin.
fn wh_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

fn best_iou(size: (f64, f64), centers: &[(f64, f64)]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, &c) in centers.iter().enumerate() {
        let v = wh_iou(size, c);
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

fn mean_best_iou(sizes: &[(f64, f64)], centers: &[(f64, f64)]) -> f64 {
    par::ordered_sum(sizes.iter().map(|&s| best_iou(s, centers).1)) / sizes.len() as f64
}

/// Result of anchor clustering with the per-iteration mean best IoU
/// (index 0 is the seeding).
#[derive(Debug, Clone)]
pub struct Clustering {
    pub anchors: AnchorSet,
    pub mean_iou_history: Vec<f64>,
}

impl Clustering {
    pub fn mean_iou(&self) -> f64 {
        *self.mean_iou_history.last().unwrap_or(&0.0)
    }
}

/// k-means over box sizes with `1 - IoU` distance and k-means++ seeding.
pub fn cluster_anchors(boxes: &[Box2D], n_anchors: usize, max_iters: usize, seed: u64) -> Result<AnchorSet> {
    cluster_anchors_with_history(boxes, n_anchors, max_iters, seed).map(|c| c.anchors)
}

pub fn cluster_anchors_with_history(
    boxes: &[Box2D],
    n_anchors: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Clustering> {
    if boxes.is_empty() {
        return Err(Error::InvalidInput("cannot cluster an empty box list".into()));
    }
    if n_anchors == 0 {
        return Err(Error::InvalidInput("n_anchors must be >= 1".into()));
    }
    let sizes: Vec<(f64, f64)> = boxes.iter().map(|b| (b.width(), b.height())).collect();
    if let Some(s) = sizes.iter().find(|(w, h)| !(*w > 0.0 && *h > 0.0)) {
        return Err(Error::InvalidInput(format!("box size {}x{} is not positive", s.0, s.1)));
    }
    let mut distinct: Vec<(f64, f64)> = sizes.clone();
    distinct.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    distinct.dedup();
    if n_anchors > distinct.len() {
        return Err(Error::InvalidInput(format!(
            "{n_anchors} anchors requested but only {} distinct box sizes",
            distinct.len()
        )));
    }

    // k-means++ seeding over the distinct sizes.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![distinct[rng.gen_range(0..distinct.len())]];
    while centers.len() < n_anchors {
        let weights: Vec<f64> = distinct
            .iter()
            .map(|&s| {
                let d = 1.0 - best_iou(s, &centers).1;
                d * d
            })
            .collect();
        let total = par::ordered_sum(weights.iter().copied());
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = weights.len() - 1;
            for (k, &w) in weights.iter().enumerate() {
                if r < w {
                    pick = k;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // remaining candidates all coincide with a center
            distinct.iter().position(|s| !centers.contains(s)).unwrap_or(0)
        };
        if centers.contains(&distinct[next]) {
            // zero-weight pick through rounding; take the farthest size instead
            let far = (0..distinct.len())
                .filter(|&k| !centers.contains(&distinct[k]))
                .max_by(|&x, &y| weights[x].total_cmp(&weights[y]).then(y.cmp(&x)))
                .expect("distinct sizes exceed centers");
            centers.push(distinct[far]);
        } else {
            centers.push(distinct[next]);
        }
    }

    let mut history = vec![mean_best_iou(&sizes, &centers)];
    let mut assignment: Vec<usize> = sizes.iter().map(|&s| best_iou(s, &centers).0).collect();
    for _ in 0..max_iters {
        let mut sum = vec![(0.0f64, 0.0f64, 0usize); n_anchors];
        for (&s, &k) in sizes.iter().zip(&assignment) {
            sum[k].0 += s.0;
            sum[k].1 += s.1;
            sum[k].2 += 1;
        }
        let updated: Vec<(f64, f64)> = centers
            .iter()
            .zip(&sum)
            .map(|(&c, &(w, h, n))| if n > 0 { (w / n as f64, h / n as f64) } else { c })
            .collect();
        let score = mean_best_iou(&sizes, &updated);
        if score < *history.last().unwrap() {
            break;
        }
        centers = updated;
        history.push(score);
        let next: Vec<usize> = sizes.iter().map(|&s| best_iou(s, &centers).0).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }

    Ok(Clustering {
        anchors: AnchorSet::new(centers)?,
        mean_iou_history: history,
    })
}
