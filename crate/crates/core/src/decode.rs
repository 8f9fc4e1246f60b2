//! Turning prediction tensors into detections.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorGrid;
use crate::error::{Error, Result};
use crate::geometry::{anchor_to_image, decode_box, iou, Box2D, Point2D, Point3D};
use crate::losses::{sigmoid, PredictionTensors};
use crate::synthdata::Camera;

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.3;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub score: f64,
    pub bbox: Box2D,
    /// Pixel coordinates.
    pub pose2d: Vec<Point2D>,
    /// Normalized root-relative coordinates.
    pub pose3d: Vec<Point3D>,
    /// `(i, j, a)` of the anchor that produced this detection.
    pub anchor_index: (usize, usize, usize),
}

fn rank(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.anchor_index.cmp(&b.anchor_index))
}

/// One detection per anchor whose score exceeds `score_threshold`,
/// highest score first.
pub fn decode(pred: &PredictionTensors, grid: &AnchorGrid, score_threshold: f64) -> Vec<Detection> {
    let nk = pred.n_joints;
    let mut dets: Vec<Detection> = (0..pred.len())
        .filter_map(|idx| {
            let score = sigmoid(pred.cls_logits[idx]);
            if score <= score_threshold {
                return None;
            }
            let anchor = grid.anchor_flat(idx);
            Some(Detection {
                score,
                bbox: decode_box(&anchor, &pred.offsets(idx)),
                pose2d: (0..nk).map(|k| anchor_to_image(pred.joint2d(idx, k), &anchor)).collect(),
                pose3d: (0..nk).map(|k| pred.joint3d(idx, k)).collect(),
                anchor_index: grid.unflatten(idx),
            })
        })
        .collect();
    dets.sort_by(rank);
    dets
}

/// Greedy box NMS: keeps detections in descending score order, dropping
/// any whose IoU with an already kept box exceeds `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted: Vec<&Detection> = dets.iter().collect();
    sorted.sort_by(|a, b| rank(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d.clone());
        }
    }
    kept
}

/// Camera-frame root translation recovered by reprojection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootTranslation {
    pub translation: Point3D,
    /// Sum of squared reprojection errors, pixels².
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

const GN_MAX_ITERS: usize = 50;

fn reprojection(pose3d: &[Point3D], pose2d: &[Point2D], used: &[usize], cam: &Camera, t: Vector3<f64>) -> f64 {
    used.iter()
        .map(|&k| {
            let p = pose3d[k];
            let z = p.z + t.z;
            let du = cam.fx * (p.x + t.x) / z + cam.cx - pose2d[k].x;
            let dv = cam.fy * (p.y + t.y) / z + cam.cy - pose2d[k].y;
            du * du + dv * dv
        })
        .sum()
}

/// Finds `T` minimising `Σ_k |project(pose3d_k + T) − pose2d_k|²` over the
/// visible joints. Starts from the linear solution of the cross-multiplied
/// projection equations and refines it with Gauss–Newton.
pub fn recover_root_translation(
    pose3d: &[Point3D],
    pose2d: &[Point2D],
    visible: Option<&[bool]>,
    camera: &Camera,
) -> Result<RootTranslation> {
    camera.validate()?;
    if pose3d.len() != pose2d.len() || visible.is_some_and(|v| v.len() != pose3d.len()) {
        return Err(Error::ShapeMismatch("pose lengths differ".into()));
    }
    let used: Vec<usize> = (0..pose3d.len())
        .filter(|&k| visible.is_none_or(|v| v[k]))
        .collect();
    if used.len() < 2 {
        return Err(Error::Degenerate(format!(
            "{} visible joints; at least 2 are needed",
            used.len()
        )));
    }
    let (fx, fy, cx, cy) = (camera.fx, camera.fy, camera.cx, camera.cy);

    // fx·Tx − (u−cx)·Tz = (u−cx)·Z − fx·X, and likewise for y
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for &k in &used {
        let p = pose3d[k];
        let du = pose2d[k].x - cx;
        let dv = pose2d[k].y - cy;
        let rows = [
            (Vector3::new(fx, 0.0, -du), du * p.z - fx * p.x),
            (Vector3::new(0.0, fy, -dv), dv * p.z - fy * p.y),
        ];
        for (a, b) in rows {
            ata += a * a.transpose();
            atb += a * b;
        }
    }
    let mut t = ata
        .lu()
        .solve(&atb)
        .ok_or_else(|| Error::Degenerate("joint configuration does not determine the translation".into()))?;

    let mut best = reprojection(pose3d, pose2d, &used, camera, t);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < GN_MAX_ITERS {
        iterations += 1;
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for &k in &used {
            let p = pose3d[k];
            let z = p.z + t.z;
            if z <= 0.0 {
                return Err(Error::Degenerate("joint behind the camera".into()));
            }
            let x = p.x + t.x;
            let y = p.y + t.y;
            let ru = fx * x / z + cx - pose2d[k].x;
            let rv = fy * y / z + cy - pose2d[k].y;
            let ju = Vector3::new(fx / z, 0.0, -fx * x / (z * z));
            let jv = Vector3::new(0.0, fy / z, -fy * y / (z * z));
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * ru + jv * rv;
        }
        let Some(step) = jtj.lu().solve(&(-jtr)) else {
            break;
        };
        let candidate = t + step;
        let r = reprojection(pose3d, pose2d, &used, camera, candidate);
        if !(r <= best) {
            converged = best < 1e-12 || step.norm() < 1e-12 * (1.0 + t.norm());
            break;
        }
        t = candidate;
        best = r;
        if step.norm() < 1e-12 * (1.0 + t.norm()) || best < 1e-24 {
            converged = true;
            break;
        }
    }
    Ok(RootTranslation {
        translation: Point3D::new(t.x, t.y, t.z),
        residual: best,
        iterations,
        converged,
    })
}

/// One detection line of the JSONL exchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: Box2D,
    pub pose2d: Vec<Point2D>,
    pub pose3d: Vec<Point3D>,
}

impl DetectionRecord {
    pub fn from_detection(image_id: u64, d: &Detection) -> Self {
        DetectionRecord {
            image_id,
            score: d.score,
            bbox: d.bbox,
            pose2d: d.pose2d.clone(),
            pose3d: d.pose3d.clone(),
        }
    }
}

pub fn write_detections(path: impl AsRef<Path>, records: &[DetectionRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
