//! Acceptance criteria A1 to A9. Each test prints one PASS/FAIL line with its
//! measured value and the pinned tolerance.

use std::time::{Duration, Instant};

use posegrid::anchors::{cluster_anchors, match_scene, AnchorGrid, AnchorSet, GroundTruthScene, MatchResult};
use posegrid::decode::{nms, Detection, DetectionRecord, DEFAULT_NMS_THRESHOLD, DEFAULT_SCORE_THRESHOLD};
use posegrid::geometry::{decode_box, encode_box, image_to_anchor, iou, Box2D, Point2D, Point3D};
use posegrid::losses::{
    gradients_with_labels, normalize_pose3d, readout_labels_with_rule, total_loss, total_loss_with_labels,
    LossWeights, PredictionTensors, ReadoutRule, Task,
};
use posegrid::metrics::{average_precision, evaluate, match_for_pose_eval, pck3d, EvalSubject};
use posegrid::synthdata::{
    assemble_scene, generate_dataset, place_person, save_dataset, Camera, SceneConfig, SceneSample, Skeleton,
};
use posegrid::train::{
    checkpoint_path, infer_dataset, save_history, DirectPredictor, TrainConfig, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn report(id: &str, name: &str, pass: bool, detail: String, start: Instant) {
    println!(
        "{id} {name}: {} ({detail}; {:.2}s)",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    Normal::new(0.0, sigma).unwrap().sample(rng)
}

// ---------------------------------------------------------------- A1

const FD_STEP: f64 = 1e-4;
/// Denominator floor of the relative error, for entries whose gradient is
/// zero or at rounding level.
const REL_FLOOR: f64 = 1e-6;
/// Minimum distance to an IoU kink, pixels for box edges and anchor units
/// for joints.
const KINK_MARGIN: f64 = 1e-2;

struct Instance {
    grid: AnchorGrid,
    m: MatchResult,
    pred: PredictionTensors,
    weights: LossWeights,
}

fn random_instance(rng: &mut ChaCha8Rng, sk: &Skeleton) -> Instance {
    let grid = AnchorGrid::new(4, 4, 8.0, AnchorSet::new(vec![(10.0, 20.0), (16.0, 12.0)]).unwrap()).unwrap();
    let nk = sk.n_joints();
    let n_people = rng.gen_range(1..=2);
    let mut boxes = Vec::new();
    let mut p2 = Vec::new();
    let mut p3 = Vec::new();
    let mut vis = Vec::new();
    for _ in 0..n_people {
        let b = Box2D::from_center_size(
            rng.gen_range(4.0..28.0),
            rng.gen_range(4.0..28.0),
            rng.gen_range(6.0..20.0),
            rng.gen_range(8.0..24.0),
        );
        p2.push(
            (0..nk)
                .map(|_| Point2D::new(rng.gen_range(b.xmin..b.xmax), rng.gen_range(b.ymin..b.ymax)))
                .collect::<Vec<_>>(),
        );
        p3.push(
            (0..nk)
                .map(|_| Point3D::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(2.0..4.0)))
                .collect::<Vec<_>>(),
        );
        vis.push((0..nk).map(|_| rng.gen_bool(0.8)).collect::<Vec<_>>());
        boxes.push(b);
    }
    let scene = GroundTruthScene::new(boxes, p2, p3, vis, sk).unwrap();
    let m = match_scene(&grid, &scene);
    let mut pred = PredictionTensors::for_grid(&grid, nk);
    for idx in 0..grid.len() {
        let anchor = grid.anchor_flat(idx);
        pred.cls_logits[idx] = gauss(rng, 2.0);
        let base = match m.matched_box(idx) {
            Some(b) => encode_box(&anchor, b),
            None => [0.0; 4],
        };
        let mut t = [0.0; 4];
        for c in 0..4 {
            t[c] = base[c] + gauss(rng, 0.3);
        }
        pred.set_offsets(idx, t);
        for k in 0..nk {
            let target = m
                .matched_pose2d(idx)
                .map(|p| image_to_anchor(p[k], &anchor))
                .unwrap_or(Point2D::new(0.0, 0.0));
            pred.set_joint2d(idx, k, Point2D::new(target.x + gauss(rng, 0.3), target.y + gauss(rng, 0.3)));
            pred.set_joint3d(idx, k, Point3D::new(gauss(rng, 0.3), gauss(rng, 0.3), gauss(rng, 0.3)));
        }
    }
    let mut weights = LossWeights::ones(grid.n_anchors(), nk);
    for s in weights.values.iter_mut() {
        *s = rng.gen_range(-0.5..0.5);
    }
    Instance { grid, m, pred, weights }
}

/// True when every supervised quantity is at least [`KINK_MARGIN`] away
/// from a point where IoU or the offset clamp is not differentiable.
fn away_from_kinks(inst: &Instance) -> bool {
    let nk = inst.pred.n_joints;
    for idx in 0..inst.grid.len() {
        if !inst.m.positive_mask[idx] {
            continue;
        }
        let anchor = inst.grid.anchor_flat(idx);
        let t = inst.pred.offsets(idx);
        if t[2].abs() > 8.0 - KINK_MARGIN || t[3].abs() > 8.0 - KINK_MARGIN {
            return false;
        }
        let p = decode_box(&anchor, &t);
        let g = inst.m.matched_box(idx).unwrap();
        let edges = [
            (p.xmin, g.xmin),
            (p.xmax, g.xmax),
            (p.xmin, g.xmax),
            (p.xmax, g.xmin),
            (p.ymin, g.ymin),
            (p.ymax, g.ymax),
            (p.ymin, g.ymax),
            (p.ymax, g.ymin),
        ];
        if edges.iter().any(|(a, b)| (a - b).abs() < KINK_MARGIN) {
            return false;
        }
        let target = inst.m.matched_pose2d(idx).unwrap();
        let vis = inst.m.matched_visibility(idx).unwrap();
        for k in 0..nk {
            if !vis[k] {
                continue;
            }
            let d = inst.pred.joint2d(idx, k) - image_to_anchor(target[k], &anchor);
            for v in [d.x.abs(), d.y.abs()] {
                if v < KINK_MARGIN || (v - 1.0).abs() < KINK_MARGIN {
                    return false;
                }
            }
        }
    }
    true
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

#[test]
fn a1_gradient_correctness() {
    const INSTANCES: usize = 100;
    const MAX_REL_ERR: f64 = 1e-4;
    const MAX_TIME: Duration = Duration::from_secs(60);
    let start = Instant::now();
    let sk = Skeleton::chain(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    // cls, loc, 2D, 3D, log-weights
    let mut worst = [0.0f64; 5];
    let mut n_checked = 0usize;
    let mut n_resampled = 0usize;
    while n_checked < INSTANCES {
        let inst = random_instance(&mut rng, &sk);
        if inst.m.n_positive() == 0 || !away_from_kinks(&inst) {
            n_resampled += 1;
            continue;
        }
        n_checked += 1;
        let labels = readout_labels_with_rule(ReadoutRule::PoseAware, &inst.pred, &inst.m, &inst.grid);
        let g = gradients_with_labels(&inst.pred, &inst.m, &inst.grid, &inst.weights, &labels).unwrap();
        let f_pred = |flat: &[f64]| {
            let mut p = inst.pred.clone();
            p.copy_from_flat(flat).unwrap();
            total_loss_with_labels(&p, &inst.m, &inst.grid, &inst.weights, &labels).unwrap().total
        };
        let x0: Vec<f64> = inst.pred.values().collect();
        let analytic: Vec<f64> = g.pred.values().collect();
        let n_cls = inst.pred.cls_logits.len();
        let n_loc = inst.pred.box_offsets.len();
        let n_2d = inst.pred.pose2d.len();
        for v in 0..x0.len() {
            let mut x = x0.clone();
            x[v] = x0[v] + FD_STEP;
            let fp = f_pred(&x);
            x[v] = x0[v] - FD_STEP;
            let fm = f_pred(&x);
            let e = rel_err(analytic[v], (fp - fm) / (2.0 * FD_STEP));
            let group = if v < n_cls {
                0
            } else if v < n_cls + n_loc {
                1
            } else if v < n_cls + n_loc + n_2d {
                2
            } else {
                3
            };
            worst[group] = worst[group].max(e);
        }
        for v in 0..inst.weights.len() {
            let eval = |s: f64| {
                let mut w = inst.weights.clone();
                w.values[v] = s;
                total_loss_with_labels(&inst.pred, &inst.m, &inst.grid, &w, &labels).unwrap().total
            };
            let s0 = inst.weights.values[v];
            let n = (eval(s0 + FD_STEP) - eval(s0 - FD_STEP)) / (2.0 * FD_STEP);
            worst[4] = worst[4].max(rel_err(g.weights[v], n));
        }
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    let pass = max < MAX_REL_ERR && start.elapsed() < MAX_TIME;
    report(
        "A1",
        "gradient correctness",
        pass,
        format!(
            "max rel err {max:.2e} < {MAX_REL_ERR:e} [cls {:.1e}, loc {:.1e}, 2D {:.1e}, 3D {:.1e}, log-weights {:.1e}] over {n_checked} instances, {n_resampled} resampled near kinks, limit {}s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            worst[4],
            MAX_TIME.as_secs()
        ),
        start,
    );
    assert!(pass);
}

// ---------------------------------------------------------------- A2

fn oracle_iou(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    let union = (a.xmax - a.xmin) * (a.ymax - a.ymin) + (b.xmax - b.xmin) * (b.ymax - b.ymin) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[test]
fn a2_matching_oracle() {
    const SCENES: usize = 200;
    const MAX_TIME: Duration = Duration::from_secs(60);
    let start = Instant::now();
    let sk = Skeleton::chain(2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0usize;
    let mut ties = 0usize;
    for _ in 0..SCENES {
        let h = rng.gen_range(1..=16usize);
        let w = rng.gen_range(1..=16usize);
        let stride = 8.0;
        let na = rng.gen_range(1..=4usize);
        let priors = AnchorSet::new((0..na).map(|_| (rng.gen_range(4.0..60.0), rng.gen_range(4.0..60.0))).collect())
            .unwrap();
        let grid = AnchorGrid::new(h, w, stride, priors.clone()).unwrap();
        let n_people = rng.gen_range(0..=5usize);
        let mut boxes: Vec<Box2D> = Vec::new();
        for _ in 0..n_people {
            if !boxes.is_empty() && rng.gen_bool(0.3) {
                // an exact duplicate forces an argmax tie
                let b = boxes[rng.gen_range(0..boxes.len())];
                boxes.push(b);
            } else {
                boxes.push(Box2D::from_center_size(
                    rng.gen_range(-10.0..(w as f64 * stride + 10.0)),
                    rng.gen_range(-10.0..(h as f64 * stride + 10.0)),
                    rng.gen_range(2.0..80.0),
                    rng.gen_range(2.0..80.0),
                ));
            }
        }
        let n = boxes.len();
        let scene = GroundTruthScene::new(
            boxes.clone(),
            vec![vec![Point2D::new(0.0, 0.0); 2]; n],
            vec![vec![Point3D::new(0.0, 0.0, 1.0), Point3D::new(0.0, 1.0, 1.0)]; n],
            vec![vec![true; 2]; n],
            &sk,
        )
        .unwrap();
        let m = match_scene(&grid, &scene);

        // exhaustive recomputation
        let mut idx_o = Vec::new();
        let mut iou_o = Vec::new();
        for i in 0..h {
            for j in 0..w {
                for &(pw, ph) in priors.priors() {
                    let cx = (j as f64 + 0.5) * stride;
                    let cy = (i as f64 + 0.5) * stride;
                    let a = Box2D {
                        xmin: cx - 0.5 * pw,
                        ymin: cy - 0.5 * ph,
                        xmax: cx + 0.5 * pw,
                        ymax: cy + 0.5 * ph,
                    };
                    let ious: Vec<f64> = boxes.iter().map(|b| oracle_iou(b, &a)).collect();
                    let best = ious.iter().cloned().fold(0.0, f64::max);
                    if best > 0.0 {
                        let first = ious.iter().position(|&v| v == best).unwrap();
                        if ious.iter().filter(|&&v| v == best).count() > 1 {
                            ties += 1;
                        }
                        idx_o.push(first as i32);
                    } else {
                        idx_o.push(-1);
                    }
                    iou_o.push(best);
                }
            }
        }
        let mut gt_max = vec![0.0f64; n];
        for (k, &g) in idx_o.iter().enumerate() {
            if g >= 0 {
                gt_max[g as usize] = gt_max[g as usize].max(iou_o[k]);
            }
        }
        for k in 0..idx_o.len() {
            let pono = if idx_o[k] >= 0 { iou_o[k] / gt_max[idx_o[k] as usize] } else { 0.0 };
            let same = m.match_index[k] == idx_o[k]
                && m.match_iou[k].to_bits() == iou_o[k].to_bits()
                && m.pono[k].to_bits() == pono.to_bits()
                && m.positive_mask[k] == (pono > 0.5);
            if !same {
                mismatches += 1;
            }
        }
    }
    let pass = mismatches == 0 && ties > 0 && start.elapsed() < MAX_TIME;
    report(
        "A2",
        "matching oracle",
        pass,
        format!(
            "{mismatches} bitwise mismatches (need 0) over {SCENES} scenes, {ties} tied anchors exercised, limit {}s",
            MAX_TIME.as_secs()
        ),
        start,
    );
    assert!(pass);
}

// ---------------------------------------------------------------- A3

fn overfit_camera() -> Camera {
    Camera {
        fx: 100.0,
        fy: 100.0,
        cx: 48.0,
        cy: 32.0,
        width: 96,
        height: 64,
    }
}

/// Three fully visible people side by side.
fn overfit_scene(sk: &Skeleton) -> SceneSample {
    let cam = overfit_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let poses = vec![
        place_person(&mut rng, sk, &cam, 6.0, 22.0, 1.6),
        place_person(&mut rng, sk, &cam, 8.0, 48.0, 1.6),
        place_person(&mut rng, sk, &cam, 5.0, 75.0, 1.6),
    ];
    let scene = assemble_scene(0, cam, sk, poses, 0.0, &mut rng);
    assert_eq!(scene.people.len(), 3);
    scene
}

#[test]
fn a3_end_to_end_overfit() {
    const MAX_STEPS: u64 = 5000;
    const REQUIRED_AP: f64 = 1.0;
    const MAX_3D_ERROR: f64 = 0.01;
    const MAX_2D_ERROR: f64 = 0.02;
    const MAX_TIME: Duration = Duration::from_secs(300);
    let start = Instant::now();
    let sk = Skeleton::human15();
    let scene = overfit_scene(&sk);
    let cfg = SceneConfig {
        camera: overfit_camera(),
        ..SceneConfig::default()
    };
    let pool = generate_dataset(5, 200, &cfg, &sk).unwrap();
    let boxes: Vec<_> = pool.iter().flat_map(|s| s.people.iter().map(|p| p.bbox)).collect();
    let priors = cluster_anchors(&boxes, 10, 100, 0).unwrap();
    let grid = AnchorGrid::for_image(96, 64, 8, priors).unwrap();

    let config = TrainConfig {
        steps: MAX_STEPS,
        lr: 0.005,
        momentum: 0.9,
        power: 0.9,
        log_every: 0,
        ..TrainConfig::default()
    };
    let data = vec![scene];
    let pred = DirectPredictor::new(&grid, sk.n_joints(), 1, config.cls_prior).unwrap();
    let mut trainer = Trainer::new(config, pred, &data, grid.clone(), &sk).unwrap();
    trainer.run_until(MAX_STEPS, None).unwrap();

    let dets = infer_dataset(&trainer.predictor, &data, &grid, DEFAULT_SCORE_THRESHOLD, DEFAULT_NMS_THRESHOLD)
        .unwrap()
        .remove(0)
        .1;
    let people = &data[0].people;
    let ap = average_precision(
        &[dets.iter().map(|d| (d.score, d.bbox)).collect()],
        &[people.iter().map(|p| p.bbox).collect()],
        0.5,
    )
    .unwrap()
    .ap;
    let pairing = match_for_pose_eval(
        &dets.iter().map(|d| d.bbox).collect::<Vec<_>>(),
        &people.iter().map(|p| p.bbox).collect::<Vec<_>>(),
    );
    let (mut e3, mut n3, mut e2, mut n2) = (0.0, 0usize, 0.0, 0usize);
    for &(d, g) in &pairing.pairs {
        let det = &dets[d];
        let gt = normalize_pose3d(&people[g].pose3d, &sk).unwrap();
        for (p, q) in det.pose3d.iter().zip(&gt) {
            e3 += (*p - *q).norm();
            n3 += 1;
        }
        let (i, j, a) = det.anchor_index;
        let anchor = grid.anchor_at(i, j, a).unwrap();
        for k in 0..sk.n_joints() {
            if people[g].visible[k] {
                let p = image_to_anchor(det.pose2d[k], &anchor);
                let q = image_to_anchor(people[g].pose2d[k], &anchor);
                e2 += (p - q).norm();
                n2 += 1;
            }
        }
    }
    let e3 = if n3 > 0 { e3 / n3 as f64 } else { f64::INFINITY };
    let e2 = if n2 > 0 { e2 / n2 as f64 } else { f64::INFINITY };
    let h = &trainer.history;
    let lambda_min = h.iter().map(|e| e.lambda_min).fold(f64::INFINITY, f64::min);
    let (best3d_step, best3d) = h
        .iter()
        .map(|e| (e.step, e.loss.raw_pose3d))
        .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
    let last = h.last().unwrap();
    let pass = ap >= REQUIRED_AP
        && pairing.missed.is_empty()
        && e3 < MAX_3D_ERROR
        && e2 < MAX_2D_ERROR
        && start.elapsed() < MAX_TIME;
    report(
        "A3",
        "end-to-end overfit",
        pass,
        format!(
            "AP@0.5 {ap:.4} (need {REQUIRED_AP}), {} detections, normalized 3D err {e3:.4} (< {MAX_3D_ERROR}), 2D err {e2:.4} anchor units (< {MAX_2D_ERROR}) after {} steps; \
             diagnostics: min lambda {lambda_min:.1e}, lowest raw 3D loss {best3d:.1e} at step {best3d_step}, final raw cls/loc/2D/3D {:.2e}/{:.2e}/{:.2e}/{:.2e}, limit {}s",
            dets.len(),
            trainer.step_count(),
            last.loss.raw_cls,
            last.loss.raw_loc,
            last.loss.raw_pose2d,
            last.loss.raw_pose3d,
            MAX_TIME.as_secs()
        ),
        start,
    );
    assert!(pass);
}

// ---------------------------------------------------------------- A4

/// Two people at nearly the same depth and position, box IoU at least 0.5.
fn overlapping_pair(rng: &mut ChaCha8Rng, sk: &Skeleton, cam: &Camera, image_id: u64) -> SceneSample {
    loop {
        let depth = rng.gen_range(4.0..9.0);
        let u = rng.gen_range(70.0..186.0);
        let depth2 = depth * rng.gen_range(0.95..1.05);
        let u2 = u + rng.gen_range(-10.0..10.0);
        let poses = vec![
            place_person(rng, sk, cam, depth, u, 1.6),
            place_person(rng, sk, cam, depth2, u2, 1.6),
        ];
        let s = assemble_scene(image_id, *cam, sk, poses, 0.0, rng);
        if s.people.len() == 2 && iou(&s.people[0].bbox, &s.people[1].bbox) >= 0.5 {
            return s;
        }
    }
}

#[test]
fn a4_pose_aware_selection_effect() {
    const SCENES: usize = 100;
    const AMBIGUITY: f64 = 0.1;
    let start = Instant::now();
    let sk = Skeleton::human15();
    let cam = Camera {
        fx: 300.0,
        fy: 300.0,
        cx: 128.0,
        cy: 96.0,
        width: 256,
        height: 192,
    };
    let cfg = SceneConfig {
        camera: cam,
        ..SceneConfig::default()
    };
    let pool = generate_dataset(9, 200, &cfg, &sk).unwrap();
    let boxes: Vec<_> = pool.iter().flat_map(|s| s.people.iter().map(|p| p.bbox)).collect();
    let grid = AnchorGrid::for_image(256, 192, 8, cluster_anchors(&boxes, 10, 100, 0).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut pose_aware, mut pono_only, mut ambiguous) = (0usize, 0usize, 0usize);
    for s in 0..SCENES {
        let sample = overlapping_pair(&mut rng, &sk, &cam, s as u64);
        let gt = GroundTruthScene::from_sample(&sample, &sk).unwrap();
        let m = match_scene(&grid, &gt);
        // A predictor that cannot tell the two people apart regresses the
        // IoU-weighted expectation of their poses.
        let mut pred = PredictionTensors::for_grid(&grid, sk.n_joints());
        let mut is_ambiguous = vec![false; grid.len()];
        for idx in 0..grid.len() {
            let Some(g) = m.matched(idx) else { continue };
            let anchor = grid.anchor_flat(idx);
            let ab = anchor.to_box();
            let mut ious: Vec<(f64, usize)> = gt.boxes.iter().enumerate().map(|(k, b)| (iou(b, &ab), k)).collect();
            ious.sort_by(|a, b| b.0.total_cmp(&a.0));
            is_ambiguous[idx] = ious.len() >= 2 && ious[1].0 > 0.0 && ious[0].0 - ious[1].0 <= AMBIGUITY;
            pred.set_offsets(idx, encode_box(&anchor, &gt.boxes[g]));
            let total: f64 = ious.iter().map(|x| x.0).sum();
            for k in 0..sk.n_joints() {
                let (mut x, mut y) = (0.0, 0.0);
                for &(w, p) in &ious {
                    x += w * gt.poses2d[p][k].x;
                    y += w * gt.poses2d[p][k].y;
                }
                pred.set_joint2d(idx, k, image_to_anchor(Point2D::new(x / total, y / total), &anchor));
            }
        }
        let aware = readout_labels_with_rule(ReadoutRule::PoseAware, &pred, &m, &grid);
        let plain = readout_labels_with_rule(ReadoutRule::PonoOnly, &pred, &m, &grid);
        for idx in 0..grid.len() {
            if is_ambiguous[idx] {
                ambiguous += 1;
                pose_aware += aware[idx] as usize;
                pono_only += plain[idx] as usize;
            }
        }
    }
    let mean_aware = pose_aware as f64 / SCENES as f64;
    let mean_plain = pono_only as f64 / SCENES as f64;
    let pass = mean_aware < mean_plain;
    report(
        "A4",
        "pose-aware selection effect",
        pass,
        format!(
            "positive labels on ambiguous anchors per scene: pose-aware {mean_aware:.2} < pono-only {mean_plain:.2} ({ambiguous} ambiguous anchors over {SCENES} scenes)"
        ),
        start,
    );
    assert!(pass);
}

// ---------------------------------------------------------------- A5

/// Classic formulation: repeatedly take the best remaining detection and
/// discard everything overlapping it.
fn nms_reference(dets: &[Detection], thr: f64) -> Vec<(usize, usize, usize)> {
    let mut rest: Vec<&Detection> = dets.iter().collect();
    let mut kept = Vec::new();
    while !rest.is_empty() {
        let mut best = 0;
        for k in 1..rest.len() {
            let (a, b) = (rest[k], rest[best]);
            if a.score > b.score || (a.score == b.score && a.anchor_index < b.anchor_index) {
                best = k;
            }
        }
        let top = rest.remove(best);
        kept.push(top.anchor_index);
        rest.retain(|d| oracle_iou(&top.bbox, &d.bbox) <= thr);
    }
    kept
}

#[test]
fn a5_nms_and_ap_oracles() {
    const SETS: usize = 1000;
    const AP_TOL: f64 = 1e-9;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut nms_mismatch = 0usize;
    for _ in 0..SETS {
        let n = rng.gen_range(0..=20usize);
        let thr = [0.3, 0.5, 0.7][rng.gen_range(0..3)];
        let dets: Vec<Detection> = (0..n)
            .map(|k| Detection {
                // coarse scores so ties occur
                score: (rng.gen_range(0..10) as f64) / 10.0,
                bbox: Box2D::from_center_size(
                    rng.gen_range(0.0..60.0),
                    rng.gen_range(0.0..60.0),
                    rng.gen_range(10.0..40.0),
                    rng.gen_range(10.0..40.0),
                ),
                pose2d: vec![],
                pose3d: vec![],
                anchor_index: (k, 0, 0),
            })
            .collect();
        let got: Vec<_> = nms(&dets, thr).iter().map(|d| d.anchor_index).collect();
        if got != nms_reference(&dets, thr) {
            nms_mismatch += 1;
        }
    }

    let gt = |k: usize| Box2D::from_center_size(50.0 * k as f64 + 20.0, 20.0, 20.0, 20.0);
    let miss = Box2D::from_center_size(500.0, 500.0, 20.0, 20.0);
    // (detections per image, ground truths per image, hand-computed AP)
    let scenarios: Vec<(Vec<Vec<(f64, Box2D)>>, Vec<Vec<Box2D>>, f64)> = vec![
        (vec![vec![(0.9, gt(0)), (0.8, gt(1))]], vec![vec![gt(0), gt(1)]], 1.0),
        // TP, FP, TP over two images
        (
            vec![vec![(0.9, gt(0)), (0.8, miss)], vec![(0.7, gt(0))]],
            vec![vec![gt(0)], vec![gt(0)]],
            0.5 + 0.5 * 2.0 / 3.0,
        ),
        (vec![vec![(0.9, miss), (0.8, gt(0))]], vec![vec![gt(0)]], 0.5),
        (vec![vec![(0.9, gt(0))]], vec![vec![gt(0), gt(1)]], 0.5),
        // TP, duplicate, FP, TP, TP
        (
            vec![vec![(0.9, gt(0)), (0.8, gt(0)), (0.7, miss), (0.6, gt(1)), (0.5, gt(2))]],
            vec![vec![gt(0), gt(1), gt(2)]],
            1.0 / 3.0 + 0.6 / 3.0 + 0.6 / 3.0,
        ),
    ];
    let mut ap_worst = 0.0f64;
    for (d, g, expected) in &scenarios {
        let got = average_precision(d, g, 0.5).unwrap().ap;
        ap_worst = ap_worst.max((got - expected).abs());
    }
    let pass = nms_mismatch == 0 && ap_worst <= AP_TOL;
    report(
        "A5",
        "NMS and AP oracles",
        pass,
        format!(
            "NMS mismatches {nms_mismatch}/{SETS} (need 0), worst AP deviation {ap_worst:.1e} over {} scenarios (<= {AP_TOL:e})",
            scenarios.len()
        ),
        start,
    );
    assert!(pass);
}

// ---------------------------------------------------------------- A6

#[test]
fn a6_metric_protocol() {
    const SWEEP_SCENES: usize = 50;
    let start = Instant::now();
    let sk = Skeleton::human15();
    let cfg = SceneConfig::default();

    let scene = (0..)
        .map(|seed| generate_dataset(seed, 1, &cfg, &sk).unwrap().remove(0))
        .find(|s| s.people.len() == 2)
        .unwrap();
    let p = &scene.people[0];
    let perfect = DetectionRecord {
        image_id: scene.image_id,
        score: 0.9,
        bbox: p.bbox,
        pose2d: p.pose2d.clone(),
        pose3d: normalize_pose3d(&p.pose3d, &sk).unwrap(),
    };
    let rep = evaluate(&[perfect], std::slice::from_ref(&scene), &sk, 150.0).unwrap();
    let penalty_ok = rep.pck3d == 50.0;

    let data = generate_dataset(31, SWEEP_SCENES, &cfg, &sk).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let subjects: Vec<EvalSubject> = data
        .iter()
        .flat_map(|s| s.people.iter())
        .map(|p| {
            let pred = rng.gen_bool(0.8).then(|| {
                normalize_pose3d(&p.pose3d, &sk)
                    .unwrap()
                    .iter()
                    .map(|q| *q + Point3D::new(gauss(&mut rng, 0.02), gauss(&mut rng, 0.02), gauss(&mut rng, 0.02)))
                    .collect()
            });
            EvalSubject {
                gt_pose3d: p.pose3d.clone(),
                depth: p.depth,
                pred_pose3d: pred,
            }
        })
        .collect();
    let mut monotone = true;
    let mut prev: Option<posegrid::metrics::PckResult> = None;
    for t in (0..=40).map(|k| k as f64 * 10.0) {
        let r = pck3d(&subjects, &sk, t);
        if let Some(p) = &prev {
            monotone &= r.pck >= p.pck;
            for (a, b) in r.per_distance_bin.iter().zip(&p.per_distance_bin) {
                monotone &= a.pck.unwrap_or(0.0) >= b.pck.unwrap_or(0.0);
            }
            for (a, b) in r.per_joint.iter().zip(&p.per_joint) {
                monotone &= a >= b;
            }
        }
        prev = Some(r);
    }
    let pass = penalty_ok && monotone;
    report(
        "A6",
        "metric protocol",
        pass,
        format!(
            "one perfect match + one miss -> 3DPCK {:.1}% (need exactly 50.0), threshold sweep 0..400 mm monotone: {monotone} over {SWEEP_SCENES} scenes / {} subjects",
            rep.pck3d,
            subjects.len()
        ),
        start,
    );
    assert!(pass);
}

// ---------------------------------------------------------------- A7

#[test]
fn a7_normalization() {
    const POSES: usize = 1000;
    const TOL: f64 = 1e-9;
    let start = Instant::now();
    let sk = Skeleton::human15();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut worst_sum, mut worst_inv) = (0.0f64, 0.0f64);
    for _ in 0..POSES {
        let pose: Vec<Point3D> = (0..sk.n_joints())
            .map(|_| Point3D::new(gauss(&mut rng, 0.5), gauss(&mut rng, 0.5), gauss(&mut rng, 0.5) + 5.0))
            .collect();
        let n = normalize_pose3d(&pose, &sk).unwrap();
        worst_sum = worst_sum.max((sk.bone_length_sum(&n) - 1.0).abs());
        let c = rng.gen_range(0.1..10.0);
        let t = Point3D::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0));
        let moved: Vec<Point3D> = pose.iter().map(|&p| p * c + t).collect();
        let n2 = normalize_pose3d(&moved, &sk).unwrap();
        for (a, b) in n.iter().zip(&n2) {
            worst_inv = worst_inv.max((*a - *b).norm());
        }
    }
    let pass = worst_sum < TOL && worst_inv < TOL;
    report(
        "A7",
        "normalization",
        pass,
        format!("max |bone sum - 1| {worst_sum:.1e}, max change under translation/scaling {worst_inv:.1e} (both < {TOL:e}) over {POSES} poses"),
        start,
    );
    assert!(pass);
}

// ---------------------------------------------------------------- A8

/// Golden-section minimum of a unimodal `f` on `[a, b]`.
fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
        if b - a < 1e-12 {
            break;
        }
    }
    0.5 * (a + b)
}

#[test]
fn a8_lambda_stationarity() {
    const CASES: usize = 20;
    /// Relative tolerance on the minimizer: `|λ*·X − 1|`.
    const TOL: f64 = 1e-6;
    let start = Instant::now();
    let sk = Skeleton::chain(3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tasks = [Task::Cls, Task::Loc, Task::Pose2d, Task::Pose3d];
    let mut worst = 0.0f64;
    let mut x_range = (f64::INFINITY, 0.0f64);
    let mut cases = 0;
    while cases < CASES {
        let inst = random_instance(&mut rng, &sk);
        let np = inst.m.n_positive();
        if np == 0 {
            continue;
        }
        let task = tasks[cases % 4];
        let mut w = LossWeights::ones(inst.grid.n_anchors(), sk.n_joints());
        let b0 = total_loss(&inst.pred, &inst.m, &inst.grid, &w).unwrap();
        let nk = sk.n_joints() as f64;
        // the task's normalized raw loss
        let x = match task {
            Task::Cls => b0.raw_cls / inst.grid.len() as f64,
            Task::Loc => b0.raw_loc / np as f64,
            Task::Pose2d => b0.raw_pose2d / (nk * np as f64),
            Task::Pose3d => b0.raw_pose3d / (nk * np as f64),
        };
        if x <= 0.0 {
            continue;
        }
        cases += 1;
        x_range = (x_range.0.min(x), x_range.1.max(x));
        let ti = LossWeights::task_index(task);
        let objective = |s: f64| {
            w.values[ti] = s;
            total_loss(&inst.pred, &inst.m, &inst.grid, &w).unwrap().total
        };
        let objective = std::cell::RefCell::new(objective);
        let s_star = golden_section(|s| (objective.borrow_mut())(s), -30.0, 30.0);
        worst = worst.max((s_star.exp() * x - 1.0).abs());
    }
    let pass = worst < TOL;
    report(
        "A8",
        "lambda stationarity",
        pass,
        format!(
            "max |lambda* X - 1| {worst:.1e} < {TOL:e} over {CASES} cases, X in [{:.3}, {:.3}], minimized through the full weighted objective",
            x_range.0, x_range.1
        ),
        start,
    );
    assert!(pass);
}

// ---------------------------------------------------------------- A9

fn determinism_config() -> SceneConfig {
    SceneConfig {
        camera: Camera {
            fx: 150.0,
            fy: 150.0,
            cx: 80.0,
            cy: 48.0,
            width: 160,
            height: 96,
        },
        ..SceneConfig::default()
    }
}

fn run_training(dir: &std::path::Path, data: &[SceneSample], sk: &Skeleton) -> Vec<u8> {
    let cfg = determinism_config();
    let boxes: Vec<_> = data.iter().flat_map(|s| s.people.iter().map(|p| p.bbox)).collect();
    let grid = AnchorGrid::for_image(
        cfg.camera.width,
        cfg.camera.height,
        8,
        cluster_anchors(&boxes, 4, 50, 1).unwrap(),
    )
    .unwrap();
    let config = TrainConfig {
        steps: 30,
        lr: 0.05,
        batch_size: 2,
        checkpoint_every: 10,
        log_every: 0,
        seed: 4,
        ..TrainConfig::default()
    };
    let pred = DirectPredictor::new(&grid, sk.n_joints(), data.len(), config.cls_prior).unwrap();
    let mut tr = Trainer::new(config, pred, data, grid, sk).unwrap();
    tr.run_until(u64::MAX, Some(dir)).unwrap();
    let hist = dir.join("history.jsonl");
    save_history(&hist, &tr.history).unwrap();
    std::fs::read(hist).unwrap()
}

#[test]
fn a9_determinism() {
    let start = Instant::now();
    let sk = Skeleton::human15();
    let cfg = determinism_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut datasets = Vec::new();
    let mut histories = Vec::new();
    for d in &dirs {
        let data = generate_dataset(123, 6, &cfg, &sk).unwrap();
        let path = d.path().join("data.jsonl");
        save_dataset(&path, &data).unwrap();
        datasets.push(std::fs::read(&path).unwrap());
        histories.push(run_training(d.path(), &data, &sk));
    }
    let same_data = datasets[0] == datasets[1];
    let same_history = histories[0] == histories[1];
    let mut same_ckpt = true;
    let mut n_ckpt = 0;
    for step in [10, 20, 30] {
        let a = std::fs::read(checkpoint_path(dirs[0].path(), step)).unwrap();
        let b = std::fs::read(checkpoint_path(dirs[1].path(), step)).unwrap();
        same_ckpt &= a == b;
        n_ckpt += 1;
    }
    let pass = same_data && same_history && same_ckpt;
    report(
        "A9",
        "determinism",
        pass,
        format!(
            "byte-identical across two runs: dataset {same_data} ({} bytes), history {same_history}, {n_ckpt} checkpoints {same_ckpt}",
            datasets[0].len()
        ),
        start,
    );
    assert!(pass);
}
