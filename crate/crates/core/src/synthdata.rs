//! Deterministic synthetic multi-person scenes.
//!
//! People are articulated skeletons posed by forward kinematics within
//! per-joint angle limits, placed at log-uniform depth in front of a pinhole
//! camera and projected to the image. Joints leave the visible set when they
//! fall outside the frame, behind a nearer person's box (with probability
//! `occlusion_rate`) or through random dropout.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box2D, Point2D, Point3D};
use crate::par;

/// Current dataset line schema.
pub const DATASET_VERSION: u32 = 1;
/// Relative margin added around the visible joints to form a person box.
pub const BOX_MARGIN: f64 = 0.05;
/// People need at least this many visible joints to be kept.
pub const MIN_VISIBLE_JOINTS: usize = 2;
/// Per-joint dropout probability as a fraction of the occlusion rate.
const DROPOUT_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLimits {
    /// Rotation about the body's lateral axis, radians.
    pub flex: (f64, f64),
    /// Rotation about the body's forward axis, radians.
    pub abduction: (f64, f64),
}

impl JointLimits {
    pub const FIXED: JointLimits = JointLimits {
        flex: (0.0, 0.0),
        abduction: (0.0, 0.0),
    };

    pub const fn new(flex: (f64, f64), abduction: (f64, f64)) -> Self {
        JointLimits { flex, abduction }
    }
}

/// A kinematic tree of joints with rest-pose bone offsets (body frame,
/// meters, y up) and angle limits for the bone ending at each joint.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    root: usize,
    rest: Vec<Point3D>,
    limits: Vec<JointLimits>,
    order: Vec<usize>,
}

impl Skeleton {
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        rest: Vec<Point3D>,
        limits: Vec<JointLimits>,
    ) -> Result<Self> {
        let n = names.len();
        if n == 0 || parents.len() != n || rest.len() != n || limits.len() != n {
            return Err(Error::InvalidInput(
                "skeleton names, parents, rest offsets and limits must have equal non-zero length".into(),
            ));
        }
        let roots: Vec<usize> = (0..n).filter(|&k| parents[k].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "skeleton must have exactly one root, found {}",
                roots.len()
            )));
        }
        let root = roots[0];
        // breadth-first order from the root; every joint must be reached once
        let mut order = vec![root];
        let mut head = 0;
        while head < order.len() {
            let p = order[head];
            head += 1;
            for c in 0..n {
                if parents[c] == Some(p) {
                    order.push(c);
                }
            }
        }
        if order.len() != n || parents.iter().any(|p| p.is_some_and(|p| p >= n)) {
            return Err(Error::InvalidInput("skeleton edges do not form a tree".into()));
        }
        Ok(Skeleton {
            names,
            parents,
            root,
            rest,
            limits,
            order,
        })
    }

    /// 15-joint pelvis-rooted body.
    pub fn human15() -> Self {
        let l = JointLimits::new;
        let joints: [(&str, Option<usize>, [f64; 3], JointLimits); 15] = [
            ("pelvis", None, [0.0, 0.0, 0.0], JointLimits::FIXED),
            ("neck", Some(0), [0.0, 0.50, 0.0], l((-0.15, 0.35), (-0.1, 0.1))),
            ("head", Some(1), [0.0, 0.22, 0.0], l((-0.3, 0.4), (-0.2, 0.2))),
            ("l_shoulder", Some(1), [0.18, 0.0, 0.0], JointLimits::FIXED),
            ("l_elbow", Some(3), [0.0, -0.29, 0.0], l((-1.6, 0.8), (0.0, 1.4))),
            ("l_wrist", Some(4), [0.0, -0.26, 0.0], l((-2.2, 0.0), (0.0, 0.0))),
            ("r_shoulder", Some(1), [-0.18, 0.0, 0.0], JointLimits::FIXED),
            ("r_elbow", Some(6), [0.0, -0.29, 0.0], l((-1.6, 0.8), (-1.4, 0.0))),
            ("r_wrist", Some(7), [0.0, -0.26, 0.0], l((-2.2, 0.0), (0.0, 0.0))),
            ("l_hip", Some(0), [0.10, -0.05, 0.0], JointLimits::FIXED),
            ("l_knee", Some(9), [0.0, -0.43, 0.0], l((-0.9, 0.4), (0.0, 0.3))),
            ("l_ankle", Some(10), [0.0, -0.42, 0.0], l((0.0, 1.5), (0.0, 0.0))),
            ("r_hip", Some(0), [-0.10, -0.05, 0.0], JointLimits::FIXED),
            ("r_knee", Some(12), [0.0, -0.43, 0.0], l((-0.9, 0.4), (-0.3, 0.0))),
            ("r_ankle", Some(13), [0.0, -0.42, 0.0], l((0.0, 1.5), (0.0, 0.0))),
        ];
        Skeleton::new(
            joints.iter().map(|j| j.0.to_string()).collect(),
            joints.iter().map(|j| j.1).collect(),
            joints.iter().map(|j| Point3D::from(j.2)).collect(),
            joints.iter().map(|j| j.3).collect(),
        )
        .expect("built-in skeleton is a tree")
    }

    /// A vertical chain of `n` joints, 0.4 m bones, mild articulation.
    pub fn chain(n: usize) -> Self {
        assert!(n >= 1);
        Skeleton::new(
            (0..n).map(|k| format!("j{k}")).collect(),
            (0..n).map(|k| k.checked_sub(1)).collect(),
            (0..n)
                .map(|k| if k == 0 { Point3D::default() } else { Point3D::new(0.0, 0.4, 0.0) })
                .collect(),
            (0..n)
                .map(|k| {
                    if k == 0 {
                        JointLimits::FIXED
                    } else {
                        JointLimits::new((-0.5, 0.5), (-0.5, 0.5))
                    }
                })
                .collect(),
        )
        .expect("chain is a tree")
    }

    pub fn n_joints(&self) -> usize {
        self.names.len()
    }

    pub fn root_index(&self) -> usize {
        self.root
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parent(&self, k: usize) -> Option<usize> {
        self.parents[k]
    }

    /// `(parent, child)` pairs in joint order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n_joints())
            .filter_map(|c| self.parents[c].map(|p| (p, c)))
            .collect()
    }

    /// Joints ordered so that parents precede children.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    /// Sum of bone lengths of `pose`.
    pub fn bone_length_sum(&self, pose: &[Point3D]) -> f64 {
        par::ordered_sum(self.edges().iter().map(|&(p, c)| (pose[c] - pose[p]).norm()))
    }

    /// Root-centered body-frame pose (y up) with joint angles drawn
    /// uniformly within limits and bones scaled by `scale`.
    pub fn sample_body_pose(&self, rng: &mut impl Rng, scale: f64) -> Vec<Point3D> {
        let n = self.n_joints();
        let mut rot = vec![Rotation3::<f64>::identity(); n];
        let mut pos = vec![Point3D::default(); n];
        for &k in &self.order {
            let Some(p) = self.parents[k] else { continue };
            let lim = self.limits[k];
            let flex = uniform(rng, lim.flex);
            let abd = uniform(rng, lim.abduction);
            let local = Rotation3::from_axis_angle(&Vector3::z_axis(), abd)
                * Rotation3::from_axis_angle(&Vector3::x_axis(), flex);
            rot[k] = rot[p] * local;
            let r = self.rest[k];
            let off = rot[k] * Vector3::new(r.x, r.y, r.z) * scale;
            pos[k] = pos[p] + Point3D::new(off.x, off.y, off.z);
        }
        let origin = pos[self.root];
        pos.iter().map(|&q| q - origin).collect()
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Pinhole intrinsics and image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            fx: 560.0,
            fy: 560.0,
            cx: 320.0,
            cy: 192.0,
            width: 640,
            height: 384,
        }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput(format!("invalid camera {self:?}")));
        }
        Ok(())
    }

    pub fn project(&self, p: Point3D) -> Point2D {
        Point2D::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn in_frame(&self, p: Point2D) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }
}

/// One annotated person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Person {
    /// Camera-frame joints in meters.
    pub pose3d: Vec<Point3D>,
    /// Pixel projections of `pose3d` (including invisible joints).
    pub pose2d: Vec<Point2D>,
    #[serde(rename = "box")]
    pub bbox: Box2D,
    pub visible: Vec<bool>,
    /// Root joint depth in meters.
    pub depth: f64,
}

impl Person {
    pub fn n_visible(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub version: u32,
    pub image_id: u64,
    pub camera: Camera,
    pub people: Vec<Person>,
}

/// Scene generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub people_min: usize,
    pub people_max: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub occlusion_rate: f64,
    /// Horizontal placement range as fractions of image width.
    pub horizontal_range: (f64, f64),
    /// Camera height above the ground plane, meters.
    pub camera_height: (f64, f64),
    pub camera: Camera,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            people_min: 2,
            people_max: 8,
            depth_min: 3.0,
            depth_max: 45.0,
            occlusion_rate: 0.3,
            horizontal_range: (0.1, 0.9),
            camera_height: (1.2, 2.2),
            camera: Camera::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if self.people_min > self.people_max {
            return Err(Error::InvalidInput(format!(
                "people range {}..={} is empty",
                self.people_min, self.people_max
            )));
        }
        if !(self.depth_min > 0.0 && self.depth_max >= self.depth_min && self.depth_max.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "depth range [{}, {}] must be positive and ordered",
                self.depth_min, self.depth_max
            )));
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return Err(Error::InvalidInput(format!(
                "occlusion rate {} must lie in [0, 1)",
                self.occlusion_rate
            )));
        }
        let (h0, h1) = self.horizontal_range;
        if !(0.0 <= h0 && h0 <= h1 && h1 <= 1.0) {
            return Err(Error::InvalidInput("horizontal range must lie within [0, 1]".into()));
        }
        if !(self.camera_height.0 <= self.camera_height.1) {
            return Err(Error::InvalidInput("camera height range is empty".into()));
        }
        Ok(())
    }
}

/// Poses a person with its root at `depth` meters, projecting to
/// horizontal pixel `u`, feet on a ground plane `camera_height` below the
/// camera. Returns camera-frame joints (y down).
pub fn place_person(
    rng: &mut impl Rng,
    skeleton: &Skeleton,
    camera: &Camera,
    depth: f64,
    u: f64,
    camera_height: f64,
) -> Vec<Point3D> {
    let scale = rng.gen_range(0.85..1.1);
    let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
    let body = skeleton.sample_body_pose(rng, scale);
    let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
    let body: Vec<Point3D> = body
        .iter()
        .map(|p| {
            let v = rot * Vector3::new(p.x, p.y, p.z);
            Point3D::new(v.x, v.y, v.z)
        })
        .collect();
    let lowest = body.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let x0 = (u - camera.cx) * depth / camera.fx;
    body.iter()
        .map(|p| Point3D::new(x0 + p.x, camera_height - (p.y - lowest), depth + p.z))
        .collect()
}

/// Projects camera-frame people, assigns visibility and boxes, and drops
/// people left with fewer than two visible joints or a zero-area box.
pub fn assemble_scene(
    image_id: u64,
    camera: Camera,
    skeleton: &Skeleton,
    poses3d: Vec<Vec<Point3D>>,
    occlusion_rate: f64,
    rng: &mut impl Rng,
) -> SceneSample {
    let root = skeleton.root_index();
    let projected: Vec<Vec<Point2D>> = poses3d
        .iter()
        .map(|pose| pose.iter().map(|&p| camera.project(p)).collect())
        .collect();
    // nearest first; occluders use the extent of their in-frame joints
    let mut by_depth: Vec<usize> = (0..poses3d.len()).collect();
    by_depth.sort_by(|&a, &b| poses3d[a][root].z.total_cmp(&poses3d[b][root].z).then(a.cmp(&b)));
    let extents: Vec<Option<Box2D>> = projected
        .iter()
        .map(|pose| Box2D::bounding(pose.iter().copied().filter(|&p| camera.in_frame(p)), 0.0))
        .collect();

    let mut visible = vec![Vec::new(); poses3d.len()];
    for (rank, &p) in by_depth.iter().enumerate() {
        let nearer = &by_depth[..rank];
        visible[p] = projected[p]
            .iter()
            .map(|&q| {
                let mut vis = camera.in_frame(q);
                for &o in nearer {
                    if let Some(b) = extents[o] {
                        if b.contains(q) && rng.gen::<f64>() < occlusion_rate {
                            vis = false;
                        }
                    }
                }
                if rng.gen::<f64>() < occlusion_rate * DROPOUT_FRACTION {
                    vis = false;
                }
                vis
            })
            .collect();
    }

    let people = poses3d
        .into_iter()
        .zip(projected)
        .zip(visible)
        .filter_map(|((pose3d, pose2d), visible)| {
            let person = make_person(pose3d, pose2d, visible, root)?;
            Some(person)
        })
        .collect();
    SceneSample {
        version: DATASET_VERSION,
        image_id,
        camera,
        people,
    }
}

fn make_person(pose3d: Vec<Point3D>, pose2d: Vec<Point2D>, visible: Vec<bool>, root: usize) -> Option<Person> {
    let bbox = visible_box(&pose2d, &visible)?;
    Some(Person {
        depth: pose3d[root].z,
        pose3d,
        pose2d,
        bbox,
        visible,
    })
}

/// Box of the visible joints with [`BOX_MARGIN`]; `None` when the person
/// does not qualify.
pub fn visible_box(pose2d: &[Point2D], visible: &[bool]) -> Option<Box2D> {
    let n_vis = visible.iter().filter(|&&v| v).count();
    if n_vis < MIN_VISIBLE_JOINTS {
        return None;
    }
    let b = Box2D::bounding(
        pose2d.iter().zip(visible).filter(|(_, &v)| v).map(|(&p, _)| p),
        BOX_MARGIN,
    )?;
    (b.area() > 0.0).then_some(b)
}

/// Generates one scene; a pure function of `seed` and the configuration.
pub fn generate_scene(seed: u64, config: &SceneConfig, skeleton: &Skeleton) -> Result<SceneSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = config.camera;
    let n = rng.gen_range(config.people_min..=config.people_max);
    let cam_height = uniform(&mut rng, config.camera_height);
    let (lo, hi) = (config.depth_min.ln(), config.depth_max.ln());
    let poses3d: Vec<Vec<Point3D>> = (0..n)
        .map(|_| {
            let depth = uniform(&mut rng, (lo, hi)).exp();
            let (h0, h1) = config.horizontal_range;
            let u = uniform(&mut rng, (h0, h1)) * cam.width as f64;
            place_person(&mut rng, skeleton, &cam, depth, u, cam_height)
        })
        .collect();
    Ok(assemble_scene(seed, cam, skeleton, poses3d, config.occlusion_rate, &mut rng))
}

/// Seed of the `index`-th image of a dataset generated from `seed`.
pub fn image_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 over the pair
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n_images` scenes, generated in parallel; image ids are `0..n_images`.
pub fn generate_dataset(
    seed: u64,
    n_images: usize,
    config: &SceneConfig,
    skeleton: &Skeleton,
) -> Result<Vec<SceneSample>> {
    config.validate()?;
    par::map_range(n_images, |k| {
        let mut s = generate_scene(image_seed(seed, k as u64), config, skeleton)?;
        s.image_id = k as u64;
        Ok(s)
    })
    .into_iter()
    .collect()
}

/// Scales pixel coordinates by `scale`, then optionally crops to `crop`
/// (given in scaled pixels). 3D poses are untouched; joints leaving the
/// frame become invisible, boxes are recomputed from visible joints and
/// people that no longer qualify are dropped.
pub fn transform_sample(sample: &SceneSample, scale: f64, crop: Option<Box2D>) -> Result<SceneSample> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidInput(format!("scale {scale} must be positive")));
    }
    let (x0, y0, w, h) = match crop {
        Some(c) => {
            if !(c.is_valid() && c.width() >= 1.0 && c.height() >= 1.0) {
                return Err(Error::InvalidInput(format!("crop window {c:?} is empty")));
            }
            (c.xmin, c.ymin, c.width().round() as u32, c.height().round() as u32)
        }
        None => (
            0.0,
            0.0,
            (sample.camera.width as f64 * scale).round() as u32,
            (sample.camera.height as f64 * scale).round() as u32,
        ),
    };
    let c = sample.camera;
    let camera = Camera {
        fx: c.fx * scale,
        fy: c.fy * scale,
        cx: c.cx * scale - x0,
        cy: c.cy * scale - y0,
        width: w.max(1),
        height: h.max(1),
    };
    let people = sample
        .people
        .iter()
        .filter_map(|p| {
            let pose2d: Vec<Point2D> = p
                .pose2d
                .iter()
                .map(|q| Point2D::new(q.x * scale - x0, q.y * scale - y0))
                .collect();
            let visible: Vec<bool> = p
                .visible
                .iter()
                .zip(&pose2d)
                .map(|(&v, &q)| v && (crop.is_none() || camera.in_frame(q)))
                .collect();
            let bbox = visible_box(&pose2d, &visible)?;
            Some(Person {
                pose3d: p.pose3d.clone(),
                pose2d,
                bbox,
                visible,
                depth: p.depth,
            })
        })
        .collect();
    Ok(SceneSample {
        version: sample.version,
        image_id: sample.image_id,
        camera,
        people,
    })
}

/// Random scale in `scale_range` followed by a random crop of
/// `crop_size` pixels (when given and smaller than the scaled image).
pub fn augment(
    sample: &SceneSample,
    seed: u64,
    scale_range: (f64, f64),
    crop_size: Option<(u32, u32)>,
) -> Result<SceneSample> {
    let (lo, hi) = scale_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::InvalidInput(format!("scale range [{lo}, {hi}] must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = uniform(&mut rng, scale_range);
    let crop = crop_size.map(|(cw, ch)| {
        let sw = sample.camera.width as f64 * scale;
        let sh = sample.camera.height as f64 * scale;
        let x0 = uniform(&mut rng, (0.0, (sw - cw as f64).max(0.0))).floor();
        let y0 = uniform(&mut rng, (0.0, (sh - ch as f64).max(0.0))).floor();
        Box2D {
            xmin: x0,
            ymin: y0,
            xmax: x0 + cw as f64,
            ymax: y0 + ch as f64,
        }
    });
    transform_sample(sample, scale, crop)
}

pub fn save_dataset(path: impl AsRef<Path>, samples: &[SceneSample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<SceneSample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            message: e.to_string(),
        })?;
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != DATASET_VERSION {
            return Err(Error::SchemaVersion {
                path: path.to_path_buf(),
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let sample: SceneSample = serde_json::from_value(value).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            message: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}
