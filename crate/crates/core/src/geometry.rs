//! Boxes, points, IoU and the anchor-space transforms.
//!
//! Boxes are stored in corner form, anchors in center form. Box offsets use
//! the exponential center/size parameterization
//! `center = anchor_center + (tx * w, ty * h)`, `size = (w * e^tw, h * e^th)`.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-size offsets are clamped to this magnitude before exponentiation.
pub const OFFSET_LOG_CLAMP: f64 = 8.0;

/// Axis-aligned box in corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Box2D {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl From<[f64; 4]> for Box2D {
    fn from(v: [f64; 4]) -> Self {
        Box2D {
            xmin: v[0],
            ymin: v[1],
            xmax: v[2],
            ymax: v[3],
        }
    }
}

impl From<Box2D> for [f64; 4] {
    fn from(b: Box2D) -> Self {
        [b.xmin, b.ymin, b.xmax, b.ymax]
    }
}

impl Box2D {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = Box2D {
            xmin,
            ymin,
            xmax,
            ymax,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidInput(format!(
                "box ({xmin}, {ymin}, {xmax}, {ymax}) is not ordered or not finite"
            )))
        }
    }

    pub fn from_center_size(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Box2D {
            xmin: cx - 0.5 * w,
            ymin: cy - 0.5 * h,
            xmax: cx + 0.5 * w,
            ymax: cy + 0.5 * h,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.xmin, self.ymin, self.xmax, self.ymax]
            .iter()
            .all(|v| v.is_finite())
            && self.xmax >= self.xmin
            && self.ymax >= self.ymin
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> Point2D {
        Point2D::new(0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    /// Multiplies every coordinate by `s` (a similarity about the origin).
    pub fn scaled(&self, s: f64) -> Self {
        Box2D {
            xmin: self.xmin * s,
            ymin: self.ymin * s,
            xmax: self.xmax * s,
            ymax: self.ymax * s,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Box2D {
            xmin: self.xmin + dx,
            ymin: self.ymin + dy,
            xmax: self.xmax + dx,
            ymax: self.ymax + dy,
        }
    }

    /// Tight bound of `points`, expanded on every side by `margin` times
    /// the bound's width/height. `None` for an empty iterator.
    pub fn bounding(points: impl IntoIterator<Item = Point2D>, margin: f64) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
        for p in it {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        let mx = margin * (x1 - x0);
        let my = margin * (y1 - y0);
        Some(Box2D {
            xmin: x0 - mx,
            ymin: y0 - my,
            xmax: x1 + mx,
            ymax: y1 + my,
        })
    }

    pub fn contains(&self, p: Point2D) -> bool {
        p.x >= self.xmin && p.x <= self.xmax && p.y >= self.ymin && p.y <= self.ymax
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2D { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl From<[f64; 2]> for Point2D {
    fn from(v: [f64; 2]) -> Self {
        Point2D::new(v[0], v[1])
    }
}

impl From<Point2D> for [f64; 2] {
    fn from(p: Point2D) -> Self {
        [p.x, p.y]
    }
}

impl Add for Point2D {
    type Output = Point2D;
    fn add(self, o: Point2D) -> Point2D {
        Point2D::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2D {
    type Output = Point2D;
    fn sub(self, o: Point2D) -> Point2D {
        Point2D::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2D {
    type Output = Point2D;
    fn mul(self, s: f64) -> Point2D {
        Point2D::new(self.x * s, self.y * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Point3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3D {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3D { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn norm_squared(&self) -> f64 {
        self.x * self.x + self.y * self.y + self.z * self.z
    }
}

impl From<[f64; 3]> for Point3D {
    fn from(v: [f64; 3]) -> Self {
        Point3D::new(v[0], v[1], v[2])
    }
}

impl From<Point3D> for [f64; 3] {
    fn from(p: Point3D) -> Self {
        [p.x, p.y, p.z]
    }
}

impl Add for Point3D {
    type Output = Point3D;
    fn add(self, o: Point3D) -> Point3D {
        Point3D::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3D {
    type Output = Point3D;
    fn sub(self, o: Point3D) -> Point3D {
        Point3D::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3D {
    type Output = Point3D;
    fn mul(self, s: f64) -> Point3D {
        Point3D::new(self.x * s, self.y * s, self.z * s)
    }
}

/// A prior box in center form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorBox {
    pub center_x: f64,
    pub center_y: f64,
    pub width: f64,
    pub height: f64,
}

impl AnchorBox {
    pub fn new(center_x: f64, center_y: f64, width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) || !center_x.is_finite() || !center_y.is_finite() {
            return Err(Error::InvalidInput(format!(
                "anchor must have positive size, got {width}x{height}"
            )));
        }
        Ok(AnchorBox {
            center_x,
            center_y,
            width,
            height,
        })
    }

    pub fn to_box(&self) -> Box2D {
        Box2D::from_center_size(self.center_x, self.center_y, self.width, self.height)
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    let inter = overlap(a.xmin, a.xmax, b.xmin, b.xmax) * overlap(a.ymin, a.ymax, b.ymin, b.ymax);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU and its gradient with respect to the corners of `pred`
/// (`[xmin, ymin, xmax, ymax]`), with `target` held fixed.
///
/// Where an edge of `pred` coincides with an edge of `target` the one-sided
/// derivative is used in which `target`'s edge bounds the intersection.
pub fn iou_with_grad(pred: &Box2D, target: &Box2D) -> (f64, [f64; 4]) {
    let iw = pred.xmax.min(target.xmax) - pred.xmin.max(target.xmin);
    let ih = pred.ymax.min(target.ymax) - pred.ymin.max(target.ymin);
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let pw = pred.width();
    let ph = pred.height();
    let union = pw * ph + target.area() - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let value = inter / union;

    // d(inter)/d(corner)
    let di = [
        if pred.xmin > target.xmin { -ih } else { 0.0 },
        if pred.ymin > target.ymin { -iw } else { 0.0 },
        if pred.xmax < target.xmax { ih } else { 0.0 },
        if pred.ymax < target.ymax { iw } else { 0.0 },
    ];
    // d(area_pred)/d(corner)
    let da = [-ph, -pw, ph, pw];

    // IoU = I / (A + G - I)
    let u2 = union * union;
    let mut grad = [0.0; 4];
    for c in 0..4 {
        grad[c] = (di[c] * (union + inter) - inter * da[c]) / u2;
    }
    (value, grad)
}

/// IoU of two axis-aligned unit squares centered at `p` and `q`.
pub fn unit_square_iou(p: Point2D, q: Point2D) -> f64 {
    let ox = (1.0 - (p.x - q.x).abs()).max(0.0);
    let oy = (1.0 - (p.y - q.y).abs()).max(0.0);
    let inter = ox * oy;
    inter / (2.0 - inter)
}

/// Unit-square IoU and its gradient with respect to `pred`.
///
/// At `pred == target` along an axis the overlap is maximal and the
/// derivative along that axis is taken as 0.
pub fn unit_square_iou_with_grad(pred: Point2D, target: Point2D) -> (f64, [f64; 2]) {
    let dx = pred.x - target.x;
    let dy = pred.y - target.y;
    let ox = 1.0 - dx.abs();
    let oy = 1.0 - dy.abs();
    if ox <= 0.0 || oy <= 0.0 {
        return (0.0, [0.0; 2]);
    }
    let inter = ox * oy;
    let denom = 2.0 - inter;
    let value = inter / denom;
    let dv_dinter = 2.0 / (denom * denom);
    let sx = if dx > 0.0 {
        1.0
    } else if dx < 0.0 {
        -1.0
    } else {
        0.0
    };
    let sy = if dy > 0.0 {
        1.0
    } else if dy < 0.0 {
        -1.0
    } else {
        0.0
    };
    (value, [-sx * oy * dv_dinter, -sy * ox * dv_dinter])
}

/// Pixel coordinates to the anchor's normalized frame.
pub fn image_to_anchor(p: Point2D, a: &AnchorBox) -> Point2D {
    Point2D::new((p.x - a.center_x) / a.width, (p.y - a.center_y) / a.height)
}

/// Inverse of [`image_to_anchor`].
pub fn anchor_to_image(p: Point2D, a: &AnchorBox) -> Point2D {
    Point2D::new(p.x * a.width + a.center_x, p.y * a.height + a.center_y)
}

fn clamp_log(v: f64) -> f64 {
    v.clamp(-OFFSET_LOG_CLAMP, OFFSET_LOG_CLAMP)
}

/// Applies `(tx, ty, tw, th)` to the anchor.
pub fn decode_box(a: &AnchorBox, offsets: &[f64; 4]) -> Box2D {
    let cx = a.center_x + offsets[0] * a.width;
    let cy = a.center_y + offsets[1] * a.height;
    let w = a.width * clamp_log(offsets[2]).exp();
    let h = a.height * clamp_log(offsets[3]).exp();
    Box2D::from_center_size(cx, cy, w, h)
}

/// Decoded box plus the Jacobian `jac[corner][offset]`.
pub fn decode_box_with_jacobian(a: &AnchorBox, offsets: &[f64; 4]) -> (Box2D, [[f64; 4]; 4]) {
    let b = decode_box(a, offsets);
    let w = b.width();
    let h = b.height();
    let dw = if offsets[2].abs() < OFFSET_LOG_CLAMP { 0.5 * w } else { 0.0 };
    let dh = if offsets[3].abs() < OFFSET_LOG_CLAMP { 0.5 * h } else { 0.0 };
    let jac = [
        [a.width, 0.0, -dw, 0.0],
        [0.0, a.height, 0.0, -dh],
        [a.width, 0.0, dw, 0.0],
        [0.0, a.height, 0.0, dh],
    ];
    (b, jac)
}

/// Offsets that decode to `target` exactly; `target` must have positive size.
pub fn encode_box(a: &AnchorBox, target: &Box2D) -> [f64; 4] {
    let c = target.center();
    [
        (c.x - a.center_x) / a.width,
        (c.y - a.center_y) / a.height,
        (target.width() / a.width).ln(),
        (target.height() / a.height).ln(),
    ]
}
