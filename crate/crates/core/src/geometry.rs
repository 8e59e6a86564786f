//! Planar geometry: poses, oriented boxes, exact rotated-box IoU and ray tests.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into (-π, π].
pub fn normalize_angle(angle: f64) -> f64 {
    let wrapped = angle.rem_euclid(2.0 * PI);
    if wrapped > PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

/// Position and heading in the world (or some local) frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.yaw.is_finite()
    }

    pub fn distance_to(&self, other: &Pose2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Expresses a world point in this pose's local frame.
    pub fn to_local(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let dx = px - self.x;
        let dy = py - self.y;
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Expresses a local point of this pose's frame in the world frame.
    pub fn to_world(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * lx - s * ly, self.y + s * lx + c * ly)
    }
}

/// Bird's-eye-view footprint of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, yaw: f64) -> Self {
        Self {
            cx,
            cy,
            length,
            width,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn from_pose(pose: &Pose2D, length: f64, width: f64) -> Self {
        Self::new(pose.x, pose.y, length, width, pose.yaw)
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    pub fn circumradius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }

    pub fn is_valid(&self) -> bool {
        self.length > 0.0
            && self.width > 0.0
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.yaw.is_finite()
            && self.length.is_finite()
            && self.width.is_finite()
    }

    pub fn pose(&self) -> Pose2D {
        Pose2D::new(self.cx, self.cy, self.yaw)
    }

    /// Corners in counter-clockwise order starting at the front-left.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[lx, ly]| [self.cx + c * lx - s * ly, self.cy + s * lx + c * ly])
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        let (lx, ly) = self.pose().to_local(px, py);
        lx.abs() <= 0.5 * self.length && ly.abs() <= 0.5 * self.width
    }

    /// Distance along a ray to the first intersection with this box, if any.
    ///
    /// `dir` must be a unit vector. A ray starting inside the box reports 0.
    pub fn ray_intersection(&self, origin: [f64; 2], dir: [f64; 2]) -> Option<f64> {
        let pose = self.pose();
        let (ox, oy) = pose.to_local(origin[0], origin[1]);
        let (s, c) = self.yaw.sin_cos();
        let dx = c * dir[0] + s * dir[1];
        let dy = -s * dir[0] + c * dir[1];
        let half = [0.5 * self.length, 0.5 * self.width];
        let mut t_enter = f64::NEG_INFINITY;
        let mut t_exit = f64::INFINITY;
        for (o, d, h) in [(ox, dx, half[0]), (oy, dy, half[1])] {
            if d.abs() < 1e-15 {
                if o.abs() > h {
                    return None;
                }
            } else {
                let t1 = (-h - o) / d;
                let t2 = (h - o) / d;
                let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                t_enter = t_enter.max(lo);
                t_exit = t_exit.min(hi);
            }
        }
        if t_exit < t_enter || t_exit < 0.0 {
            None
        } else {
            Some(t_enter.max(0.0))
        }
    }
}

/// Shoelace area of a simple polygon (positive for counter-clockwise order).
pub fn polygon_area(points: &[[f64; 2]]) -> f64 {
    if points.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..points.len() {
        let [x0, y0] = points[i];
        let [x1, y1] = points[(i + 1) % points.len()];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let r = [q[0] - p[0], q[1] - p[1]];
    let s = [b[0] - a[0], b[1] - a[1]];
    let denom = r[0] * s[1] - r[1] * s[0];
    if denom.abs() < 1e-300 {
        return q;
    }
    let t = ((a[0] - p[0]) * s[1] - (a[1] - p[1]) * s[0]) / denom;
    [p[0] + t * r[0], p[1] + t * r[1]]
}

/// Sutherland–Hodgman clipping of `subject` against the convex,
/// counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Area of the intersection of two oriented boxes.
pub fn intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let dist = (a.cx - b.cx).hypot(a.cy - b.cy);
    if dist > a.circumradius() + b.circumradius() {
        return 0.0;
    }
    let poly = clip_convex(&a.corners(), &b.corners());
    polygon_area(&poly).max(0.0).min(a.area()).min(b.area())
}

/// Exact bird's-eye-view intersection-over-union of two rotated rectangles.
pub fn box_iou_bev(a: &OrientedBox, b: &OrientedBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::domain("IoU of a degenerate or non-finite box"));
    }
    if a == b {
        return Ok(1.0);
    }
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return Ok(0.0);
    }
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Re-expresses `bbox` (given in world coordinates) in the local frame of `frame`.
pub fn transform_to_frame(bbox: &OrientedBox, frame: &Pose2D) -> OrientedBox {
    let (x, y) = frame.to_local(bbox.cx, bbox.cy);
    OrientedBox::new(x, y, bbox.length, bbox.width, bbox.yaw - frame.yaw)
}

/// Inverse of [`transform_to_frame`]: local coordinates of `frame` to world.
pub fn transform_from_frame(bbox: &OrientedBox, frame: &Pose2D) -> OrientedBox {
    let (x, y) = frame.to_world(bbox.cx, bbox.cy);
    OrientedBox::new(x, y, bbox.length, bbox.width, bbox.yaw + frame.yaw)
}
