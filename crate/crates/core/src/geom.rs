//! Planar geometry primitives: vectors, oriented rectangles (SAT overlap),
//! simple polygons with boundary-inclusive containment, and arc-length
//! parameterized polylines.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

pub const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product; positive when `other` is to the left.
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        if n < EPS {
            None
        } else {
            Some(Vec2::new(self.x / n, self.y / n))
        }
    }

    pub fn from_angle(theta: f64) -> Vec2 {
        Vec2::new(theta.cos(), theta.sin())
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Rotate by `theta` radians counter-clockwise.
    pub fn rotated(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Perpendicular vector (90 degrees counter-clockwise).
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(mut a: f64) -> f64 {
    use std::f64::consts::PI;
    while a > PI {
        a -= 2.0 * PI;
    }
    while a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Rectangle with an arbitrary heading, used for vehicle footprints.
#[derive(Debug, Clone, Copy)]
pub struct OrientedRect {
    pub center: Vec2,
    pub half_len: f64,
    pub half_wid: f64,
    pub heading: f64,
}

impl OrientedRect {
    pub fn new(center: Vec2, length: f64, width: f64, heading: f64) -> Self {
        OrientedRect {
            center,
            half_len: length * 0.5,
            half_wid: width * 0.5,
            heading,
        }
    }

    pub fn axes(&self) -> [Vec2; 2] {
        let fwd = Vec2::from_angle(self.heading);
        [fwd, fwd.perp()]
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let [fwd, left] = self.axes();
        let l = fwd * self.half_len;
        let w = left * self.half_wid;
        [
            self.center + l + w,
            self.center + l - w,
            self.center - l - w,
            self.center - l + w,
        ]
    }

    fn project_onto(&self, axis: Vec2) -> (f64, f64) {
        let corners = self.corners();
        let mut min = corners[0].dot(axis);
        let mut max = min;
        for c in &corners[1..] {
            let p = c.dot(axis);
            if p < min {
                min = p;
            } else if p > max {
                max = p;
            }
        }
        (min, max)
    }

    /// Separating-axis overlap test. Touching rectangles count as overlapping.
    pub fn overlaps(&self, other: &OrientedRect) -> bool {
        let axes_a = self.axes();
        let axes_b = other.axes();
        for axis in axes_a.iter().chain(axes_b.iter()) {
            let (min_a, max_a) = self.project_onto(*axis);
            let (min_b, max_b) = other.project_onto(*axis);
            if max_a < min_b - EPS || max_b < min_a - EPS {
                return false;
            }
        }
        true
    }
}

/// Simple polygon; vertices in order, implicitly closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub pts: Vec<Vec2>,
}

impl Polygon {
    pub fn new(pts: Vec<Vec2>) -> Self {
        Polygon { pts }
    }

    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Polygon::new(vec![
            Vec2::new(x0, y0),
            Vec2::new(x1, y0),
            Vec2::new(x1, y1),
            Vec2::new(x0, y1),
        ])
    }

    /// Boundary-inclusive point containment (even-odd rule plus edge test).
    pub fn contains(&self, p: Vec2) -> bool {
        let n = self.pts.len();
        if n < 3 {
            return false;
        }
        for i in 0..n {
            let a = self.pts[i];
            let b = self.pts[(i + 1) % n];
            if point_on_segment(p, a, b) {
                return true;
            }
        }
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let a = self.pts[i];
            let b = self.pts[j];
            if (a.y > p.y) != (b.y > p.y) {
                let x_cross = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// True when no two non-adjacent edges intersect.
    pub fn is_simple(&self) -> bool {
        let n = self.pts.len();
        if n < 3 {
            return false;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                // Skip edges sharing a vertex (adjacent or identical).
                if j == i || (j + 1) % n == i || (i + 1) % n == j {
                    continue;
                }
                let (a1, a2) = (self.pts[i], self.pts[(i + 1) % n]);
                let (b1, b2) = (self.pts[j], self.pts[(j + 1) % n]);
                if segments_intersect(a1, a2, b1, b2) {
                    return false;
                }
            }
        }
        true
    }
}

fn point_on_segment(p: Vec2, a: Vec2, b: Vec2) -> bool {
    let ab = b - a;
    let ap = p - a;
    if ab.cross(ap).abs() > 1e-9 * (1.0 + ab.norm()) {
        return false;
    }
    let t = ap.dot(ab);
    t >= -EPS && t <= ab.dot(ab) + EPS
}

fn segments_intersect(a1: Vec2, a2: Vec2, b1: Vec2, b2: Vec2) -> bool {
    let d1 = (a2 - a1).cross(b1 - a1);
    let d2 = (a2 - a1).cross(b2 - a1);
    let d3 = (b2 - b1).cross(a1 - b1);
    let d4 = (b2 - b1).cross(a2 - b1);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1.abs() < EPS && point_on_segment(b1, a1, a2))
        || (d2.abs() < EPS && point_on_segment(b2, a1, a2))
        || (d3.abs() < EPS && point_on_segment(a1, b1, b2))
        || (d4.abs() < EPS && point_on_segment(a2, b1, b2))
}

/// Polyline with precomputed cumulative arc length, supporting
/// arc-length lookup and point projection.
#[derive(Debug, Clone)]
pub struct Polyline {
    pts: Vec<Vec2>,
    cum: Vec<f64>,
}

/// Result of projecting a point onto a polyline.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    /// Arc length from the start of the polyline to the foot point.
    pub arc_len: f64,
    /// Signed lateral offset; positive to the left of travel direction.
    pub offset: f64,
}

impl Polyline {
    pub fn new(pts: Vec<Vec2>) -> Self {
        assert!(pts.len() >= 2, "polyline needs at least 2 points");
        let mut cum = Vec::with_capacity(pts.len());
        cum.push(0.0);
        for i in 1..pts.len() {
            let d = (pts[i] - pts[i - 1]).norm();
            cum.push(cum[i - 1] + d);
        }
        Polyline { pts, cum }
    }

    pub fn points(&self) -> &[Vec2] {
        &self.pts
    }

    pub fn total_len(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Point at arc length `s`, clamped to the polyline extent.
    pub fn point_at(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.total_len());
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => (i - 1).min(self.pts.len() - 2),
        };
        let seg = self.pts[i + 1] - self.pts[i];
        let seg_len = self.cum[i + 1] - self.cum[i];
        if seg_len < EPS {
            return self.pts[i];
        }
        self.pts[i] + seg * ((s - self.cum[i]) / seg_len)
    }

    /// Travel direction at arc length `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.total_len());
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => (i - 1).min(self.pts.len() - 2),
        };
        (self.pts[i + 1] - self.pts[i]).angle()
    }

    /// Closest-point projection over all segments.
    pub fn project(&self, p: Vec2) -> Projection {
        let mut best_d2 = f64::INFINITY;
        let mut best = Projection {
            arc_len: 0.0,
            offset: 0.0,
        };
        for i in 0..self.pts.len() - 1 {
            let a = self.pts[i];
            let b = self.pts[i + 1];
            let ab = b - a;
            let len2 = ab.dot(ab);
            let t = if len2 < EPS * EPS {
                0.0
            } else {
                ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
            };
            let foot = a + ab * t;
            let d2 = {
                let d = p - foot;
                d.dot(d)
            };
            if d2 < best_d2 {
                best_d2 = d2;
                let dir = ab.normalized().unwrap_or(Vec2::new(1.0, 0.0));
                best = Projection {
                    arc_len: self.cum[i] + t * (self.cum[i + 1] - self.cum[i]),
                    offset: dir.cross(p - foot),
                };
            }
        }
        best
    }
}
