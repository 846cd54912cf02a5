//! Oriented boxes and convex polygon helpers.

use crate::error::{Error, Result};

/// Oriented 3-D box in the LiDAR frame (x forward, y left, z up). `size` is
/// (length along heading, width, height); `yaw` rotates about +z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: u8,
}

pub type Point2 = [f64; 2];

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class_id: u8) -> Self {
        Self {
            center,
            size,
            yaw,
            class_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Contract(format!("degenerate box size {:?}", self.size)));
        }
        if self.center.iter().any(|c| !c.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::Contract("non-finite box pose".into()));
        }
        Ok(())
    }

    pub fn bottom(&self) -> f64 {
        self.center[2] - self.size[2] / 2.0
    }

    pub fn top(&self) -> f64 {
        self.center[2] + self.size[2] / 2.0
    }

    pub fn footprint_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Footprint corners, counter-clockwise.
    pub fn footprint(&self) -> [Point2; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[lx, ly]| [self.center[0] + c * lx - s * ly, self.center[1] + s * lx + c * ly])
    }

    /// Point expressed in the box frame (origin at center, axes along
    /// length, width, height).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn contains_xy(&self, p: Point2) -> bool {
        let l = self.to_local([p[0], p[1], self.center[2]]);
        l[0].abs() <= self.size[0] / 2.0 && l[1].abs() <= self.size[1] / 2.0
    }

    /// Same box grown by `margin` on every side of the footprint.
    pub fn inflated(&self, margin: f64) -> Self {
        Self {
            size: [self.size[0] + 2.0 * margin, self.size[1] + 2.0 * margin, self.size[2]],
            ..*self
        }
    }
}

/// Signed area (positive for counter-clockwise order).
pub fn polygon_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    s / 2.0
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland-Hodgman: clips `subject` against every edge of the convex,
/// counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut out: Vec<Point2> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (dc, dp) = (cross(a, b, cur), cross(a, b, prev));
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn intersect(p: Point2, q: Point2, dp: f64, dq: f64) -> Point2 {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the intersection of two box footprints.
pub fn footprint_intersection(a: &Box3D, b: &Box3D) -> f64 {
    polygon_area(&clip_convex(&a.footprint(), &b.footprint())).max(0.0)
}

/// Wraps an angle into `[-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut r = a.rem_euclid(tau);
    if r > std::f64::consts::PI {
        r -= tau;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn footprint_is_ccw_with_box_area() {
        let b = Box3D::new([1.0, 2.0, 0.0], [4.0, 2.0, 1.5], 0.7, 5);
        let fp = b.footprint();
        assert!((polygon_area(&fp) - 8.0).abs() < 1e-12);
        assert!(b.contains_xy([1.0, 2.0]));
        assert!(!b.contains_xy([10.0, 2.0]));
    }

    #[test]
    fn clipping_of_offset_squares() {
        let a = Box3D::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0);
        let b = Box3D::new([0.5, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0);
        assert!((footprint_intersection(&a, &b) - 0.5).abs() < 1e-12);
        let far = Box3D::new([5.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0);
        assert_eq!(footprint_intersection(&a, &far), 0.0);
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-3.0 * PI / 2.0) - PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(0.3) - 0.3).abs() < 1e-15);
    }
}
