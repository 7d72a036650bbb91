//! Capsule occluders and camera-ray visibility tests.

use serde::{Deserialize, Serialize};

use crate::geometry::{CameraView, Point3D};

/// A segment swept by a sphere: the set of points within `radius` of `[a, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Capsule {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

impl Capsule {
    pub fn new(a: Point3D, b: Point3D, radius: f64) -> Self {
        Self { a: a.coords.into(), b: b.coords.into(), radius }
    }

    pub fn start(&self) -> Point3D {
        Point3D::from(self.a)
    }

    pub fn end(&self) -> Point3D {
        Point3D::from(self.b)
    }

    pub fn contains(&self, p: &Point3D) -> bool {
        point_segment_distance(p, &self.start(), &self.end()) < self.radius
    }

    /// Whether the closed segment `[p, q]` passes through the capsule.
    pub fn intersects_segment(&self, p: &Point3D, q: &Point3D) -> bool {
        segment_segment_distance(p, q, &self.start(), &self.end()) < self.radius
    }
}

fn point_segment_distance(p: &Point3D, a: &Point3D, b: &Point3D) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

/// Minimum distance between segments `[p1, q1]` and `[p2, q2]`.
pub fn segment_segment_distance(p1: &Point3D, q1: &Point3D, p2: &Point3D, q2: &Point3D) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    const EPS: f64 = 1e-12;
    let (s, t);
    if a <= EPS && e <= EPS {
        return r.norm();
    }
    if a <= EPS {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= EPS {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > EPS { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}

/// True when the segment from the camera center to `point` crosses any occluder.
pub fn ray_blocked(camera: &CameraView, point: &Point3D, occluders: &[Capsule]) -> bool {
    let center = camera.center();
    occluders.iter().any(|c| c.intersects_segment(&center, point))
}

/// In front of the camera, inside the image and not hidden by an occluder.
pub fn keypoint_visible(camera: &CameraView, point: &Point3D, occluders: &[Capsule]) -> bool {
    match camera.project(point) {
        Ok(px) => camera.contains(&px) && !ray_blocked(camera, point, occluders),
        Err(_) => false,
    }
}
