//! Closed-form signed distance fields.
//!
//! These serve as ground truth for intersection and sampling tests, and as
//! the geometry behind synthetic scenes. Sphere, box, and torus are exact
//! metric SDFs; the ellipsoid uses the scaled-space approximation
//! `k0 * (k0 - 1) / k1`, which has the exact zero set and sign but is only
//! near-metric away from the surface — its `grad` is the exact surface
//! normal direction `(p - c) / s^2` (normalized), extended off-surface.
//! Unions take the pointwise minimum and inherit the gradient of the
//! winning shape.
//!
//! All distances follow the crate convention: negative inside.

use serde::{Deserialize, Serialize};

use crate::field::Sdf;
use crate::V3;

/// A single primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Axis-aligned box given by half-extents.
    Box {
        center: [f64; 3],
        half: [f64; 3],
    },
    /// Torus around the local y axis: ring of `major` radius in the xz
    /// plane, tube of `minor` radius.
    Torus {
        center: [f64; 3],
        major: f64,
        minor: f64,
    },
    Ellipsoid {
        center: [f64; 3],
        semi_axes: [f64; 3],
    },
}

impl Shape {
    fn center(&self) -> V3 {
        let c = match self {
            Shape::Sphere { center, .. }
            | Shape::Box { center, .. }
            | Shape::Torus { center, .. }
            | Shape::Ellipsoid { center, .. } => center,
        };
        V3::new(c[0], c[1], c[2])
    }

    pub fn eval(&self, p: V3) -> f64 {
        let q = p - self.center();
        match self {
            Shape::Sphere { radius, .. } => q.norm() - radius,
            Shape::Box { half, .. } => {
                let d = V3::new(q.x.abs() - half[0], q.y.abs() - half[1], q.z.abs() - half[2]);
                let outside = V3::new(d.x.max(0.0), d.y.max(0.0), d.z.max(0.0));
                outside.norm() + d.x.max(d.y).max(d.z).min(0.0)
            }
            Shape::Torus { major, minor, .. } => {
                let ring = (q.x * q.x + q.z * q.z).sqrt() - major;
                (ring * ring + q.y * q.y).sqrt() - minor
            }
            Shape::Ellipsoid { semi_axes: s, .. } => {
                let k0 = V3::new(q.x / s[0], q.y / s[1], q.z / s[2]).norm();
                let k1 = V3::new(q.x / (s[0] * s[0]), q.y / (s[1] * s[1]), q.z / (s[2] * s[2]))
                    .norm();
                if k1 == 0.0 {
                    // Center: inside by the shortest semi-axis.
                    return -s[0].min(s[1]).min(s[2]);
                }
                k0 * (k0 - 1.0) / k1
            }
        }
    }

    /// Spatial gradient (unit surface-normal direction for the ellipsoid).
    pub fn grad(&self, p: V3) -> V3 {
        let q = p - self.center();
        match self {
            Shape::Sphere { .. } => {
                let n = q.norm();
                if n == 0.0 {
                    V3::zeros()
                } else {
                    q / n
                }
            }
            Shape::Box { half, .. } => {
                let d = V3::new(q.x.abs() - half[0], q.y.abs() - half[1], q.z.abs() - half[2]);
                let sign = V3::new(
                    if q.x < 0.0 { -1.0 } else { 1.0 },
                    if q.y < 0.0 { -1.0 } else { 1.0 },
                    if q.z < 0.0 { -1.0 } else { 1.0 },
                );
                let outside = V3::new(d.x.max(0.0), d.y.max(0.0), d.z.max(0.0));
                let on = outside.norm();
                if on > 0.0 {
                    V3::new(outside.x * sign.x, outside.y * sign.y, outside.z * sign.z) / on
                } else {
                    // Inside: gradient points along the axis of least
                    // penetration.
                    if d.x >= d.y && d.x >= d.z {
                        V3::new(sign.x, 0.0, 0.0)
                    } else if d.y >= d.z {
                        V3::new(0.0, sign.y, 0.0)
                    } else {
                        V3::new(0.0, 0.0, sign.z)
                    }
                }
            }
            Shape::Torus { major, .. } => {
                let rxz = (q.x * q.x + q.z * q.z).sqrt();
                let ring = rxz - major;
                let qn = (ring * ring + q.y * q.y).sqrt();
                if qn == 0.0 || rxz == 0.0 {
                    return V3::new(0.0, if q.y >= 0.0 { 1.0 } else { -1.0 }, 0.0);
                }
                V3::new(ring * q.x / rxz, q.y, ring * q.z / rxz) / qn
            }
            Shape::Ellipsoid { semi_axes: s, .. } => {
                let n = V3::new(q.x / (s[0] * s[0]), q.y / (s[1] * s[1]), q.z / (s[2] * s[2]));
                let len = n.norm();
                if len == 0.0 {
                    V3::zeros()
                } else {
                    n / len
                }
            }
        }
    }
}

/// Union of primitives: `min` of the member distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub shapes: Vec<Shape>,
}

impl AnalyticScene {
    pub fn new(shapes: Vec<Shape>) -> Self {
        assert!(!shapes.is_empty(), "a scene needs at least one shape");
        AnalyticScene { shapes }
    }

    /// Index and signed distance of the closest shape (the union's active
    /// branch at `p`).
    pub fn nearest(&self, p: V3) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, s) in self.shapes.iter().enumerate() {
            let d = s.eval(p);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

impl Sdf for AnalyticScene {
    fn eval(&self, p: V3) -> f64 {
        self.nearest(p).1
    }

    fn grad(&self, p: V3) -> V3 {
        let (i, _) = self.nearest(p);
        self.shapes[i].grad(p)
    }
}
