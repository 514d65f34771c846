//! Small 2D vector and segment utilities shared by terrain, LiDAR, and the
//! vehicle model. World frame: x east, y north; angles for vehicle yaw are
//! compass degrees (0 = north, clockwise positive).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct V2 {
    pub x: f64,
    pub y: f64,
}

impl V2 {
    pub const ZERO: V2 = V2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: V2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z component of the 3D cross product; positive when `o` lies
    /// counterclockwise of `self`.
    pub fn cross(self, o: V2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: V2) -> f64 {
        (self - o).norm()
    }

    pub fn unit(self) -> V2 {
        let n = self.norm();
        if n == 0.0 {
            V2::ZERO
        } else {
            V2::new(self.x / n, self.y / n)
        }
    }

    /// 90 degrees counterclockwise (left of a travel direction).
    pub fn perp_left(self) -> V2 {
        V2::new(-self.y, self.x)
    }
}

impl std::ops::Add for V2 {
    type Output = V2;
    fn add(self, o: V2) -> V2 {
        V2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for V2 {
    type Output = V2;
    fn sub(self, o: V2) -> V2 {
        V2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for V2 {
    type Output = V2;
    fn mul(self, k: f64) -> V2 {
        V2::new(self.x * k, self.y * k)
    }
}

/// Unit heading vector for a compass yaw in degrees.
pub fn heading(yaw_deg: f64) -> V2 {
    let r = yaw_deg.to_radians();
    V2::new(r.sin(), r.cos())
}

/// Compass yaw in [0, 360) for a direction vector.
pub fn yaw_of(dir: V2) -> f64 {
    let deg = dir.x.atan2(dir.y).to_degrees();
    wrap_deg(deg)
}

/// Wrap any angle in degrees into [0, 360).
pub fn wrap_deg(deg: f64) -> f64 {
    let w = deg % 360.0;
    if w < 0.0 {
        w + 360.0
    } else {
        w
    }
}

/// Distance along `dir` (unit) from `origin` to the segment [a, b], or None
/// when the ray misses. Hits behind the origin are rejected.
pub fn ray_segment(origin: V2, dir: V2, a: V2, b: V2) -> Option<f64> {
    let e = b - a;
    let denom = dir.cross(e);
    if denom.abs() < 1e-12 {
        return None;
    }
    let ao = a - origin;
    let s = ao.cross(e) / denom;
    let u = ao.cross(dir) / denom;
    if s >= 0.0 && (0.0..=1.0).contains(&u) {
        Some(s)
    } else {
        None
    }
}

/// Proper crossing test: the open interiors of [a, b] and [c, d] intersect.
/// Shared endpoints and collinear touching do not count.
pub fn segments_cross(a: V2, b: V2, c: V2, d: V2) -> bool {
    let d1 = (b - a).cross(c - a);
    let d2 = (b - a).cross(d - a);
    let d3 = (d - c).cross(a - c);
    let d4 = (d - c).cross(b - c);
    (d1 > 0.0) != (d2 > 0.0) && (d3 > 0.0) != (d4 > 0.0) && d1 != 0.0 && d2 != 0.0
}

/// Closest-point parameter t in [0, 1] of `p` onto segment [a, b].
pub fn project_t(p: V2, a: V2, b: V2) -> f64 {
    let e = b - a;
    let len2 = e.dot(e);
    if len2 == 0.0 {
        return 0.0;
    }
    ((p - a).dot(e) / len2).clamp(0.0, 1.0)
}
