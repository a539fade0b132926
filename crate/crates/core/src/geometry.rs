//! Axis-aligned boxes and rays.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self {
            min: [min.x, min.y, min.z],
            max: [max.x, max.y, max.z],
        }
    }

    /// Cube centered at the origin with the given half extent.
    pub fn centered_cube(half_extent: f64) -> Self {
        Self::new(Vec3::repeat(-half_extent), Vec3::repeat(half_extent))
    }

    pub fn min_v(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn max_v(&self) -> Vec3 {
        Vec3::from(self.max)
    }

    pub fn extent(&self) -> Vec3 {
        self.max_v() - self.min_v()
    }

    pub fn center(&self) -> Vec3 {
        (self.min_v() + self.max_v()) * 0.5
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|a| self.min[a].is_finite() && self.max[a].is_finite() && self.max[a] > self.min[a])
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn translated(&self, offset: &Vec3) -> Self {
        Self::new(self.min_v() + offset, self.max_v() + offset)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    /// Slab-method clip against `bbox`. Returns the parametric interval
    /// `[t_enter, t_exit]` restricted to `t >= 0`, or `None` on a miss.
    pub fn clip(&self, bbox: &Aabb) -> Option<(f64, f64)> {
        let mut t0 = 0.0_f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let o = self.origin[a];
            let d = self.direction[a];
            if d.abs() < 1e-300 {
                if o < bbox.min[a] || o > bbox.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let mut near = (bbox.min[a] - o) * inv;
            let mut far = (bbox.max[a] - o) * inv;
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        if t1 > t0 {
            Some((t0, t1))
        } else {
            None
        }
    }
}
