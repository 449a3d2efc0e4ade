use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{GeometryError, Pose, PoseRecord};

/// Oriented box: `pose` is the center frame with axes along the edges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cuboid {
    pub pose: Pose,
    half_extents: Vector3<f64>,
}

impl Cuboid {
    pub fn new(pose: Pose, half_extents: Vector3<f64>) -> Result<Self, GeometryError> {
        if half_extents.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(GeometryError::InvalidExtents);
        }
        Ok(Self { pose, half_extents })
    }

    pub fn half_extents(&self) -> &Vector3<f64> {
        &self.half_extents
    }

    pub fn center(&self) -> Vector3<f64> {
        *self.pose.translation()
    }

    pub fn diagonal(&self) -> f64 {
        2.0 * self.half_extents.norm()
    }

    pub fn with_pose(&self, pose: Pose) -> Cuboid {
        Cuboid { pose, ..*self }
    }

    /// The 8 corners in world coordinates.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let h = self.half_extents;
        let mut out = [Vector3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let s = Vector3::new(
                if i & 1 == 0 { -1.0 } else { 1.0 },
                if i & 2 == 0 { -1.0 } else { 1.0 },
                if i & 4 == 0 { -1.0 } else { 1.0 },
            );
            *c = self.pose.transform_point(&h.component_mul(&s));
        }
        out
    }

    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation().transpose() * (p - self.pose.translation())
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let l = self.to_local(p);
        (0..3).all(|k| l[k].abs() <= self.half_extents[k])
    }

    /// Signed distance of a world point: Euclidean outside, minus the
    /// distance to the nearest face inside. Returns the value and the
    /// world-frame gradient.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let l = self.to_local(p);
        let q = l.abs() - self.half_extents;
        let outside = q.sup(&Vector3::zeros());
        let out_norm = outside.norm();
        let (d, grad_local) = if out_norm > 0.0 {
            let g = Vector3::new(
                outside.x * l.x.signum(),
                outside.y * l.y.signum(),
                outside.z * l.z.signum(),
            ) / out_norm;
            (out_norm, g)
        } else {
            let k = q.imax();
            let mut g = Vector3::zeros();
            g[k] = if l[k] >= 0.0 { 1.0 } else { -1.0 };
            (q[k], g)
        };
        (d, self.pose.transform_vector(&grad_local))
    }

    /// Ray–box intersection by the slab method. Returns the entry distance
    /// along `dir` (which need not be unit) and the world-frame outward normal.
    pub fn ray_intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let o = self.to_local(origin);
        let d = self.pose.rotation().transpose() * dir;
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = 0;
        let mut sign = 1.0;
        for k in 0..3 {
            let h = self.half_extents[k];
            if d[k].abs() < 1e-15 {
                if o[k].abs() > h {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[k];
            let mut t0 = (-h - o[k]) * inv;
            let mut t1 = (h - o[k]) * inv;
            let mut s = -1.0;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
                s = 1.0;
            }
            if t0 > t_near {
                t_near = t0;
                axis = k;
                sign = s;
            }
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        if t_near <= 0.0 || !t_near.is_finite() {
            return None;
        }
        let mut n = Vector3::zeros();
        n[axis] = sign;
        Some((t_near, self.pose.transform_vector(&n)))
    }
}

/// Serializable cuboid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CuboidRecord {
    pub pose: PoseRecord,
    pub half_extents: [f64; 3],
}

impl From<&Cuboid> for CuboidRecord {
    fn from(c: &Cuboid) -> Self {
        Self {
            pose: PoseRecord::from(&c.pose),
            half_extents: [c.half_extents.x, c.half_extents.y, c.half_extents.z],
        }
    }
}
