use nalgebra::Vector3;

use crate::geometry::Cuboid;

/// Segment swept by a sphere, in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

/// Closest approach between a capsule and an obstacle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentDistance {
    /// Signed distance (negative = penetration).
    pub distance: f64,
    /// Segment parameter of the closest point.
    pub t: f64,
    /// World-frame gradient of the distance w.r.t. the closest segment point.
    pub gradient: Vector3<f64>,
}

const GOLDEN_ITERS: usize = 80;

/// The box signed distance is convex, so its restriction to the segment is
/// a convex function of `t` and golden-section search finds the minimum.
pub fn capsule_box_distance(capsule: &Capsule, cuboid: &Cuboid) -> SegmentDistance {
    let seg = capsule.b - capsule.a;
    let f = |t: f64| cuboid.signed_distance(&(capsule.a + seg * t)).0;
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..GOLDEN_ITERS {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    let mut t = 0.5 * (lo + hi);
    // The interval never contains the endpoints exactly; snap when they win.
    for end in [0.0, 1.0] {
        if f(end) <= f(t) {
            t = end;
        }
    }
    let (d, mut gradient) = cuboid.signed_distance(&(capsule.a + seg * t));
    if d < 0.0 && t > 0.0 && t < 1.0 {
        if let Some(g) = interior_kink_gradient(cuboid, &(capsule.a + seg * t), &seg) {
            gradient = g;
        }
    }
    SegmentDistance {
        distance: d - capsule.radius,
        t,
        gradient,
    }
}

/// Inside the box the distance is a max of face planes, so an interior
/// minimum along the segment usually sits where two faces tie. The
/// derivative of the minimum is then the blend of both face normals that
/// cancels the slope along the segment.
fn interior_kink_gradient(cuboid: &Cuboid, p: &Vector3<f64>, seg: &Vector3<f64>) -> Option<Vector3<f64>> {
    let l = cuboid.to_local(p);
    let dl = cuboid.pose.rotation().transpose() * seg;
    let q = l.abs() - cuboid.half_extents();
    let top = q.max();
    let active: Vec<usize> = (0..3).filter(|&k| top - q[k] < 1e-9).collect();
    if active.len() != 2 {
        return None;
    }
    let (i, j) = (active[0], active[1]);
    let (si, sj) = (l[i].signum(), l[j].signum());
    let (ai, aj) = (si * dl[i], sj * dl[j]);
    if ai * aj >= 0.0 {
        return None;
    }
    let wi = aj / (aj - ai);
    let mut g = Vector3::zeros();
    g[i] = wi * si;
    g[j] = (1.0 - wi) * sj;
    Some(cuboid.pose.transform_vector(&g))
}

/// Distance to the table plane `z = 0`.
pub fn capsule_table_distance(capsule: &Capsule) -> SegmentDistance {
    let t = if capsule.b.z < capsule.a.z { 1.0 } else { 0.0 };
    SegmentDistance {
        distance: capsule.a.z.min(capsule.b.z) - capsule.radius,
        t,
        gradient: Vector3::z(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn endpoint_above_top_face() {
        let cube = Cuboid::new(Pose::identity(), Vector3::repeat(0.05)).unwrap();
        let cap = Capsule {
            a: Vector3::new(0.0, 0.0, 0.10),
            b: Vector3::new(0.0, 0.0, 0.30),
            radius: 0.02,
        };
        let d = capsule_box_distance(&cap, &cube);
        assert!((d.distance - 0.03).abs() < 1e-12);
        assert_eq!(d.t, 0.0);
        assert!((d.gradient - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn penetration_is_negative() {
        let cube = Cuboid::new(Pose::identity(), Vector3::repeat(0.05)).unwrap();
        let cap = Capsule {
            a: Vector3::new(-0.2, 0.0, 0.04),
            b: Vector3::new(0.2, 0.0, 0.04),
            radius: 0.02,
        };
        let d = capsule_box_distance(&cap, &cube);
        assert!((d.distance - (-0.01 - 0.02)).abs() < 1e-9, "{}", d.distance);
    }

    #[test]
    fn table_distance() {
        let cap = Capsule {
            a: Vector3::new(0.0, 0.0, 0.5),
            b: Vector3::new(0.3, 0.0, 0.1),
            radius: 0.04,
        };
        let d = capsule_table_distance(&cap);
        assert!((d.distance - 0.06).abs() < 1e-15);
        assert_eq!(d.t, 1.0);
    }

    fn closest_on_box(cuboid: &Cuboid, p: &Vector3<f64>) -> f64 {
        // Independent oracle: clamp in the box frame.
        let l = cuboid.pose.inverse().transform_point(p);
        let h = cuboid.half_extents();
        let c = Vector3::new(l.x.clamp(-h.x, h.x), l.y.clamp(-h.y, h.y), l.z.clamp(-h.z, h.z));
        (l - c).norm()
    }

    #[test]
    fn matches_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pose = Pose::from_axis_angle(
                &Vector3::new(rng.random(), rng.random(), rng.random::<f64>() + 0.1),
                rng.random_range(0.0..3.0),
                Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
            );
            let cube = Cuboid::new(pose, Vector3::new(rng.random_range(0.02..0.1), rng.random_range(0.02..0.1), rng.random_range(0.02..0.1))).unwrap();
            let rnd = |rng: &mut ChaCha8Rng| Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
            let cap = Capsule {
                a: rnd(&mut rng),
                b: rnd(&mut rng),
                radius: 0.03,
            };
            let got = capsule_box_distance(&cap, &cube);
            let n = 1_000_000;
            let mut best = f64::INFINITY;
            for i in 0..n {
                let t = i as f64 / (n - 1) as f64;
                best = best.min(closest_on_box(&cube, &(cap.a + (cap.b - cap.a) * t)));
            }
            if best > 0.0 {
                assert!((got.distance - (best - cap.radius)).abs() < 1e-3, "{} vs {}", got.distance, best - cap.radius);
            } else {
                assert!(got.distance <= -cap.radius + 1e-12);
            }
        }
    }
}
