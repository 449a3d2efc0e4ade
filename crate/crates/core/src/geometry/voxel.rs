use std::collections::BTreeMap;

use nalgebra::Vector3;

use super::{GeometryError, PointCloud};

/// Integer voxel key; boundaries go to the lower cell (floor semantics).
pub fn voxel_key(p: &Vector3<f64>, leaf: f64) -> (i64, i64, i64) {
    (
        (p.x / leaf).floor() as i64,
        (p.y / leaf).floor() as i64,
        (p.z / leaf).floor() as i64,
    )
}

/// Replaces the points of every occupied voxel with their centroid.
/// Output is ordered by voxel key; covariances are dropped.
pub fn voxel_filter(cloud: &PointCloud, leaf: f64) -> Result<PointCloud, GeometryError> {
    if !(leaf > 0.0) || !leaf.is_finite() {
        return Err(GeometryError::InvalidArgument(format!("voxel leaf must be > 0, got {leaf}")));
    }
    let mut cells: BTreeMap<(i64, i64, i64), (Vector3<f64>, usize)> = BTreeMap::new();
    for p in cloud.points() {
        let e = cells.entry(voxel_key(p, leaf)).or_insert((Vector3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    PointCloud::new(cells.into_values().map(|(s, n)| s / n as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    #[test]
    fn cube_corners_collapse_to_center() {
        let mut pts = Vec::new();
        for i in 0..8 {
            pts.push(Vector3::new(
                0.01 + 0.01 * (i & 1) as f64,
                0.01 + 0.01 * ((i >> 1) & 1) as f64,
                0.01 + 0.01 * ((i >> 2) & 1) as f64,
            ));
        }
        let out = voxel_filter(&PointCloud::new(pts).unwrap(), 0.05).unwrap();
        assert_eq!(out.len(), 1);
        assert_abs_diff_eq!(out.points()[0], Vector3::new(0.015, 0.015, 0.015), epsilon = 1e-12);
    }

    #[test]
    fn distinct_voxels_unchanged() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let out = voxel_filter(&PointCloud::new(pts.clone()).unwrap(), 0.01).unwrap();
        assert_eq!(out.points(), &pts[..]);
    }

    #[test]
    fn nonpositive_leaf_rejected() {
        let c = PointCloud::new(vec![Vector3::zeros()]).unwrap();
        assert!(voxel_filter(&c, 0.0).is_err());
        assert!(voxel_filter(&c, -1.0).is_err());
    }

    #[test]
    fn matches_bucketing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<_> = (0..10_000)
            .map(|_| Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()))
            .collect();
        let leaf = 0.1;
        let out = voxel_filter(&PointCloud::new(pts.clone()).unwrap(), leaf).unwrap();
        assert!(out.len() <= 1000);

        // Independent bucketing: integer cell by truncating division on shifted coordinates.
        let mut buckets: HashMap<[i64; 3], Vec<Vector3<f64>>> = HashMap::new();
        for p in &pts {
            let key = [0, 1, 2].map(|k| (p[k] / leaf).floor() as i64);
            buckets.entry(key).or_default().push(*p);
        }
        assert_eq!(buckets.len(), out.len());
        for q in out.points() {
            let key = [0, 1, 2].map(|k| (q[k] / leaf).floor() as i64);
            let members = &buckets[&key];
            let mut c = Vector3::zeros();
            for m in members {
                c += m;
            }
            c /= members.len() as f64;
            assert_abs_diff_eq!(*q, c, epsilon = 1e-12);
        }
    }

    #[test]
    fn idempotent_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pts: Vec<_> = (0..500)
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let leaf = rng.random_range(0.01..0.5);
            let cloud = PointCloud::new(pts).unwrap();
            let once = voxel_filter(&cloud, leaf).unwrap();
            let twice = voxel_filter(&once, leaf).unwrap();
            assert_eq!(once.len(), twice.len());
            for (a, b) in once.points().iter().zip(twice.points()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
            assert!(once.len() <= cloud.len());
            let (lo, hi) = cloud.bounds().unwrap();
            for p in once.points() {
                for k in 0..3 {
                    assert!(p[k] >= lo[k] - leaf && p[k] <= hi[k] + leaf);
                }
            }
        }
    }
}
