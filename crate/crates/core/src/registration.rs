//! Generalized-ICP: plane-to-plane registration of a source cloud onto a
//! target cloud starting from an initial guess.
//!
//! Each point carries a covariance whose eigenvalues are replaced by
//! `(ε, 1, 1)` in its local k-NN eigenbasis, so surface points behave like
//! small discs. For a correspondence `(a, b)` under transform `T` the cost is
//! `dᵀ (C_b + R C_a Rᵀ)⁻¹ d` with `d = b − T a`. The transform is refined by
//! Gauss-Newton on a 6-vector `(ω, v)` applied on the left,
//! `T ← (exp(ω), v) · T`, with step halving whenever a step would raise the
//! objective for the current correspondence set.

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use thiserror::Error;

use crate::geometry::{skew, GeometryError, PointCloud, Pose};
use crate::kdtree::KdTree;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("empty {0} cloud")]
    EmptyCloud(&'static str),
    #[error("no correspondences within {0} m at the initial guess")]
    NoOverlap(f64),
    #[error("invalid registration config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationConfig {
    pub max_iterations: usize,
    pub correspondence_max_dist: f64,
    /// Threshold on `‖ω‖ + ‖v‖` of an accepted step.
    pub convergence_eps: f64,
    pub covariance_k: usize,
    pub epsilon_plane: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            correspondence_max_dist: 0.10,
            convergence_eps: 1e-6,
            covariance_k: 20,
            epsilon_plane: 1e-3,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let bad = |m: String| Err(RegistrationError::InvalidConfig(m));
        if self.max_iterations < 1 {
            return bad("max_iterations must be >= 1".into());
        }
        if self.covariance_k < 4 {
            return bad(format!("covariance_k must be >= 4, got {}", self.covariance_k));
        }
        if !(self.epsilon_plane > 0.0 && self.epsilon_plane < 1.0) {
            return bad(format!("epsilon_plane must be in (0, 1), got {}", self.epsilon_plane));
        }
        if !(self.correspondence_max_dist > 0.0) {
            return bad("correspondence_max_dist must be > 0".into());
        }
        if !(self.convergence_eps > 0.0) {
            return bad("convergence_eps must be > 0".into());
        }
        Ok(())
    }
}

/// One Gauss-Newton iteration: objective for the iteration's
/// correspondence set before and after the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub correspondences: usize,
    pub objective_before: f64,
    pub objective_after: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: Pose,
    /// Fraction of source points with a correspondence at the final transform.
    pub fitness: f64,
    /// Root mean square Euclidean correspondence distance (m).
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
}

/// Regularized G-ICP covariance for every point from its `k` nearest
/// neighbors (the point itself included).
pub fn estimate_covariances(cloud: &PointCloud, k: usize, epsilon_plane: f64) -> Result<PointCloud, RegistrationError> {
    if cloud.len() < k {
        return Err(RegistrationError::InsufficientPoints {
            needed: k,
            got: cloud.len(),
        });
    }
    let tree = KdTree::build(cloud.points());
    let covs = cloud
        .points()
        .iter()
        .map(|p| {
            let nbrs = tree.knn(p, k);
            let pts: Vec<Vector3<f64>> = nbrs.iter().map(|n| cloud.points()[n.index]).collect();
            regularized_covariance(&pts, epsilon_plane)
        })
        .collect();
    Ok(PointCloud::with_covariances(cloud.points().to_vec(), covs)?)
}

/// Scatter of `pts`, with eigenvalues replaced by `(ε, 1, 1)` in ascending order.
pub fn regularized_covariance(pts: &[Vector3<f64>], epsilon_plane: f64) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let mean: Vector3<f64> = pts.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for p in pts {
        let d = p - mean;
        scatter += d * d.transpose();
    }
    scatter /= n;
    let eig = SymmetricEigen::new(scatter);
    let smallest = eig.eigenvalues.imin();
    let mut out = Matrix3::zeros();
    for i in 0..3 {
        let v = eig.eigenvectors.column(i);
        let lambda = if i == smallest { epsilon_plane } else { 1.0 };
        out += lambda * v * v.transpose();
    }
    out
}

struct Problem<'a> {
    source: &'a [Vector3<f64>],
    source_cov: &'a [Matrix3<f64>],
    target: &'a [Vector3<f64>],
    target_cov: &'a [Matrix3<f64>],
}

impl Problem<'_> {
    fn objective(&self, t: &Pose, corr: &[(usize, usize)]) -> f64 {
        let r = t.rotation();
        corr.iter()
            .map(|&(i, j)| {
                let d = self.target[j] - t.transform_point(&self.source[i]);
                let m = combined_information(&self.target_cov[j], &(r * self.source_cov[i] * r.transpose()));
                d.dot(&(m * d))
            })
            .sum()
    }

    /// Central differences of the objective in the left-perturbation tangent space.
    fn numeric_gradient(&self, t: &Pose, corr: &[(usize, usize)], pivot: &Vector3<f64>) -> Vector6<f64> {
        let h = 1e-7;
        let mut g = Vector6::zeros();
        for k in 0..6 {
            let mut e = Vector6::zeros();
            e[k] = h;
            g[k] = (self.objective(&apply_step(&e, t, pivot), corr) - self.objective(&apply_step(&-e, t, pivot), corr)) / (2.0 * h);
        }
        g
    }

    fn normal_equations(&self, t: &Pose, corr: &[(usize, usize)], pivot: &Vector3<f64>) -> (Matrix6<f64>, Vector6<f64>) {
        let r = t.rotation();
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for &(i, j) in corr {
            let p = t.transform_point(&self.source[i]);
            let d = self.target[j] - p;
            let m = combined_information(&self.target_cov[j], &(r * self.source_cov[i] * r.transpose()));
            // d(ξ) = b − (p − [p − c]× ω + v)  ⇒  ∂d/∂ω = [p − c]×, ∂d/∂v = −I
            let px = skew(&(p - pivot));
            let mut jac = nalgebra::Matrix3x6::zeros();
            jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&px);
            jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
            let jtm = jac.transpose() * m;
            h += jtm * jac;
            g += jtm * d;
        }
        (h, g)
    }
}

/// Per-iteration trust region on the rotation (rad) and translation (m) of a step.
const MAX_STEP_ROTATION: f64 = 0.1;
const MAX_STEP_TRANSLATION: f64 = 0.02;

fn line_search(
    problem: &Problem,
    corr: &[(usize, usize)],
    t: &Pose,
    pivot: &Vector3<f64>,
    step: &Vector6<f64>,
    before: f64,
) -> Option<(Pose, f64, Vector6<f64>)> {
    let w = step.fixed_rows::<3>(0).norm() / MAX_STEP_ROTATION;
    let v = step.fixed_rows::<3>(3).norm() / MAX_STEP_TRANSLATION;
    let mut scale = 1.0 / w.max(v).max(1.0);
    for _ in 0..12 {
        let s = step * scale;
        let cand = apply_step(&s, t, pivot);
        let after = problem.objective(&cand, corr);
        if after <= before {
            return Some((cand, after, s));
        }
        scale *= 0.5;
    }
    None
}

fn combined_information(cb: &Matrix3<f64>, ca_rot: &Matrix3<f64>) -> Matrix3<f64> {
    let s = cb + ca_rot;
    s.try_inverse().unwrap_or_else(Matrix3::identity)
}

/// Left update: rotate by `ω` about `pivot`, then translate by `v`.
fn apply_step(step: &Vector6<f64>, t: &Pose, pivot: &Vector3<f64>) -> Pose {
    let omega = Vector3::new(step[0], step[1], step[2]);
    let v = Vector3::new(step[3], step[4], step[5]);
    let r = Pose::from_rotation_vector(&omega, Vector3::zeros());
    let shift = v + pivot - r.transform_point(pivot);
    Pose::from_rotation_vector(&omega, shift).compose(t)
}

fn find_correspondences(tree: &KdTree, source: &[Vector3<f64>], t: &Pose, max_d2: f64) -> Vec<(usize, usize)> {
    source
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let nn = tree.nearest(&t.transform_point(a))?;
            (nn.dist_sq <= max_d2).then_some((i, nn.index))
        })
        .collect()
}

fn with_covariances(cloud: &PointCloud, config: &RegistrationConfig) -> Result<PointCloud, RegistrationError> {
    if cloud.covariances().is_some() {
        Ok(cloud.clone())
    } else {
        estimate_covariances(cloud, config.covariance_k, config.epsilon_plane)
    }
}

/// Aligns `source` to `target` starting at `initial_guess`; the result maps
/// source coordinates into the target frame.
pub fn register(
    source: &PointCloud,
    target: &PointCloud,
    initial_guess: &Pose,
    config: &RegistrationConfig,
) -> Result<RegistrationResult, RegistrationError> {
    config.validate()?;
    if source.is_empty() {
        return Err(RegistrationError::EmptyCloud("source"));
    }
    if target.is_empty() {
        return Err(RegistrationError::EmptyCloud("target"));
    }
    let source = with_covariances(source, config)?;
    let target = with_covariances(target, config)?;
    let problem = Problem {
        source: source.points(),
        source_cov: source.covariances().expect("covariances"),
        target: target.points(),
        target_cov: target.covariances().expect("covariances"),
    };
    let tree = KdTree::build(target.points());
    let max_d2 = config.correspondence_max_dist.powi(2);

    let mut transform = *initial_guess;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..config.max_iterations {
        let corr = find_correspondences(&tree, problem.source, &transform, max_d2);
        if corr.is_empty() {
            if iter == 0 {
                return Err(RegistrationError::NoOverlap(config.correspondence_max_dist));
            }
            break;
        }
        iterations = iter + 1;
        let before = problem.objective(&transform, &corr);
        // Rotations pivot about the moved source centroid, which keeps the
        // linearization well conditioned far from the world origin.
        let pivot = problem.source.iter().map(|p| transform.transform_point(p)).sum::<Vector3<f64>>() / problem.source.len() as f64;
        let (h, g) = problem.normal_equations(&transform, &corr, &pivot);
        let step = match h.cholesky() {
            Some(ch) => -ch.solve(&g),
            None => {
                let damped = h + Matrix6::identity() * (1e-9 + 1e-6 * h.diagonal().max());
                match damped.cholesky() {
                    Some(ch) => -ch.solve(&g),
                    None => break,
                }
            }
        };
        let mut accepted = line_search(&problem, &corr, &transform, &pivot, &step, before);
        if accepted.is_none() {
            // The Gauss-Newton model freezes the rotated source covariances, so
            // far from the optimum its step may not descend. Retry along the
            // true gradient, preconditioned by the same (positive definite) H.
            let grad = problem.numeric_gradient(&transform, &corr, &pivot);
            let damped = h + Matrix6::identity() * (1e-9 + 1e-6 * h.diagonal().max());
            if let Some(ch) = damped.cholesky() {
                accepted = line_search(&problem, &corr, &transform, &pivot, &(-ch.solve(&grad)), before);
            }
        }
        let Some((cand, after, s)) = accepted else {
            // No descent along the Gauss-Newton direction: stationary.
            converged = true;
            break;
        };
        let step_norm = s.fixed_rows::<3>(0).norm() + s.fixed_rows::<3>(3).norm();
        trace.push(IterationRecord {
            correspondences: corr.len(),
            objective_before: before,
            objective_after: after,
            step_norm,
        });
        transform = cand;
        if step_norm < config.convergence_eps {
            converged = true;
            break;
        }
    }

    let transform = transform.renormalized();
    let corr = find_correspondences(&tree, problem.source, &transform, max_d2);
    let sq: f64 = corr
        .iter()
        .map(|&(i, j)| (problem.target[j] - transform.transform_point(&problem.source[i])).norm_squared())
        .sum();
    let rmse = if corr.is_empty() { 0.0 } else { (sq / corr.len() as f64).sqrt() };
    Ok(RegistrationResult {
        transform,
        fitness: corr.len() as f64 / problem.source.len() as f64,
        rmse,
        iterations,
        converged,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::geodesic_error;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn box_surface(half: Vector3<f64>, spacing: f64) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for axis in 0..3 {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            let na = (2.0 * half[a] / spacing).round() as i64;
            let nb = (2.0 * half[b] / spacing).round() as i64;
            for sign in [-1.0, 1.0] {
                for i in 0..=na {
                    for j in 0..=nb {
                        let mut p = Vector3::zeros();
                        p[axis] = sign * half[axis];
                        p[a] = -half[a] + i as f64 * spacing;
                        p[b] = -half[b] + j as f64 * spacing;
                        pts.push(p);
                    }
                }
            }
        }
        pts
    }

    #[test]
    fn planar_covariance_normal() {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                pts.push(Vector3::new(i as f64 * 0.01, j as f64 * 0.01, 0.0));
            }
        }
        let c = estimate_covariances(&PointCloud::new(pts).unwrap(), 20, 1e-3).unwrap();
        for cov in c.covariances().unwrap() {
            let e = SymmetricEigen::new(*cov);
            let k = e.eigenvalues.imin();
            assert_abs_diff_eq!(e.eigenvalues[k], 1e-3, epsilon = 1e-9);
            assert_abs_diff_eq!(e.eigenvectors.column(k).z.abs(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn line_covariance_regularized() {
        let pts: Vec<_> = (0..30).map(|i| Vector3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        let c = estimate_covariances(&PointCloud::new(pts).unwrap(), 10, 1e-3).unwrap();
        for cov in c.covariances().unwrap() {
            let e = SymmetricEigen::new(*cov);
            let mut vals: Vec<f64> = e.eigenvalues.iter().copied().collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_abs_diff_eq!(vals[0], 1e-3, epsilon = 1e-9);
            assert_abs_diff_eq!(vals[1], 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(vals[2], 1.0, epsilon = 1e-9);
            let v = e.eigenvectors;
            assert!((v.transpose() * v - Matrix3::identity()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn too_few_points_for_k() {
        let c = PointCloud::new(vec![Vector3::zeros(); 5]).unwrap();
        assert!(matches!(
            estimate_covariances(&c, 20, 1e-3),
            Err(RegistrationError::InsufficientPoints { needed: 20, got: 5 })
        ));
    }

    #[test]
    fn covariances_match_exhaustive_knn_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<_> = (0..400)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let got = estimate_covariances(&PointCloud::new(pts.clone()).unwrap(), 20, 1e-3).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let mut order: Vec<usize> = (0..pts.len()).collect();
            order.sort_by(|&a, &b| {
                (pts[a] - p).norm_squared().partial_cmp(&(pts[b] - p).norm_squared()).unwrap().then(a.cmp(&b))
            });
            let nb: Vec<_> = order[..20].iter().map(|&j| pts[j]).collect();
            let mean = nb.iter().sum::<Vector3<f64>>() / 20.0;
            let mut s = Matrix3::zeros();
            for q in &nb {
                s += (q - mean) * (q - mean).transpose();
            }
            let e = SymmetricEigen::new(s / 20.0);
            let k = e.eigenvalues.imin();
            let exp_normal = e.eigenvectors.column(k).into_owned();
            let ge = SymmetricEigen::new(got.covariances().unwrap()[i]);
            let gk = ge.eigenvalues.imin();
            let got_normal = ge.eigenvectors.column(gk).into_owned();
            assert!((got_normal.dot(&exp_normal).abs() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn self_registration_is_identity() {
        let pts = box_surface(Vector3::new(0.05, 0.04, 0.03), 0.005);
        let cloud = PointCloud::new(pts).unwrap();
        let res = register(&cloud, &cloud, &Pose::identity(), &RegistrationConfig::default()).unwrap();
        assert!(res.transform.translation().norm() < 1e-9);
        assert!(geodesic_error(&res.transform, &Pose::identity()) < 1e-9);
        assert_eq!(res.fitness, 1.0);
        assert!(res.rmse < 1e-9);
    }

    #[test]
    fn recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts = box_surface(Vector3::new(0.06, 0.04, 0.025), 0.004);
        let source = PointCloud::new(pts).unwrap();
        for _ in 0..10 {
            let truth = Pose::from_axis_angle(
                &Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                rng.random_range(0.0..0.3),
                Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.0..0.3)),
            );
            let target = source.transformed(&truth);
            let err = Pose::from_axis_angle(
                &Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                20f64.to_radians() * rng.random::<f64>(),
                Vector3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)),
            );
            let guess = truth * err;
            let res = register(&source, &target, &guess, &RegistrationConfig::default()).unwrap();
            assert!(res.transform.translation_distance(&truth) < 1e-3, "{:?}", res.transform);
            assert!(geodesic_error(&res.transform, &truth) < 1e-3);
            for rec in &res.trace {
                assert!(rec.objective_after <= rec.objective_before);
            }
        }
    }

    #[test]
    fn no_overlap_is_reported() {
        let a = PointCloud::new(box_surface(Vector3::new(0.05, 0.05, 0.05), 0.01)).unwrap();
        let b = a.transformed(&Pose::from_translation(Vector3::new(5.0, 0.0, 0.0)));
        assert!(matches!(
            register(&a, &b, &Pose::identity(), &RegistrationConfig::default()),
            Err(RegistrationError::NoOverlap(_))
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let a = PointCloud::new(box_surface(Vector3::new(0.05, 0.05, 0.05), 0.01)).unwrap();
        let cfg = RegistrationConfig {
            covariance_k: 3,
            ..Default::default()
        };
        assert!(matches!(register(&a, &a, &Pose::identity(), &cfg), Err(RegistrationError::InvalidConfig(_))));
    }

    #[test]
    fn invariant_under_common_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let pts = box_surface(Vector3::new(0.05, 0.035, 0.02), 0.004);
        let source = PointCloud::new(pts).unwrap();
        for _ in 0..5 {
            let truth = Pose::from_axis_angle(&Vector3::new(0.2, -0.4, 1.0), rng.random_range(0.0..0.3), Vector3::new(0.02, -0.01, 0.03));
            let target = source.transformed(&truth);
            let guess = Pose::from_axis_angle(&Vector3::new(1.0, 0.3, 0.0), 0.1, Vector3::new(0.01, 0.0, 0.0)) * truth;
            let cfg = RegistrationConfig {
                convergence_eps: 1e-10,
                ..Default::default()
            };
            let y = register(&source, &target, &guess, &cfg).unwrap().transform;
            let g = Pose::from_axis_angle(
                &Vector3::new(rng.random(), rng.random(), rng.random()),
                rng.random_range(0.0..3.0),
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            );
            let y2 = register(&source.transformed(&g), &target.transformed(&g), &(g * guess * g.inverse()), &cfg)
                .unwrap()
                .transform;
            let exp = g * y * g.inverse();
            assert!(y2.translation_distance(&exp) < 1e-6);
            assert!(geodesic_error(&y2, &exp) < 1e-6);
        }
    }
}
