use nalgebra::{DMatrix, DVector, Matrix3, RowDVector};

use super::robot::{CapsuleKind, Fk};
use super::scene::{Obstacle, PairDistance, SceneState};
use crate::geometry::Cuboid;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskTerm {
    Pos,
    Align,
    Coll,
    Limit,
    Home,
    Rand,
}

impl TaskTerm {
    pub const ALL: [TaskTerm; 6] = [TaskTerm::Pos, TaskTerm::Align, TaskTerm::Coll, TaskTerm::Limit, TaskTerm::Home, TaskTerm::Rand];

    pub fn name(self) -> &'static str {
        match self {
            TaskTerm::Pos => "pos",
            TaskTerm::Align => "align",
            TaskTerm::Coll => "coll",
            TaskTerm::Limit => "limit",
            TaskTerm::Home => "home",
            TaskTerm::Rand => "rand",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskMapValues {
    pub value: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

impl TaskMapValues {
    fn new(value: DVector<f64>, jacobian: DMatrix<f64>) -> Self {
        Self { value, jacobian }
    }

    pub fn norm_squared(&self) -> f64 {
        self.value.norm_squared()
    }
}

/// All six task maps with analytic Jacobians at one configuration.
#[derive(Clone, Debug)]
pub struct TaskMaps {
    pub pos: TaskMapValues,
    pub align: TaskMapValues,
    pub coll: TaskMapValues,
    pub limit: TaskMapValues,
    pub home: TaskMapValues,
    pub rand: TaskMapValues,
    pub pairs: Vec<PairDistance>,
    pub fk: Fk,
}

/// Options shared by every evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskMapOptions {
    /// Collision activation distance `m`.
    pub margin: f64,
    /// Soft margin inside each joint limit.
    pub limit_margin: f64,
    /// Leave finger–target pairs out of `φ_coll` (the fingers must straddle the target).
    pub ignore_finger_target: bool,
}

impl Default for TaskMapOptions {
    fn default() -> Self {
        Self {
            margin: 0.03,
            limit_margin: 5f64.to_radians(),
            ignore_finger_target: true,
        }
    }
}

impl TaskMaps {
    pub fn get(&self, term: TaskTerm) -> &TaskMapValues {
        match term {
            TaskTerm::Pos => &self.pos,
            TaskTerm::Align => &self.align,
            TaskTerm::Coll => &self.coll,
            TaskTerm::Limit => &self.limit,
            TaskTerm::Home => &self.home,
            TaskTerm::Rand => &self.rand,
        }
    }

    /// `basis` columns are `v1, v2, v3` of the candidate's random frame.
    pub fn evaluate(
        scene: &SceneState,
        q: &DVector<f64>,
        target: &Cuboid,
        skip: Option<usize>,
        basis: &Matrix3<f64>,
        options: &TaskMapOptions,
    ) -> TaskMaps {
        let robot = &scene.robot;
        let n = robot.n_joints();
        let fk = robot.fk(q);
        let ee = *fk.end_effector();
        let ee_frame = robot.ee_frame();

        let p_e = ee.translation();
        let pos = TaskMapValues::new(
            DVector::from_column_slice((target.center() - p_e).as_slice()),
            -fk.point_jacobian(ee_frame, p_e),
        );

        let x_e = ee.axis(0);
        let jx = fk.direction_jacobian(ee_frame, &x_e);
        let axes: [_; 3] = std::array::from_fn(|k| target.pose.axis(k));
        let factors: [f64; 3] = std::array::from_fn(|k| 1.0 - axes[k].dot(&x_e).powi(2));
        let mut grad = nalgebra::Vector3::zeros();
        for k in 0..3 {
            let others: f64 = (0..3).filter(|&j| j != k).map(|j| factors[j]).product();
            grad += axes[k] * (-2.0 * axes[k].dot(&x_e) * others);
        }
        let align = TaskMapValues::new(DVector::from_element(1, factors.iter().product()), DMatrix::from_row_slice(1, 3, grad.as_slice()) * &jx);

        let pairs = scene.pairwise_distances_fk(&fk, target, skip);
        let mut coll_v = DVector::zeros(pairs.len());
        let mut coll_j = DMatrix::zeros(pairs.len(), n);
        for (i, p) in pairs.iter().enumerate() {
            if options.ignore_finger_target && p.kind == CapsuleKind::Finger && p.obstacle == Obstacle::Target {
                continue;
            }
            if p.distance < options.margin {
                coll_v[i] = p.distance - options.margin;
                coll_j.set_row(i, &p.jacobian(robot, &fk));
            }
        }
        let coll = TaskMapValues::new(coll_v, coll_j);

        let mut limit_v = DVector::zeros(n);
        let mut limit_j = DMatrix::zeros(n, n);
        for (j, (lo, hi)) in robot.limits().into_iter().enumerate() {
            let lo = lo + options.limit_margin;
            let hi = hi - options.limit_margin;
            if q[j] < lo {
                limit_v[j] = q[j] - lo;
                limit_j[(j, j)] = 1.0;
            } else if q[j] > hi {
                limit_v[j] = q[j] - hi;
                limit_j[(j, j)] = 1.0;
            }
        }
        let limit = TaskMapValues::new(limit_v, limit_j);

        let home = TaskMapValues::new(q - robot.home(), DMatrix::identity(n, n));

        let mut rand_v = DVector::zeros(3);
        let mut rand_j = DMatrix::zeros(3, n);
        for k in 0..3 {
            let e = ee.axis(k);
            let v = basis.column(k).into_owned();
            let c = v.dot(&e);
            rand_v[k] = 1.0 - c * c;
            let row: RowDVector<f64> = (v.transpose() * fk.direction_jacobian(ee_frame, &e)) * (-2.0 * c);
            rand_j.set_row(k, &row);
        }
        let rand = TaskMapValues::new(rand_v, rand_j);

        TaskMaps {
            pos,
            align,
            coll,
            limit,
            home,
            rand,
            pairs,
            fk,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraModel, Pose};
    use crate::kinematics::{RobotModel, SceneObject};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene_with(target: Cuboid) -> SceneState {
        let cam = CameraModel::look_at(Vector3::new(1.3, -0.6, 0.5), Vector3::new(0.5, 0.0, 0.05), Vector3::z(), 500.0, 640, 480).unwrap();
        let obstacle = Cuboid::new(Pose::from_translation(Vector3::new(0.45, 0.25, 0.1)), Vector3::new(0.05, 0.05, 0.1)).unwrap();
        SceneState::new(
            RobotModel::panda(),
            vec![
                SceneObject { cuboid: target, albedo: 0.6, textured: false },
                SceneObject { cuboid: obstacle, albedo: 0.4, textured: false },
            ],
            cam,
        )
    }

    #[test]
    fn position_and_alignment_vanish_at_target() {
        let robot = RobotModel::panda();
        let q = robot.home().clone();
        let ee = *robot.fk(&q).end_effector();
        let target = Cuboid::new(ee, Vector3::new(0.02, 0.03, 0.04)).unwrap();
        let scene = scene_with(target);
        let maps = TaskMaps::evaluate(&scene, &q, &target, Some(0), &Matrix3::identity(), &TaskMapOptions::default());
        assert!(maps.pos.value.norm() < 1e-12);
        assert!(maps.align.value[0].abs() < 1e-12);
        // Basis equal to the end-effector frame zeroes φ_rand.
        let maps = TaskMaps::evaluate(&scene, &q, &target, Some(0), ee.rotation(), &TaskMapOptions::default());
        assert!(maps.rand.value.norm() < 1e-12);
    }

    #[test]
    fn alignment_at_equal_angles() {
        // x_e at equal angle to all object axes gives (2/3)^3.
        let robot = RobotModel::panda();
        let q = robot.home().clone();
        let ee = *robot.fk(&q).end_effector();
        let d = Vector3::new(1.0, 1.0, 1.0).normalize();
        let x = ee.axis(0);
        // Rotation taking d to x.
        let r = nalgebra::Rotation3::rotation_between(&d, &x).unwrap();
        let target = Cuboid::new(Pose::new(*r.matrix(), Vector3::new(0.5, 0.0, 0.05)).unwrap(), Vector3::repeat(0.03)).unwrap();
        let scene = scene_with(target);
        let maps = TaskMaps::evaluate(&scene, &q, &target, Some(0), &Matrix3::identity(), &TaskMapOptions::default());
        assert!((maps.align.value[0] - 8.0 / 27.0).abs() < 1e-12);
    }

    #[test]
    fn collision_hinge_entries() {
        let robot = RobotModel::panda();
        let q = robot.home().clone();
        let scene = scene_with(Cuboid::new(Pose::from_translation(Vector3::new(0.5, 0.0, 0.03)), Vector3::repeat(0.03)).unwrap());
        let target = scene.objects[0].cuboid;
        let maps = TaskMaps::evaluate(&scene, &q, &target, Some(0), &Matrix3::identity(), &TaskMapOptions::default());
        assert!(maps.coll.value.iter().all(|&v| v == 0.0));
        // Put a box so the closest pair sits at m/2.
        let opts = TaskMapOptions::default();
        let ee = *robot.fk(&q).end_effector();
        let palm_z = ee.transform_point(&Vector3::new(-0.085, 0.0, 0.0)).z;
        let below = palm_z - 0.028 - opts.margin / 2.0;
        let blocker = Cuboid::new(
            Pose::from_translation(Vector3::new(ee.translation().x, ee.translation().y, below - 0.5)),
            Vector3::new(0.3, 0.3, 0.5),
        )
        .unwrap();
        let maps = TaskMaps::evaluate(&scene, &q, &blocker, Some(0), &Matrix3::identity(), &opts);
        let min = maps.coll.value.iter().cloned().fold(0.0, f64::min);
        assert!(maps.coll.value.iter().all(|&v| v <= 0.0));
        assert!(min < 0.0);
    }

    #[test]
    fn limit_hinge_pulls_inside() {
        let robot = RobotModel::panda();
        let mut q = robot.home().clone();
        q[3] = -0.05;
        let scene = scene_with(Cuboid::new(Pose::from_translation(Vector3::new(0.5, 0.0, 0.03)), Vector3::repeat(0.03)).unwrap());
        let target = scene.objects[0].cuboid;
        let maps = TaskMaps::evaluate(&scene, &q, &target, Some(0), &Matrix3::identity(), &TaskMapOptions::default());
        let expected = -0.05 - (-0.0698 - 5f64.to_radians());
        assert!((maps.limit.value[3] - expected).abs() < 1e-12);
        assert_eq!(maps.limit.value.iter().filter(|v| **v != 0.0).count(), 1);
    }

    pub(crate) fn check_jacobians(seed: u64, configs: usize) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let robot = RobotModel::panda();
        let h = 1e-6;
        let mut checked = 0;
        for _ in 0..configs {
            let target = Cuboid::new(
                Pose::from_rpy(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-3.0..3.0), Vector3::new(rng.random_range(0.3..0.7), rng.random_range(-0.3..0.3), rng.random_range(0.02..0.3))),
                Vector3::new(rng.random_range(0.02..0.06), rng.random_range(0.02..0.06), rng.random_range(0.02..0.06)),
            )
            .unwrap();
            let scene = scene_with(target);
            let basis = *Pose::from_rpy(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), Vector3::zeros()).rotation();
            // Sample near and beyond the limits so φ_limit is exercised too.
            let q = DVector::from_iterator(7, robot.limits().into_iter().map(|(lo, hi)| rng.random_range(lo - 0.1..hi + 0.1)));
            let opts = TaskMapOptions { margin: 0.3, ..TaskMapOptions::default() };
            let maps = TaskMaps::evaluate(&scene, &q, &target, Some(0), &basis, &opts);
            for k in 0..7 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += h;
                qm[k] -= h;
                let mp = TaskMaps::evaluate(&scene, &qp, &target, Some(0), &basis, &opts);
                let mm = TaskMaps::evaluate(&scene, &qm, &target, Some(0), &basis, &opts);
                for term in TaskTerm::ALL {
                    let (a, p, m) = (maps.get(term), mp.get(term), mm.get(term));
                    for r in 0..a.value.len() {
                        let (f0, fp, fm) = (a.value[r], p.value[r], m.value[r]);
                        // Skip rows where the hinge or the box distance switches branch.
                        if ((fp - f0) - (f0 - fm)).abs() > 1e-9 || (f0 == 0.0) != (fp == 0.0) || (f0 == 0.0) != (fm == 0.0) {
                            continue;
                        }
                        let fd = (fp - fm) / (2.0 * h);
                        assert!((fd - a.jacobian[(r, k)]).abs() <= 1e-5, "{} row {r} joint {k}: fd {fd} vs {} f0 {f0} {fp} {fm} pair {:?}", term.name(), a.jacobian[(r, k)], maps.pairs.get(r));
                        checked += 1;
                    }
                }
            }
        }
        checked
    }

    #[test]
    fn jacobians_match_finite_differences() {
        assert!(check_jacobians(21, 100) > 10_000);
    }
}
