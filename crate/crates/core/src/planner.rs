//! Backstepping trajectory follower. Tracks the straight joint-space line
//! from the homing configuration to the current best grasp and retreats
//! toward home whenever a forward step would collide.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::Cuboid;
use crate::kinematics::{CapsuleKind, Obstacle, SceneState};
use crate::observer::{GraspCandidate, Ranking};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Approach,
    Backstep,
    Grasp,
    Lift,
    Done,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Approach => "approach",
            Phase::Backstep => "backstep",
            Phase::Grasp => "grasp",
            Phase::Lift => "lift",
            Phase::Done => "done",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub tau: f64,
    pub collision_margin: f64,
    /// Relative improvement in distance-to-center required to switch grasp.
    pub hysteresis: f64,
    pub lift_height: f64,
    /// End-effector speed cap during the lift (meters per step).
    pub lift_step: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            collision_margin: 0.005,
            hysteresis: 0.1,
            lift_height: 0.15,
            lift_step: 0.01,
        }
    }
}

/// Orthogonal projection of `q_t` onto the segment `[q_0, q_star]`.
pub fn closest_on_trajectory(q_t: &DVector<f64>, q_0: &DVector<f64>, q_star: &DVector<f64>) -> (DVector<f64>, f64) {
    let d = q_star - q_0;
    let len2 = d.norm_squared();
    if len2 == 0.0 {
        return (q_0.clone(), 0.0);
    }
    let s = ((q_t - q_0).dot(&d) / len2).clamp(0.0, 1.0);
    (q_0 + d * s, s)
}

/// What happened in one planner step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub q: DVector<f64>,
    pub phase: Phase,
    pub s: f64,
    pub backstep: bool,
    pub stuck: bool,
    pub min_distance: f64,
    /// Set on the step where the gripper closed on the object.
    pub grasped: bool,
}

#[derive(Clone, Debug)]
pub struct Planner {
    pub config: PlannerConfig,
    pub q_0: DVector<f64>,
    pub q_star: Option<DVector<f64>>,
    pub phase: Phase,
    /// Candidate currently followed.
    pub followed: Option<usize>,
    /// Scene index of the object to grasp.
    pub target_index: usize,
    lift_goal: Option<Vector3<f64>>,
    pub backsteps: u64,
}

impl Planner {
    pub fn new(config: PlannerConfig, q_0: DVector<f64>, target_index: usize) -> Self {
        Self {
            config,
            q_0,
            q_star: None,
            phase: Phase::Approach,
            followed: None,
            target_index,
            lift_goal: None,
            backsteps: 0,
        }
    }

    /// Picks the grasp to follow, switching only when the new best is
    /// clearly better or the current one is no longer valid.
    pub fn select_target(&mut self, ranking: &Ranking, candidates: &[GraspCandidate]) {
        let Some(best) = ranking.best() else {
            return;
        };
        let switch = match self.followed {
            None => true,
            Some(cur) if cur >= candidates.len() => true,
            Some(cur) => {
                let ec = &ranking.evaluations[cur];
                let eb = &ranking.evaluations[best];
                !(ec.inside && ec.feasible) || eb.distance < (1.0 - self.config.hysteresis) * ec.distance
            }
        };
        if switch {
            self.followed = Some(best);
        }
        self.q_star = self.followed.map(|i| candidates[i].q.clone());
    }

    fn margin_ok(&self, kind: CapsuleKind, obstacle: Obstacle, d: f64, floor: f64) -> bool {
        let m = if kind == CapsuleKind::Finger && obstacle == Obstacle::Target { 0.0 } else { self.config.collision_margin };
        d >= m.min(floor)
    }

    /// Minimum pair distance over the whole scene (ground truth).
    pub fn min_distance(&self, scene: &SceneState, q: &DVector<f64>) -> f64 {
        let target = scene.objects[self.target_index].cuboid;
        let skip = Some(self.target_index);
        let attached = scene.attached().map(|(i, _)| i);
        scene
            .pairwise_distances(q, &target, skip)
            .iter()
            .filter(|p| !(p.obstacle == Obstacle::Target && attached == Some(self.target_index)))
            .map(|p| p.distance)
            .fold(f64::INFINITY, f64::min)
    }

    fn config_clear(&self, scene: &SceneState, target: &Cuboid, q: &DVector<f64>, floor: f64) -> bool {
        let attached = scene.attached().map(|(i, _)| i);
        scene.pairwise_distances(q, target, Some(self.target_index)).iter().all(|p| {
            (p.obstacle == Obstacle::Target && attached == Some(self.target_index)) || self.margin_ok(p.kind, p.obstacle, p.distance, floor)
        })
    }

    /// Samples the straight segment at `τ/10` resolution (end included).
    pub fn segment_clear(&self, scene: &SceneState, from: &DVector<f64>, to: &DVector<f64>) -> bool {
        self.segment_clear_with_floor(scene, from, to, f64::INFINITY)
    }

    fn segment_clear_with_floor(&self, scene: &SceneState, from: &DVector<f64>, to: &DVector<f64>, floor: f64) -> bool {
        let target = scene.objects[self.target_index].cuboid;
        let len = (to - from).norm();
        let n = ((len / (self.config.tau / 10.0)).ceil() as usize).max(1);
        (1..=n).all(|i| {
            let q = from + (to - from) * (i as f64 / n as f64);
            self.config_clear(scene, &target, &q, floor)
        })
    }

    fn report(&self, scene: &SceneState, q: DVector<f64>, s: f64, backstep: bool, stuck: bool) -> StepReport {
        let min_distance = self.min_distance(scene, &q);
        StepReport {
            q,
            phase: self.phase,
            s,
            backstep,
            stuck,
            min_distance,
            grasped: false,
        }
    }

    /// One control step from the scene's current configuration.
    pub fn plan_step(&mut self, scene: &SceneState) -> StepReport {
        let q_t = scene.q().clone();
        match self.phase {
            Phase::Done => self.report(scene, q_t, 1.0, false, false),
            Phase::Lift => self.lift_step(scene, q_t),
            Phase::Grasp => self.grasp_step(scene, q_t),
            Phase::Approach | Phase::Backstep => self.approach_step(scene, q_t),
        }
    }

    fn approach_step(&mut self, scene: &SceneState, q_t: DVector<f64>) -> StepReport {
        let Some(q_star) = self.q_star.clone() else {
            return self.report(scene, q_t, 0.0, false, false);
        };
        let tau = self.config.tau;
        let (q_s, s) = closest_on_trajectory(&q_t, &self.q_0, &q_star);
        let total = (&q_star - &self.q_0).norm();
        let ahead = if total > 0.0 { (s + tau / total).min(1.0) } else { 1.0 };
        let q_f = &self.q_0 + (&q_star - &self.q_0) * ahead;
        let to_f = &q_f - &q_t;
        let forward = if to_f.norm() > tau { &q_t + &to_f * (tau / to_f.norm()) } else { q_f };

        let resume_ok = self.phase == Phase::Approach || self.segment_clear(scene, &q_t, &q_s);
        if resume_ok && self.segment_clear(scene, &q_t, &forward) {
            self.phase = Phase::Approach;
            let (_, s_new) = closest_on_trajectory(&forward, &self.q_0, &q_star);
            if (&forward - &q_star).norm() < 1e-12 {
                self.phase = Phase::Grasp;
            }
            return self.report(scene, forward, s_new, false, false);
        }

        let home = &self.q_0 - &q_t;
        if home.norm() > 1e-12 {
            let back = if home.norm() > tau { &q_t + home.clone() * (tau / home.norm()) } else { self.q_0.clone() };
            let floor = self.min_distance(scene, &q_t);
            if self.segment_clear_with_floor(scene, &q_t, &back, floor) {
                self.phase = Phase::Backstep;
                self.backsteps += 1;
                let (_, s_new) = closest_on_trajectory(&back, &self.q_0, &q_star);
                return self.report(scene, back, s_new, true, false);
            }
        }
        self.report(scene, q_t, s, false, true)
    }

    /// Geometric grasp test against the true object pose.
    pub fn grasp_ok(&self, scene: &SceneState, q: &DVector<f64>) -> bool {
        let ee = *scene.robot.fk(q).end_effector();
        let obj = &scene.objects[self.target_index].cuboid;
        if !obj.contains(ee.translation()) {
            return false;
        }
        let c = ee.inverse().transform_point(&obj.center());
        let half_aperture = scene.robot.aperture() / 2.0;
        let jaw = ee.axis(1);
        let width: f64 = (0..3).map(|k| 2.0 * obj.half_extents()[k] * obj.pose.axis(k).dot(&jaw).abs()).sum();
        c.y.abs() <= half_aperture && width <= scene.robot.aperture()
    }

    fn grasp_step(&mut self, scene: &SceneState, q_t: DVector<f64>) -> StepReport {
        if self.grasp_ok(scene, &q_t) {
            let ee = scene.robot.fk(&q_t).end_effector().translation() + Vector3::new(0.0, 0.0, self.config.lift_height);
            self.lift_goal = Some(ee);
            self.phase = Phase::Lift;
            let mut r = self.report(scene, q_t, 1.0, false, false);
            r.grasped = true;
            return r;
        }
        self.phase = Phase::Approach;
        self.report(scene, q_t, 1.0, false, false)
    }

    fn lift_step(&mut self, scene: &SceneState, q_t: DVector<f64>) -> StepReport {
        let goal = self.lift_goal.expect("lift goal set on grasp");
        let fk = scene.robot.fk(&q_t);
        let err = goal - fk.end_effector().translation();
        if err.norm() < 1e-3 {
            self.phase = Phase::Done;
            return self.report(scene, q_t, 1.0, false, false);
        }
        let dx = if err.norm() > self.config.lift_step { err * (self.config.lift_step / err.norm()) } else { err };
        let j = scene.robot.ee_jacobian(&fk);
        let mut twist = DVector::zeros(6);
        twist.rows_mut(0, 3).copy_from(&dx);
        // Damped least squares keeps the orientation fixed.
        let jjt = &j * j.transpose() + DMatrix::identity(6, 6) * 1e-6;
        let dq = j.transpose() * jjt.cholesky().expect("damped matrix is SPD").solve(&twist);
        let q_new = &q_t + dq;
        if self.segment_clear(scene, &q_t, &q_new) {
            self.report(scene, q_new, 1.0, false, false)
        } else {
            self.report(scene, q_t, 1.0, false, true)
        }
    }

    pub const CSV_HEADER_PREFIX: &'static str = "tick,phase";

    pub fn csv_header(n_joints: usize) -> String {
        let mut h = String::from("tick,phase");
        for i in 0..n_joints {
            h.push_str(&format!(",q{i}"));
        }
        h.push_str(",s,backstep,min_distance");
        h
    }

    pub fn write_csv_row<W: Write>(out: &mut W, tick: u64, r: &StepReport) -> io::Result<()> {
        write!(out, "{tick},{}", r.phase.name())?;
        for v in r.q.iter() {
            write!(out, ",{v:.9}")?;
        }
        writeln!(out, ",{:.6},{},{:.6}", r.s, r.backstep as u8, r.min_distance)
    }
}
