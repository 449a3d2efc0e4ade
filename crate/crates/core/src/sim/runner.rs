use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};

use super::protocol::{
    CandidateMsg, CapsuleMsg, Command, ObjectMsg, PlannerMsg, PoolMsg, PoseMsg, RobotMsg, Snapshot, TrackerMsg,
};
use super::scenario::{Event, RunMode, Scenario, Trigger};
use super::{render, RenderOptions, SimError};
use crate::geometry::{project_bbox, Cuboid, DepthImage, Pose};
use crate::kinematics::{RobotModel, SceneObject, SceneState};
use crate::observer::{GraspObserver, Ranking};
use crate::planner::{Phase, Planner, StepReport};
use crate::tracking::{self, align_yaw, detect_objects, Frame, StepContext, TrackerState};

/// Summary and CSV logs of one run.
#[derive(Clone, Debug, Default)]
pub struct Metrics {
    pub tracking_csv: String,
    pub planner_csv: String,
    pub ticks: u64,
    pub frames: u64,
    pub lost_frames: u64,
    pub t_errors: Vec<f64>,
    pub r_errors: Vec<f64>,
    pub backsteps: u64,
    pub grasped: bool,
    pub success: bool,
    pub final_phase: Option<Phase>,
    /// Published configurations with a negative pair distance.
    pub unsafe_configs: u64,
    pub min_distance: f64,
    pub recoveries: u64,
    /// Largest fraction of the target's pixels hidden by an occluder.
    pub max_occlusion: f64,
    /// Wall-clock tracking step durations (ms); not part of the CSV output.
    pub step_ms: Vec<f64>,
}

impl Metrics {
    pub fn max_t_err(&self) -> f64 {
        self.t_errors.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_r_err(&self) -> f64 {
        self.r_errors.iter().cloned().fold(0.0, f64::max)
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("tracking.csv"), &self.tracking_csv)?;
        std::fs::write(dir.join("planner.csv"), &self.planner_csv)?;
        let mut s = String::new();
        let _ = writeln!(s, "ticks = {}", self.ticks);
        let _ = writeln!(s, "frames = {}", self.frames);
        let _ = writeln!(s, "lost_frames = {}", self.lost_frames);
        let _ = writeln!(s, "max_t_err_m = {:.6}", self.max_t_err());
        let _ = writeln!(s, "max_r_err_rad = {:.6}", self.max_r_err());
        let _ = writeln!(s, "backsteps = {}", self.backsteps);
        let _ = writeln!(s, "grasped = {}", self.grasped);
        let _ = writeln!(s, "success = {}", self.success);
        let _ = writeln!(s, "final_phase = \"{}\"", self.final_phase.map(|p| p.name()).unwrap_or("none"));
        let _ = writeln!(s, "unsafe_configs = {}", self.unsafe_configs);
        let _ = writeln!(s, "min_distance_m = {:.6}", self.min_distance);
        let _ = writeln!(s, "recoveries = {}", self.recoveries);
        std::fs::write(dir.join("outcome.toml"), s)
    }
}

enum Motion {
    Occluder { index: usize, path: Vec<Vector3<f64>>, start: u64, duration: u64 },
    Joints { step: DVector<f64>, remaining: u64 },
    Ee { step: Vector3<f64>, remaining: u64 },
}

/// Owns the scene and the tick clock; tracker, observer and planner run
/// once per tick in that order.
pub struct Simulation {
    pub scenario: Scenario,
    pub scene: SceneState,
    tick: u64,
    background: DepthImage,
    side_background: DepthImage,
    tracker: Option<TrackerState>,
    observer: Option<GraspObserver>,
    planner: Option<Planner>,
    last_report: Option<StepReport>,
    events: Vec<(usize, bool)>,
    motions: Vec<Motion>,
    occluder: Option<usize>,
    pause_until: u64,
    paused: bool,
    phase_entered: Vec<(Phase, u64)>,
    max_s: f64,
    metrics: Metrics,
    last_client_tick: Option<u64>,
}

fn resolved_rate(robot: &RobotModel, q: &DVector<f64>, dx: &Vector3<f64>) -> DVector<f64> {
    let fk = robot.fk(q);
    let j = robot.ee_jacobian(&fk);
    let mut twist = DVector::zeros(6);
    twist.rows_mut(0, 3).copy_from(dx);
    let jjt = &j * j.transpose() + DMatrix::identity(6, 6) * 1e-6;
    q + j.transpose() * jjt.cholesky().expect("damped matrix is SPD").solve(&twist)
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        Self::with_robot(scenario, RobotModel::panda())
    }

    pub fn with_robot(scenario: Scenario, robot: RobotModel) -> Result<Self, SimError> {
        scenario.validate()?;
        let scene = scenario.build_scene(robot)?;
        let top = scene.topdown.expect("scenario sets the top-down camera");
        let mut empty = scene.clone();
        empty.objects.clear();
        let bg_opts = RenderOptions { render_robot: false, ..scenario.render };
        let background = render(&empty, &top, &bg_opts, 0).depth;
        let side_background = render(&empty, &empty.camera, &bg_opts, 0).depth;
        let events = (0..scenario.events.len()).map(|i| (i, false)).collect();
        let mut sim = Self {
            scene,
            tick: 0,
            background,
            side_background,
            tracker: None,
            observer: None,
            planner: None,
            last_report: None,
            events,
            motions: Vec::new(),
            occluder: None,
            pause_until: 0,
            paused: false,
            phase_entered: Vec::new(),
            max_s: 0.0,
            metrics: Metrics {
                min_distance: f64::INFINITY,
                ..Metrics::default()
            },
            last_client_tick: None,
            scenario,
        };
        sim.metrics.tracking_csv = format!("{}\n", tracking::CSV_HEADER);
        sim.metrics.planner_csv = format!("{}\n", Planner::csv_header(sim.scene.robot.n_joints()));
        if sim.scenario.use_tracker {
            sim.start_tracker()?;
        }
        if sim.scenario.mode == RunMode::Grasp {
            let target = sim.target_estimate();
            let skip = Some(sim.scenario.target);
            let q = sim.scene.q().clone();
            sim.observer = Some(GraspObserver::new(sim.scenario.observer, &sim.scene, &target, skip, &q)?);
            sim.planner = Some(Planner::new(sim.scenario.planner, q, sim.scenario.target));
        }
        Ok(sim)
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn tracker(&self) -> Option<&TrackerState> {
        self.tracker.as_ref()
    }

    pub fn planner(&self) -> Option<&Planner> {
        self.planner.as_ref()
    }

    pub fn observer(&self) -> Option<&GraspObserver> {
        self.observer.as_ref()
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    fn target_truth(&self) -> Cuboid {
        self.scene.objects[self.scenario.target].cuboid
    }

    /// Tracked cuboid, or ground truth when tracking is off.
    pub fn target_estimate(&self) -> Cuboid {
        match &self.tracker {
            Some(t) => t.cuboid(),
            None => self.target_truth(),
        }
    }

    /// Top-down detections, nearest first to `near`.
    fn detect(&self, near: &Vector3<f64>) -> Result<Vec<tracking::Detection>, SimError> {
        let top = self.scene.topdown.as_ref().expect("top-down camera");
        let frame = render(&self.scene, top, &self.scenario.render, self.tick.wrapping_add(1 << 40));
        let caps = self.scene.robot_capsules();
        let mut d = detect_objects(&frame.depth, &self.background, top, &caps, &self.scenario.detect)?;
        d.sort_by(|a, b| (a.cuboid.center() - near).norm().total_cmp(&(b.cuboid.center() - near).norm()));
        Ok(d)
    }

    fn start_tracker(&mut self) -> Result<(), SimError> {
        let truth = self.target_truth();
        let det = self.detect(&truth.center())?;
        let Some(first) = det.into_iter().next() else {
            return Err(SimError::Invariant { tick: self.tick, module: "tracking-pipeline", message: "no object detected at start".into() });
        };
        let cam = &self.scene.camera;
        let bbox = project_bbox(&first.cuboid, cam)?;
        let f = render(&self.scene, cam, &self.scenario.render, self.tick);
        let caps = self.scene.robot_capsules();
        let frame = Frame { intensity: &f.intensity, depth: &f.depth, index: self.tick };
        let mut t = TrackerState::initialize(frame, &bbox, &first.cuboid, cam, &caps, self.scenario.tracker)?;
        t.set_reference(truth.pose);
        self.tracker = Some(t);
        Ok(())
    }

    fn trigger_due(&self, at: &Trigger) -> bool {
        match at {
            Trigger::Tick(t) => self.tick >= *t,
            Trigger::Phase { phase, delay } => {
                self.phase_entered.iter().any(|(p, t)| p == phase && self.tick >= t + delay)
            }
            Trigger::Progress(s) => self.max_s >= *s,
        }
    }

    fn fire(&mut self, event: Event) -> Result<(), SimError> {
        match event {
            Event::MoveObject { index, position, rpy } => {
                self.scene.set_object_pose(index, Pose::from_rpy(rpy[0], rpy[1], rpy[2], Vector3::from(position)))?;
            }
            Event::TeleportObject { index, delta, yaw } => {
                let p = self.scene.objects[index].cuboid.pose;
                let moved = Pose::from_rpy(0.0, 0.0, yaw, Vector3::zeros()).compose(&Pose::from_translation(-p.translation()));
                let back = Pose::from_translation(p.translation() + Vector3::new(delta[0], delta[1], 0.0));
                self.scene.set_object_pose(index, back.compose(&moved).compose(&p).renormalized())?;
            }
            Event::Occlude { half_extents, path, duration } => {
                let path: Vec<Vector3<f64>> = path.iter().map(|p| Vector3::from(*p)).collect();
                let cuboid = Cuboid::new(Pose::from_translation(path[0]), Vector3::from(half_extents))?;
                self.scene.objects.push(SceneObject { cuboid, albedo: 0.3, textured: false });
                let index = self.scene.objects.len() - 1;
                self.occluder = Some(index);
                self.motions.push(Motion::Occluder { index, path, start: self.tick, duration: duration.max(1) });
            }
            Event::PerturbRobot { dq } => {
                let q = self.scene.q() + DVector::from_vec(dq);
                self.scene.set_q(q)?;
            }
            Event::PauseTracking { duration } => self.pause_until = self.tick + duration,
            Event::MoveJoints { dq, duration } => {
                let d = duration.max(1);
                self.motions.push(Motion::Joints { step: DVector::from_vec(dq) / d as f64, remaining: d });
            }
            Event::MoveEe { delta, duration } => {
                let d = duration.max(1);
                self.motions.push(Motion::Ee { step: Vector3::from(delta) / d as f64, remaining: d });
            }
            Event::Release => {
                self.scene.detach();
                if let Some(t) = &mut self.tracker {
                    t.release();
                }
            }
        }
        Ok(())
    }

    /// Returns true when a scripted motion moved the robot this tick.
    fn advance_motions(&mut self) -> Result<bool, SimError> {
        let mut robot_moved = false;
        let mut keep = Vec::with_capacity(self.motions.len());
        for m in std::mem::take(&mut self.motions) {
            match m {
                Motion::Occluder { index, path, start, duration } => {
                    let u = (self.tick - start) as f64 / duration as f64;
                    if u > 1.0 {
                        if self.occluder == Some(index) && index + 1 == self.scene.objects.len() {
                            self.scene.objects.pop();
                            self.occluder = None;
                        }
                        continue;
                    }
                    let x = u * (path.len() - 1) as f64;
                    let i = (x.floor() as usize).min(path.len().saturating_sub(2));
                    let p = if path.len() == 1 { path[0] } else { path[i] + (path[i + 1] - path[i]) * (x - i as f64) };
                    self.scene.objects[index].cuboid.pose = Pose::from_translation(p);
                    keep.push(Motion::Occluder { index, path, start, duration });
                }
                Motion::Joints { step, remaining } => {
                    let q = self.scene.q() + &step;
                    self.scene.set_q(q)?;
                    robot_moved = true;
                    if remaining > 1 {
                        keep.push(Motion::Joints { step, remaining: remaining - 1 });
                    }
                }
                Motion::Ee { step, remaining } => {
                    let q = resolved_rate(&self.scene.robot, self.scene.q(), &step);
                    self.scene.set_q(q)?;
                    robot_moved = true;
                    if remaining > 1 {
                        keep.push(Motion::Ee { step, remaining: remaining - 1 });
                    }
                }
            }
        }
        self.motions = keep;
        Ok(robot_moved)
    }

    fn occlusion_fraction(&self, labels: &crate::geometry::Image<i16>) -> f64 {
        let Some(occ) = self.occluder else {
            return 0.0;
        };
        let target = self.scenario.target as i16;
        let visible = labels.data().iter().filter(|&&l| l == target).count();
        let mut clear = self.scene.clone();
        clear.objects.remove(occ);
        let opts = RenderOptions { depth_noise: 0.0, ..self.scenario.render };
        let full = render(&clear, &clear.camera, &opts, self.tick).labels.data().iter().filter(|&&l| l == target).count();
        if full == 0 {
            0.0
        } else {
            1.0 - visible as f64 / full as f64
        }
    }

    fn track_frame(&mut self) -> Result<(), SimError> {
        if self.tracker.is_none() {
            return Ok(());
        }
        let f = render(&self.scene, &self.scene.camera, &self.scenario.render, self.tick);
        if self.occluder.is_some() {
            let frac = self.occlusion_fraction(&f.labels);
            self.metrics.max_occlusion = self.metrics.max_occlusion.max(frac);
        }
        let tracker = self.tracker.as_mut().expect("checked above");
        let caps = self.scene.robot_capsules();
        let gt = self.scene.objects[self.scenario.target].cuboid.pose;
        let ctx = StepContext {
            ee_pose: Some(self.scene.ee_pose()),
            exclude: &caps,
            ground_truth: Some(gt),
        };
        let started = Instant::now();
        let result = if self.tick < self.pause_until {
            tracker.skip(self.tick, &ctx)?
        } else {
            tracker.step(Frame { intensity: &f.intensity, depth: &f.depth, index: self.tick }, &ctx)?
        };
        self.metrics.step_ms.push(started.elapsed().as_secs_f64() * 1e3);
        let entry = *tracker.history().back().expect("step records history");
        if entry.pose.orthonormality_error() > 1e-6 {
            return Err(SimError::Invariant { tick: self.tick, module: "tracking-pipeline", message: "pose lost orthonormality".into() });
        }
        self.metrics.frames += 1;
        let _ = writeln!(self.metrics.tracking_csv, "{}", entry.csv_row());
        if let (Some(t), Some(r)) = (entry.t_err, entry.r_err) {
            self.metrics.t_errors.push(t);
            self.metrics.r_errors.push(r);
        }
        if result.status.is_lost() {
            self.metrics.lost_frames += 1;
        }
        let in_free = matches!(tracker.mode(), tracking::Mode::Free);
        if result.status.is_lost() && in_free {
            self.recover(&f.depth)?;
        }
        Ok(())
    }

    /// Re-localizes the target: pose guesses from the top-down detections
    /// and from foreground clusters in the side view are refined by
    /// registering the template onto nearby side-view foreground points.
    fn recover(&mut self, side_depth: &DepthImage) -> Result<(), SimError> {
        let (pose, half) = {
            let t = self.tracker.as_ref().expect("tracker");
            (*t.current_pose(), *t.cuboid().half_extents())
        };
        let cam = &self.scene.camera;
        let caps = self.scene.robot_capsules();
        let mut guesses = Vec::new();
        for d in self.detect(pose.translation())? {
            if (d.cuboid.half_extents().z - half.z).abs() < 0.015 {
                guesses.push(align_yaw(&d.cuboid, &pose, &half));
            }
        }
        let side = detect_objects(side_depth, &self.side_background, cam, &caps, &self.scenario.detect)?;
        let eye = cam.center();
        for d in &side {
            let c = d.cuboid.center();
            let away = Vector3::new(c.x - eye.x, c.y - eye.y, 0.0).normalize() * 0.5 * (half.x + half.y);
            let t = Vector3::new(c.x + away.x, c.y + away.y, half.z.max(c.z));
            for dyaw in [0.0, -0.3, 0.3] {
                let r = Pose::from_rpy(0.0, 0.0, dyaw, Vector3::zeros());
                guesses.push(Pose::new(r.rotation() * pose.rotation(), t)?);
            }
        }

        let mut fg = crate::geometry::Mask::filled(side_depth.width(), side_depth.height(), false);
        for v in 0..side_depth.height() {
            for u in 0..side_depth.width() {
                let d = *side_depth.get(u, v) as f64;
                let b = *self.side_background.get(u, v) as f64;
                if d > 0.0 && (b <= 0.0 || b - d > self.scenario.detect.threshold) {
                    fg.set(u, v, true);
                }
            }
        }
        let tracker = self.tracker.as_ref().expect("tracker");
        let cfg = *tracker.config();
        let points = crate::geometry::backproject(side_depth, &fg, cam)?;
        let reach = half.norm() + cfg.gate_margin;
        let mut best: Option<(Pose, f64)> = None;
        for g in &guesses {
            let c = *g.translation();
            let near = points.filtered(|_, p| {
                p.z > cfg.table_z && (p - c).norm() <= reach && !caps.iter().any(|k| {
                    let ab = k.b - k.a;
                    let t = ((p - k.a).dot(&ab) / ab.norm_squared().max(1e-12)).clamp(0.0, 1.0);
                    (p - (k.a + ab * t)).norm() < k.radius + cfg.robot_margin
                })
            });
            if near.len() < cfg.min_points {
                continue;
            }
            let near = crate::geometry::voxel_filter(&near, cfg.voxel_leaf)?;
            if let Some(r) = tracker.relocalize(&near, g) {
                if r.fitness > best.as_ref().map(|b| b.1).unwrap_or(0.6) {
                    best = Some((r.transform, r.fitness));
                }
            }
        }
        if let Some((p, _)) = best {
            let bbox = project_bbox(&Cuboid::new(p, half)?, cam)?;
            if !bbox.is_empty() {
                self.tracker.as_mut().expect("tracker").reseed(p, bbox);
                self.metrics.recoveries += 1;
            }
        }
        Ok(())
    }

    fn record_phase(&mut self, phase: Phase) {
        if !self.phase_entered.iter().any(|(p, _)| *p == phase) {
            self.phase_entered.push((phase, self.tick));
        }
    }

    fn control(&mut self) -> Result<(), SimError> {
        let (Some(observer), Some(planner)) = (&mut self.observer, &mut self.planner) else {
            return Ok(());
        };
        if matches!(planner.phase, Phase::Approach | Phase::Backstep | Phase::Grasp) {
            let target = match &self.tracker {
                Some(t) => t.cuboid(),
                None => self.scene.objects[self.scenario.target].cuboid,
            };
            let ranking: Ranking = observer.tick(&self.scene, &target, Some(self.scenario.target)).clone();
            planner.select_target(&ranking, &observer.candidates);
        }
        let report = planner.plan_step(&self.scene);
        if report.min_distance < 0.0 {
            self.metrics.unsafe_configs += 1;
        }
        self.metrics.min_distance = self.metrics.min_distance.min(report.min_distance);
        if report.backstep {
            self.metrics.backsteps += 1;
        }
        if matches!(report.phase, Phase::Approach | Phase::Backstep) {
            self.max_s = self.max_s.max(report.s);
        }
        self.scene.set_q(report.q.clone())?;
        if report.grasped {
            self.metrics.grasped = true;
            self.scene.attach(self.scenario.target)?;
            if let Some(t) = &mut self.tracker {
                t.grasp(&self.scene.ee_pose());
            }
        }
        let phase = report.phase;
        let _ = Planner::write_csv_row(&mut CsvSink(&mut self.metrics.planner_csv), self.tick, &report);
        self.last_report = Some(report);
        self.record_phase(phase);
        Ok(())
    }

    /// Advances one tick.
    pub fn step(&mut self) -> Result<(), SimError> {
        self.tick += 1;
        for k in 0..self.events.len() {
            let (i, fired) = self.events[k];
            if !fired && self.trigger_due(&self.scenario.events[i].at) {
                self.events[k].1 = true;
                let e = self.scenario.events[i].event.clone();
                self.fire(e)?;
            }
        }
        let scripted = self.advance_motions()?;
        if self.tick % self.scenario.frame_every == 0 {
            self.track_frame()?;
        }
        if !scripted {
            self.control()?;
        } else if let Some(planner) = &self.planner {
            let q = self.scene.q().clone();
            let report = StepReport {
                min_distance: planner.min_distance(&self.scene, &q),
                q,
                phase: planner.phase,
                s: 1.0,
                backstep: false,
                stuck: false,
                grasped: false,
            };
            let _ = Planner::write_csv_row(&mut CsvSink(&mut self.metrics.planner_csv), self.tick, &report);
        }
        self.metrics.ticks = self.tick;
        Ok(())
    }

    pub fn finished(&self) -> bool {
        if self.tick >= self.scenario.duration {
            return true;
        }
        let pending = self.events.iter().any(|(_, f)| !f) || !self.motions.is_empty();
        self.scenario.stop_when_done
            && !pending
            && self.planner.as_ref().map(|p| p.phase == Phase::Done).unwrap_or(false)
    }

    /// Runs to completion.
    pub fn run(mut self) -> Result<Metrics, SimError> {
        while !self.finished() {
            self.step()?;
        }
        Ok(self.into_metrics())
    }

    pub fn into_metrics(mut self) -> Metrics {
        self.metrics.final_phase = self.planner.as_ref().map(|p| p.phase);
        self.metrics.success = match self.scenario.mode {
            RunMode::Grasp => self.metrics.grasped && self.metrics.final_phase == Some(Phase::Done),
            RunMode::Track => self.metrics.lost_frames == 0,
        };
        self.metrics
    }

    /// Applies a live-session command. A repeated `client_tick` is ignored.
    pub fn apply_command(&mut self, command: &Command, client_tick: Option<u64>) -> Result<(), SimError> {
        command.check().map_err(SimError::Command)?;
        if let (Some(c), Some(last)) = (client_tick, self.last_client_tick) {
            if c <= last {
                return Ok(());
            }
        }
        if client_tick.is_some() {
            self.last_client_tick = client_tick;
        }
        let n = self.scene.objects.len();
        match command {
            Command::MoveObject { index, delta, rotation } => {
                let o = self.scene.objects.get(*index).ok_or_else(|| SimError::Command(format!("no object {index} (have {n})")))?;
                let p = o.cuboid.pose;
                let r = Pose::from_rotation_vector(&Vector3::from(*rotation), Vector3::zeros());
                let moved = Pose::new(r.rotation() * p.rotation(), p.translation() + Vector3::from(*delta))?;
                self.scene.set_object_pose(*index, moved.renormalized())?;
            }
            Command::RotateObject { index, yaw } => {
                let o = self.scene.objects.get(*index).ok_or_else(|| SimError::Command(format!("no object {index} (have {n})")))?;
                let p = o.cuboid.pose;
                let r = Pose::from_rpy(0.0, 0.0, *yaw, Vector3::zeros());
                self.scene.set_object_pose(*index, Pose::new(r.rotation() * p.rotation(), *p.translation())?.renormalized())?;
            }
            Command::NudgeJoint { joint, delta } => {
                if *joint >= self.scene.robot.n_joints() {
                    return Err(SimError::Command(format!("no joint {joint}")));
                }
                let mut q = self.scene.q().clone();
                q[*joint] += delta;
                self.scene.set_q(q)?;
            }
            Command::Pause => self.paused = true,
            Command::Resume => self.paused = false,
            Command::Reset => {
                let fresh = Simulation::with_robot(self.scenario.clone(), self.scene.robot.clone())?;
                *self = fresh;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        let attached = self.scene.attached().map(|(i, _)| i);
        let objects = self
            .scene
            .objects
            .iter()
            .enumerate()
            .map(|(index, o)| ObjectMsg {
                index,
                pose: PoseMsg::from(&o.cuboid.pose),
                half_extents: (*o.cuboid.half_extents()).into(),
                attached: attached == Some(index),
            })
            .collect();
        let robot = RobotMsg {
            q: self.scene.q().iter().cloned().collect(),
            ee: PoseMsg::from(&self.scene.ee_pose()),
            capsules: self
                .scene
                .robot_capsules()
                .iter()
                .map(|c| CapsuleMsg { a: c.a.into(), b: c.b.into(), radius: c.radius })
                .collect(),
        };
        let tracker = self.tracker.as_ref().map(|t| {
            let e = t.history().back();
            TrackerMsg {
                pose: PoseMsg::from(t.current_pose()),
                half_extents: (*t.cuboid().half_extents()).into(),
                status: t.last_status().as_str().into(),
                score: e.map(|e| e.score).unwrap_or(0.0),
                in_hand: matches!(t.mode(), tracking::Mode::InHand { .. }),
                t_err: e.and_then(|e| e.t_err),
                r_err: e.and_then(|e| e.r_err),
            }
        });
        let pool = self.observer.as_ref().and_then(|o| {
            o.ranking().map(|r| PoolMsg {
                best: r.best(),
                no_feasible_grasp: r.no_feasible_grasp,
                candidates: o
                    .candidates
                    .iter()
                    .enumerate()
                    .map(|(i, c)| CandidateMsg {
                        index: i,
                        age: c.age,
                        inside: r.evaluations[i].inside,
                        feasible: r.evaluations[i].feasible,
                        distance: r.evaluations[i].distance,
                    })
                    .collect(),
            })
        });
        let planner = self.planner.as_ref().map(|p| PlannerMsg {
            phase: p.phase.name().into(),
            s: self.last_report.as_ref().map(|r| r.s).unwrap_or(0.0),
            backstep: self.last_report.as_ref().map(|r| r.backstep).unwrap_or(false),
            backsteps: p.backsteps,
            min_distance: self.last_report.as_ref().map(|r| r.min_distance).filter(|d| d.is_finite()),
        });
        Snapshot {
            scenario: self.scenario.name.clone(),
            target: self.scenario.target,
            paused: self.paused,
            objects,
            robot,
            tracker,
            pool,
            planner,
        }
    }
}

struct CsvSink<'a>(&'a mut String);

impl std::io::Write for CsvSink<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.push_str(std::str::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Runs a scenario headless and returns its metrics.
pub fn run_scenario(scenario: &Scenario) -> Result<Metrics, SimError> {
    Simulation::new(scenario.clone())?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{ObjectSpec, TimedEvent};

    fn small(mode: RunMode) -> Scenario {
        let mut s = Scenario::random_grasp(5);
        s.mode = mode;
        s.duration = 40;
        s
    }

    #[test]
    fn identical_runs_give_identical_csv() {
        let a = run_scenario(&small(RunMode::Grasp)).unwrap();
        let b = run_scenario(&small(RunMode::Grasp)).unwrap();
        assert!(a.frames > 10);
        assert_eq!(a.tracking_csv, b.tracking_csv);
        assert_eq!(a.planner_csv, b.planner_csv);
        let mut other = small(RunMode::Grasp);
        other.render.noise_seed += 1;
        assert_ne!(run_scenario(&other).unwrap().tracking_csv, a.tracking_csv);
    }

    #[test]
    fn csv_headers_and_rows() {
        let m = run_scenario(&small(RunMode::Grasp)).unwrap();
        let mut lines = m.tracking_csv.lines();
        assert_eq!(lines.next(), Some("frame_index,t_err_m,r_err_rad,score,status"));
        assert_eq!(lines.count() as u64, m.frames);
        let mut lines = m.planner_csv.lines();
        assert_eq!(lines.next().unwrap(), "tick,phase,q0,q1,q2,q3,q4,q5,q6,s,backstep,min_distance");
        assert_eq!(lines.count() as u64, m.ticks);
    }

    #[test]
    fn events_fire_and_occluder_leaves() {
        let mut s = small(RunMode::Track);
        s.duration = 30;
        s.events = vec![
            TimedEvent { at: Trigger::Tick(4), event: Event::Occlude { half_extents: [0.02; 3], path: vec![[0.8, -0.3, 0.5], [0.8, -0.3, 0.3]], duration: 10 } },
            TimedEvent { at: Trigger::Tick(20), event: Event::MoveObject { index: 0, position: [0.55, 0.02, 0.05], rpy: [0.0; 3] } },
            TimedEvent { at: Trigger::Tick(22), event: Event::PerturbRobot { dq: vec![0.05, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0] } },
        ];
        s.objects[0].position[2] = 0.05;
        let mut sim = Simulation::new(s).unwrap();
        let q0 = sim.scene.q().clone();
        for _ in 0..8 {
            sim.step().unwrap();
        }
        assert_eq!(sim.scene.objects.len(), 2);
        let z = sim.scene.objects[1].cuboid.pose.translation().z;
        assert!(z < 0.5 && z > 0.3);
        for _ in 0..22 {
            sim.step().unwrap();
        }
        assert_eq!(sim.scene.objects.len(), 1);
        assert!((sim.scene.objects[0].cuboid.center() - Vector3::new(0.55, 0.02, 0.05)).norm() < 1e-12);
        assert!((sim.scene.q()[0] - q0[0] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn pause_holds_pose() {
        let mut s = small(RunMode::Track);
        s.duration = 12;
        s.events = vec![TimedEvent { at: Trigger::Tick(1), event: Event::PauseTracking { duration: 6 } }];
        let m = run_scenario(&s).unwrap();
        let statuses: Vec<&str> = m.tracking_csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
        assert_eq!(&statuses[..3], &["paused", "paused", "paused"]);
        assert_eq!(statuses[3], "ok");
    }

    #[test]
    fn scenario_validation() {
        let mut s = small(RunMode::Track);
        s.target = 3;
        assert!(matches!(s.validate(), Err(SimError::Scenario(_))));
        let mut s = small(RunMode::Track);
        s.events = vec![
            TimedEvent { at: Trigger::Tick(5), event: Event::Release },
            TimedEvent { at: Trigger::Tick(2), event: Event::Release },
        ];
        assert!(s.validate().is_err());
        let mut s = small(RunMode::Track);
        s.objects.push(ObjectSpec { position: [0.0; 3], rpy: [0.0; 3], half_extents: [0.0, 0.1, 0.1], albedo: None, textured: false });
        assert!(s.validate().is_err());
        let s = small(RunMode::Grasp);
        assert_eq!(Scenario::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn commands_change_the_scene() {
        let mut sim = Simulation::new(small(RunMode::Grasp)).unwrap();
        sim.step().unwrap();
        let before = sim.scene.objects[0].cuboid.center();
        sim.apply_command(&Command::MoveObject { index: 0, delta: [0.05, 0.0, 0.0], rotation: [0.0; 3] }, Some(1)).unwrap();
        let snap = sim.snapshot();
        assert!((snap.objects[0].pose.position[0] - before.x - 0.05).abs() < 1e-12);
        // Replayed client tick is ignored.
        sim.apply_command(&Command::MoveObject { index: 0, delta: [0.05, 0.0, 0.0], rotation: [0.0; 3] }, Some(1)).unwrap();
        assert!((sim.scene.objects[0].cuboid.center().x - before.x - 0.05).abs() < 1e-12);
        assert!(sim.apply_command(&Command::MoveObject { index: 9, delta: [0.0; 3], rotation: [0.0; 3] }, None).is_err());
        assert!(sim.apply_command(&Command::MoveObject { index: 0, delta: [0.9, 0.0, 0.0], rotation: [0.0; 3] }, None).is_err());
        sim.apply_command(&Command::NudgeJoint { joint: 1, delta: 0.1 }, None).unwrap();
        sim.apply_command(&Command::Pause, None).unwrap();
        assert!(sim.snapshot().paused);
        sim.apply_command(&Command::Reset, None).unwrap();
        assert_eq!(sim.tick(), 0);
        assert!((sim.scene.objects[0].cuboid.center() - before).norm() < 1e-12);
    }
}
