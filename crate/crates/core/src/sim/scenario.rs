use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RenderOptions, SimError};
use crate::geometry::{CameraModel, Cuboid, Pose};
use crate::kinematics::{RobotModel, SceneObject, SceneState};
use crate::observer::ObserverConfig;
use crate::planner::{Phase, PlannerConfig};
use crate::tracking::{DetectConfig, TrackerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraSpec {
    pub fn side() -> Self {
        Self {
            eye: [1.3, -0.6, 0.5],
            target: [0.5, 0.0, 0.05],
            up: [0.0, 0.0, 1.0],
            focal: 500.0,
            width: 640,
            height: 480,
        }
    }

    pub fn top_down() -> Self {
        Self {
            eye: [0.5, 0.0, 1.2],
            target: [0.5, 0.0, 0.0],
            up: [0.0, 1.0, 0.0],
            focal: 300.0,
            width: 320,
            height: 240,
        }
    }

    pub fn build(&self) -> Result<CameraModel, SimError> {
        Ok(CameraModel::look_at(
            Vector3::from(self.eye),
            Vector3::from(self.target),
            Vector3::from(self.up),
            self.focal,
            self.width,
            self.height,
        )?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub position: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
    pub half_extents: [f64; 3],
    /// Drawn from the scenario seed when absent.
    #[serde(default)]
    pub albedo: Option<f64>,
    #[serde(default = "yes")]
    pub textured: bool,
}

fn yes() -> bool {
    true
}

impl ObjectSpec {
    pub fn pose(&self) -> Pose {
        Pose::from_rpy(self.rpy[0], self.rpy[1], self.rpy[2], Vector3::from(self.position))
    }
}

/// When an event fires.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Tick(u64),
    /// `delay` ticks after the planner first enters `phase`.
    Phase { phase: Phase, #[serde(default)] delay: u64 },
    /// First tick the path parameter reaches `s` during the approach.
    Progress(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    MoveObject { index: usize, position: [f64; 3], #[serde(default)] rpy: [f64; 3] },
    /// Relative jump in the table plane.
    TeleportObject { index: usize, delta: [f64; 2], #[serde(default)] yaw: f64 },
    /// Box moved along `path` (piecewise linear) over `duration` ticks, then removed.
    Occlude { half_extents: [f64; 3], path: Vec<[f64; 3]>, duration: u64 },
    PerturbRobot { dq: Vec<f64> },
    PauseTracking { duration: u64 },
    /// Joint-space motion spread evenly over `duration` ticks.
    MoveJoints { dq: Vec<f64>, duration: u64 },
    /// Straight end-effector translation at fixed orientation.
    MoveEe { delta: [f64; 3], duration: u64 },
    Release,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub at: Trigger,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Tracking only; the robot moves only through scripted events.
    Track,
    /// Full loop: tracker, observer and planner.
    Grasp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration: u64,
    #[serde(default = "grasp_mode")]
    pub mode: RunMode,
    #[serde(default = "CameraSpec::side")]
    pub camera: CameraSpec,
    #[serde(default = "CameraSpec::top_down")]
    pub topdown: CameraSpec,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub target: usize,
    #[serde(default)]
    pub q0: Option<Vec<f64>>,
    /// Camera frame every this many ticks.
    #[serde(default = "two")]
    pub frame_every: u64,
    #[serde(default = "yes")]
    pub use_tracker: bool,
    /// Stop once the planner is done and no events are pending.
    #[serde(default = "yes")]
    pub stop_when_done: bool,
    #[serde(default)]
    pub events: Vec<TimedEvent>,
    #[serde(default)]
    pub render: RenderOptions,
    #[serde(default)]
    pub tracker: TrackerConfig,
    #[serde(default)]
    pub detect: DetectConfig,
    #[serde(default)]
    pub observer: ObserverConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
}

fn grasp_mode() -> RunMode {
    RunMode::Grasp
}

fn two() -> u64 {
    2
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: Scenario = toml::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Scenario(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        if self.objects.is_empty() || self.target >= self.objects.len() {
            return bad(format!("target {} out of range for {} objects", self.target, self.objects.len()));
        }
        if self.frame_every == 0 {
            return bad("frame_every must be >= 1".into());
        }
        for o in &self.objects {
            if o.half_extents.iter().any(|h| !(*h > 0.0)) {
                return bad(format!("object half extents must be > 0: {:?}", o.half_extents));
            }
        }
        let mut last = 0;
        for e in &self.events {
            if let Trigger::Tick(t) = e.at {
                if t < last {
                    return bad(format!("events out of order at tick {t}"));
                }
                last = t;
            }
            match &e.event {
                Event::MoveObject { index, .. } | Event::TeleportObject { index, .. } if *index >= self.objects.len() => {
                    return bad(format!("event references object {index}"));
                }
                Event::Occlude { path, .. } if path.is_empty() => return bad("occlude path is empty".into()),
                _ => {}
            }
        }
        self.observer.validate().map_err(|e| SimError::Scenario(e.to_string()))?;
        Ok(())
    }

    pub fn build_scene(&self, robot: RobotModel) -> Result<SceneState, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xA1BE_D0);
        let mut objects = Vec::with_capacity(self.objects.len());
        for o in &self.objects {
            let albedo = rng.random_range(0.5..0.95);
            objects.push(SceneObject {
                cuboid: Cuboid::new(o.pose(), Vector3::from(o.half_extents))?,
                albedo: o.albedo.unwrap_or(albedo),
                textured: o.textured,
            });
        }
        let mut scene = SceneState::new(robot, objects, self.camera.build()?);
        scene.topdown = Some(self.topdown.build()?);
        if let Some(q0) = &self.q0 {
            scene.set_q(DVector::from_vec(q0.clone()))?;
        }
        Ok(scene)
    }

    /// Single cuboid in the reachable workspace, yaw within ±0.15 rad,
    /// grasp width 3.5 to 5.5 cm and height 4 to 8 cm.
    pub fn random_grasp(seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rng.random_range(0.035..0.055);
        let l = rng.random_range(0.035..0.055);
        let h = rng.random_range(0.04..0.08);
        let x = rng.random_range(0.45..0.60);
        let y = rng.random_range(-0.12..0.12);
        let yaw = rng.random_range(-0.15..0.15);
        Scenario {
            name: format!("random-grasp-{seed}"),
            seed,
            duration: 600,
            mode: RunMode::Grasp,
            camera: CameraSpec::side(),
            topdown: CameraSpec::top_down(),
            objects: vec![ObjectSpec {
                position: [x, y, h / 2.0],
                rpy: [0.0, 0.0, yaw],
                half_extents: [l / 2.0, w / 2.0, h / 2.0],
                albedo: None,
                textured: true,
            }],
            target: 0,
            q0: None,
            frame_every: 2,
            use_tracker: true,
            stop_when_done: true,
            events: Vec::new(),
            render: RenderOptions {
                noise_seed: seed,
                ..RenderOptions::default()
            },
            tracker: TrackerConfig::default(),
            detect: DetectConfig::default(),
            observer: ObserverConfig {
                seed,
                ..ObserverConfig::default()
            },
            planner: PlannerConfig::default(),
        }
    }

    /// `random_grasp` with two lateral teleports of 12 cm: one halfway
    /// along the approach, one the moment the gripper reaches the grasp.
    pub fn perturbed_grasp(seed: u64) -> Scenario {
        let mut s = Scenario::random_grasp(seed);
        s.name = format!("perturbed-grasp-{seed}");
        s.duration = 800;
        s.events = vec![
            TimedEvent {
                at: Trigger::Progress(0.5),
                event: Event::TeleportObject { index: 0, delta: [0.0, 0.12], yaw: 0.2 },
            },
            TimedEvent {
                at: Trigger::Phase { phase: Phase::Grasp, delay: 0 },
                event: Event::TeleportObject { index: 0, delta: [0.0, -0.12], yaw: -0.2 },
            },
        ];
        s
    }
}
