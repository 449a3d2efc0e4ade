//! Wire messages of the live session: newline-delimited JSON, one object
//! per line, each carrying `type`, `tick` and `proto_version`.

use serde::{Deserialize, Serialize};

pub const PROTO_VERSION: u32 = 1;
/// Per-command bounds that keep the simulation well posed.
pub const MAX_TRANSLATION: f64 = 0.5;
pub const MAX_ROTATION: f64 = std::f64::consts::FRAC_PI_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMsg {
    pub position: [f64; 3],
    /// `[w, x, y, z]`.
    pub quaternion: [f64; 4],
}

impl From<&crate::geometry::Pose> for PoseMsg {
    fn from(p: &crate::geometry::Pose) -> Self {
        let t = p.translation();
        PoseMsg {
            position: [t.x, t.y, t.z],
            quaternion: p.quaternion(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMsg {
    pub index: usize,
    pub pose: PoseMsg,
    pub half_extents: [f64; 3],
    pub attached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapsuleMsg {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotMsg {
    pub q: Vec<f64>,
    pub ee: PoseMsg,
    pub capsules: Vec<CapsuleMsg>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerMsg {
    pub pose: PoseMsg,
    pub half_extents: [f64; 3],
    pub status: String,
    pub score: f64,
    pub in_hand: bool,
    pub t_err: Option<f64>,
    pub r_err: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateMsg {
    pub index: usize,
    pub age: u64,
    pub inside: bool,
    pub feasible: bool,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolMsg {
    pub best: Option<usize>,
    pub no_feasible_grasp: bool,
    pub candidates: Vec<CandidateMsg>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerMsg {
    pub phase: String,
    pub s: f64,
    pub backstep: bool,
    pub backsteps: u64,
    /// Smallest pair distance at the last planner step, if any.
    pub min_distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub scenario: String,
    pub target: usize,
    pub paused: bool,
    pub objects: Vec<ObjectMsg>,
    pub robot: RobotMsg,
    pub tracker: Option<TrackerMsg>,
    pub pool: Option<PoolMsg>,
    pub planner: Option<PlannerMsg>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Command {
    /// Translation (and optional rotation vector) applied to an object.
    MoveObject {
        index: usize,
        #[serde(default)]
        delta: [f64; 3],
        #[serde(default)]
        rotation: [f64; 3],
    },
    RotateObject { index: usize, yaw: f64 },
    NudgeJoint { joint: usize, delta: f64 },
    Pause,
    Resume,
    Reset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Snapshot {
        proto_version: u32,
        tick: u64,
        #[serde(flatten)]
        snapshot: Box<Snapshot>,
    },
    Command {
        proto_version: u32,
        tick: u64,
        /// Client-side tag; a repeated tag is applied once.
        #[serde(default)]
        client_tick: Option<u64>,
        command: Command,
    },
    Error {
        proto_version: u32,
        tick: u64,
        message: String,
    },
}

impl Message {
    pub fn tick(&self) -> u64 {
        match self {
            Message::Snapshot { tick, .. } | Message::Command { tick, .. } | Message::Error { tick, .. } => *tick,
        }
    }

    pub fn error(tick: u64, message: impl Into<String>) -> Self {
        Message::Error {
            proto_version: PROTO_VERSION,
            tick,
            message: message.into(),
        }
    }

    /// One line, no trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("messages serialize")
    }

    pub fn parse(line: &str) -> Result<Message, String> {
        let m: Message = serde_json::from_str(line.trim()).map_err(|e| e.to_string())?;
        let v = match &m {
            Message::Snapshot { proto_version, .. } | Message::Command { proto_version, .. } | Message::Error { proto_version, .. } => {
                *proto_version
            }
        };
        if v != PROTO_VERSION {
            return Err(format!("proto_version {v} not supported (expected {PROTO_VERSION})"));
        }
        Ok(m)
    }
}

impl Command {
    /// Rejects out-of-range payloads.
    pub fn check(&self) -> Result<(), String> {
        let norm = |v: &[f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        match self {
            Command::MoveObject { delta, rotation, .. } => {
                if !delta.iter().chain(rotation).all(|x| x.is_finite()) {
                    return Err("non-finite payload".into());
                }
                if norm(delta) > MAX_TRANSLATION {
                    return Err(format!("translation {:.3} m exceeds {MAX_TRANSLATION} m", norm(delta)));
                }
                if norm(rotation) > MAX_ROTATION {
                    return Err(format!("rotation {:.3} rad exceeds pi/2", norm(rotation)));
                }
            }
            Command::RotateObject { yaw, .. } => {
                if !(yaw.abs() <= MAX_ROTATION) {
                    return Err(format!("rotation {yaw} rad exceeds pi/2"));
                }
            }
            Command::NudgeJoint { delta, .. } => {
                if !(delta.abs() <= MAX_ROTATION) {
                    return Err(format!("joint delta {delta} rad exceeds pi/2"));
                }
            }
            Command::Pause | Command::Resume | Command::Reset => {}
        }
        Ok(())
    }
}
