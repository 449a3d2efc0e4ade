//! Serial-chain robot model, scene container and the distance and task-map
//! queries used by the grasp observer and the planner.

mod distance;
mod robot;
mod scene;
mod taskmaps;

pub use distance::{capsule_box_distance, capsule_table_distance, Capsule, SegmentDistance};
pub use robot::{CapsuleKind, CapsuleSpec, FixedTransform, Fk, JointSpec, RobotConfig, RobotModel};
pub use scene::{Obstacle, PairDistance, SceneObject, SceneState};
pub use taskmaps::{TaskMapOptions, TaskMapValues, TaskMaps, TaskTerm};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("expected {expected} joint values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid robot config: {0}")]
    InvalidConfig(String),
    #[error("object index {0} out of range")]
    NoSuchObject(usize),
}
