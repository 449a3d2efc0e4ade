//! Synthetic world: raycast rendering, scenario scripts and the closed
//! loop wiring tracker, observer and planner together.

pub mod protocol;
mod render;
mod runner;
mod scenario;

pub use render::{ray_capsule, render, FrameBundle, RenderOptions, LABEL_NONE, LABEL_ROBOT, LABEL_TABLE};
pub use runner::{run_scenario, Metrics, Simulation};
pub use scenario::{CameraSpec, Event, ObjectSpec, RunMode, Scenario, TimedEvent, Trigger};

use thiserror::Error;

use crate::geometry::GeometryError;
use crate::kinematics::KinematicsError;
use crate::observer::ObserverError;
use crate::tracking::TrackingError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("tick {tick}, {module}: {message}")]
    Invariant { tick: u64, module: &'static str, message: String },
    #[error("command rejected: {0}")]
    Command(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error(transparent)]
    Observer(#[from] ObserverError),
}
