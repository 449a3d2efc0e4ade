//! Python module `thorgrasp`.
//!
//! Poses, G-ICP registration, scenarios and the simulation loop. Snapshots
//! and commands use the same JSON as the live session.

use nalgebra::Vector3;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use tg::geometry::{geodesic_error, PointCloud};
use tg::registration::{register as gicp, RegistrationConfig};
use tg::sim::protocol::{Command, Message, PROTO_VERSION};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Rigid transform.
#[pyclass(module = "thorgrasp", from_py_object)]
#[derive(Clone)]
pub struct Pose(tg::geometry::Pose);

#[pymethods]
impl Pose {
    #[new]
    #[pyo3(signature = (translation = [0.0, 0.0, 0.0], quaternion = [1.0, 0.0, 0.0, 0.0]))]
    fn new(translation: [f64; 3], quaternion: [f64; 4]) -> PyResult<Self> {
        tg::geometry::Pose::from_quaternion(quaternion, Vector3::from(translation)).map(Pose).map_err(value_err)
    }

    #[staticmethod]
    fn from_rpy(roll: f64, pitch: f64, yaw: f64, translation: [f64; 3]) -> Self {
        Pose(tg::geometry::Pose::from_rpy(roll, pitch, yaw, Vector3::from(translation)))
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        (*self.0.translation()).into()
    }

    /// `[w, x, y, z]`.
    #[getter]
    fn quaternion(&self) -> [f64; 4] {
        self.0.quaternion()
    }

    fn rpy(&self) -> [f64; 3] {
        self.0.rpy()
    }

    fn matrix(&self) -> [[f64; 4]; 4] {
        self.0.to_homogeneous()
    }

    fn inverse(&self) -> Pose {
        Pose(self.0.inverse())
    }

    fn __matmul__(&self, other: &Pose) -> Pose {
        Pose(self.0.compose(&other.0))
    }

    fn apply(&self, point: [f64; 3]) -> [f64; 3] {
        self.0.transform_point(&Vector3::from(point)).into()
    }

    fn translation_distance(&self, other: &Pose) -> f64 {
        self.0.translation_distance(&other.0)
    }

    /// Angle of the relative rotation (rad).
    fn geodesic_distance(&self, other: &Pose) -> f64 {
        geodesic_error(&self.0, &other.0)
    }

    fn __repr__(&self) -> String {
        let t = self.0.translation();
        let q = self.0.quaternion();
        format!("Pose(translation=[{:.6}, {:.6}, {:.6}], quaternion=[{:.6}, {:.6}, {:.6}, {:.6}])", t.x, t.y, t.z, q[0], q[1], q[2], q[3])
    }
}

#[pyclass(module = "thorgrasp", get_all, skip_from_py_object)]
pub struct RegistrationResult {
    transform: Pose,
    fitness: f64,
    rmse: f64,
    iterations: usize,
    converged: bool,
}

/// Aligns `source` onto `target` (lists of `[x, y, z]`) from `initial`.
#[pyfunction]
#[pyo3(signature = (source, target, initial = None, max_iterations = 50, correspondence_max_dist = 0.1))]
fn register(
    source: Vec<[f64; 3]>,
    target: Vec<[f64; 3]>,
    initial: Option<Pose>,
    max_iterations: usize,
    correspondence_max_dist: f64,
) -> PyResult<RegistrationResult> {
    let cloud = |pts: Vec<[f64; 3]>| PointCloud::new(pts.into_iter().map(Vector3::from).collect()).map_err(value_err);
    let config = RegistrationConfig {
        max_iterations,
        correspondence_max_dist,
        ..RegistrationConfig::default()
    };
    let guess = initial.map(|p| p.0).unwrap_or_else(tg::geometry::Pose::identity);
    let r = gicp(&cloud(source)?, &cloud(target)?, &guess, &config).map_err(value_err)?;
    Ok(RegistrationResult {
        transform: Pose(r.transform),
        fitness: r.fitness,
        rmse: r.rmse,
        iterations: r.iterations,
        converged: r.converged,
    })
}

#[pyclass(module = "thorgrasp", from_py_object)]
#[derive(Clone)]
pub struct Scenario(tg::sim::Scenario);

#[pymethods]
impl Scenario {
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        tg::sim::Scenario::load(&path).map(Scenario).map_err(value_err)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        tg::sim::Scenario::from_toml(text).map(Scenario).map_err(value_err)
    }

    /// One cuboid with randomized pose and size in the reachable workspace.
    #[staticmethod]
    fn random_grasp(seed: u64) -> Self {
        Scenario(tg::sim::Scenario::random_grasp(seed))
    }

    /// `random_grasp` plus two lateral teleports during the approach.
    #[staticmethod]
    fn perturbed_grasp(seed: u64) -> Self {
        Scenario(tg::sim::Scenario::perturbed_grasp(seed))
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    #[getter]
    fn duration(&self) -> u64 {
        self.0.duration
    }

    #[setter]
    fn set_duration(&mut self, ticks: u64) {
        self.0.duration = ticks;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    /// Sets the scenario, render-noise and observer seeds together.
    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.0.seed = seed;
        self.0.render.noise_seed = seed;
        self.0.observer.seed = seed;
    }
}

#[pyclass(module = "thorgrasp", get_all, skip_from_py_object)]
pub struct Metrics {
    ticks: u64,
    frames: u64,
    lost_frames: u64,
    t_errors: Vec<f64>,
    r_errors: Vec<f64>,
    backsteps: u64,
    recoveries: u64,
    grasped: bool,
    success: bool,
    final_phase: Option<&'static str>,
    unsafe_configs: u64,
    min_distance: f64,
    max_occlusion: f64,
    step_ms: Vec<f64>,
    tracking_csv: String,
    planner_csv: String,
}

impl From<tg::sim::Metrics> for Metrics {
    fn from(m: tg::sim::Metrics) -> Self {
        Metrics {
            ticks: m.ticks,
            frames: m.frames,
            lost_frames: m.lost_frames,
            backsteps: m.backsteps,
            recoveries: m.recoveries,
            grasped: m.grasped,
            success: m.success,
            final_phase: m.final_phase.map(|p| p.name()),
            unsafe_configs: m.unsafe_configs,
            min_distance: m.min_distance,
            max_occlusion: m.max_occlusion,
            t_errors: m.t_errors,
            r_errors: m.r_errors,
            step_ms: m.step_ms,
            tracking_csv: m.tracking_csv,
            planner_csv: m.planner_csv,
        }
    }
}

#[pymethods]
impl Metrics {
    fn max_t_err(&self) -> f64 {
        self.t_errors.iter().cloned().fold(0.0, f64::max)
    }

    fn max_r_err(&self) -> f64 {
        self.r_errors.iter().cloned().fold(0.0, f64::max)
    }

    fn __repr__(&self) -> String {
        format!(
            "Metrics(ticks={}, frames={}, lost_frames={}, backsteps={}, success={})",
            self.ticks, self.frames, self.lost_frames, self.backsteps, self.success
        )
    }
}

/// Runs a scenario to completion in simulated time.
#[pyfunction]
fn run_scenario(py: Python<'_>, scenario: &Scenario) -> PyResult<Metrics> {
    let s = scenario.0.clone();
    py.detach(move || tg::sim::run_scenario(&s)).map(Metrics::from).map_err(runtime_err)
}

/// Step-by-step access to the simulation loop.
#[pyclass(module = "thorgrasp", unsendable)]
pub struct Simulation(Option<tg::sim::Simulation>);

impl Simulation {
    fn inner(&mut self) -> PyResult<&mut tg::sim::Simulation> {
        self.0.as_mut().ok_or_else(|| runtime_err("simulation already consumed by finish()"))
    }
}

#[pymethods]
impl Simulation {
    #[new]
    fn new(scenario: &Scenario) -> PyResult<Self> {
        tg::sim::Simulation::new(scenario.0.clone()).map(|s| Simulation(Some(s))).map_err(runtime_err)
    }

    /// Advances up to `ticks` ticks; a paused or finished simulation stays put.
    #[pyo3(signature = (ticks = 1))]
    fn step(&mut self, ticks: u64) -> PyResult<()> {
        let sim = self.inner()?;
        for _ in 0..ticks {
            if sim.finished() || sim.is_paused() {
                break;
            }
            sim.step().map_err(runtime_err)?;
        }
        Ok(())
    }

    #[getter]
    fn tick(&mut self) -> PyResult<u64> {
        Ok(self.inner()?.tick())
    }

    #[getter]
    fn finished(&mut self) -> PyResult<bool> {
        Ok(self.inner()?.finished())
    }

    /// Snapshot message as a JSON line.
    fn snapshot(&mut self) -> PyResult<String> {
        let sim = self.inner()?;
        Ok(Message::Snapshot {
            proto_version: PROTO_VERSION,
            tick: sim.tick(),
            snapshot: Box::new(sim.snapshot()),
        }
        .to_line())
    }

    /// Applies a command given as JSON, either a bare command
    /// (`{"kind": "move_object", ...}`) or a full command message.
    fn command(&mut self, json: &str) -> PyResult<()> {
        let (command, client_tick) = match Message::parse(json) {
            Ok(Message::Command { command, client_tick, .. }) => (command, client_tick),
            Ok(_) => return Err(value_err("expected a command message")),
            Err(_) => (serde_json::from_str::<Command>(json).map_err(value_err)?, None),
        };
        command.check().map_err(value_err)?;
        self.inner()?.apply_command(&command, client_tick).map_err(value_err)
    }

    /// Runs to completion and returns the metrics.
    fn finish(&mut self, py: Python<'_>) -> PyResult<Metrics> {
        let sim = self.0.take().ok_or_else(|| runtime_err("simulation already consumed by finish()"))?;
        py.detach(move || sim.run()).map(Metrics::from).map_err(runtime_err)
    }
}

#[pymodule(name = "thorgrasp")]
pub fn thorgrasp_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PROTO_VERSION", PROTO_VERSION)?;
    m.add_class::<Pose>()?;
    m.add_class::<RegistrationResult>()?;
    m.add_class::<Scenario>()?;
    m.add_class::<Metrics>()?;
    m.add_class::<Simulation>()?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
