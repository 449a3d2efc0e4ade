use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::KinematicsError;
use crate::geometry::Pose;

const DEFAULT_CONFIG: &str = include_str!("../../config/panda.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapsuleKind {
    Arm,
    Hand,
    Finger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub xyz: [f64; 3],
    pub rpy: [f64; 3],
    pub axis: [f64; 3],
    pub limits: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedTransform {
    pub xyz: [f64; 3],
    pub rpy: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapsuleSpec {
    pub frame: usize,
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
    pub kind: CapsuleKind,
}

/// On-disk robot description (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    pub name: String,
    pub home: Vec<f64>,
    pub aperture: f64,
    pub joints: Vec<JointSpec>,
    #[serde(default)]
    pub tool: Vec<FixedTransform>,
    #[serde(default)]
    pub capsules: Vec<CapsuleSpec>,
}

#[derive(Clone, Debug)]
struct Joint {
    origin: Pose,
    axis: Vector3<f64>,
    lower: f64,
    upper: f64,
}

#[derive(Clone, Debug)]
pub struct RobotModel {
    name: String,
    joints: Vec<Joint>,
    tool: Pose,
    capsules: Vec<CapsuleSpec>,
    home: DVector<f64>,
    aperture: f64,
}

/// Forward kinematics result. `frames[0]` is the base, `frames[i]` the frame
/// after joint `i`, and the last entry the end-effector.
#[derive(Clone, Debug)]
pub struct Fk {
    pub frames: Vec<Pose>,
    /// World-frame rotation axis of each joint.
    pub axes: Vec<Vector3<f64>>,
    /// World-frame position of each joint.
    pub origins: Vec<Vector3<f64>>,
}

impl Fk {
    pub fn end_effector(&self) -> &Pose {
        self.frames.last().expect("fk has frames")
    }

    pub fn n_joints(&self) -> usize {
        self.axes.len()
    }

    /// 3×n Jacobian of a world point rigidly attached to `frame`.
    pub fn point_jacobian(&self, frame: usize, p: &Vector3<f64>) -> DMatrix<f64> {
        let n = self.n_joints();
        let mut j = DMatrix::zeros(3, n);
        for k in 0..frame.min(n) {
            let col = self.axes[k].cross(&(p - self.origins[k]));
            j.fixed_view_mut::<3, 1>(0, k).copy_from(&col);
        }
        j
    }

    /// 3×n Jacobian of a world direction rigidly attached to `frame`.
    pub fn direction_jacobian(&self, frame: usize, v: &Vector3<f64>) -> DMatrix<f64> {
        let n = self.n_joints();
        let mut j = DMatrix::zeros(3, n);
        for k in 0..frame.min(n) {
            let col = self.axes[k].cross(v);
            j.fixed_view_mut::<3, 1>(0, k).copy_from(&col);
        }
        j
    }
}

fn fixed(xyz: &[f64; 3], rpy: &[f64; 3]) -> Pose {
    Pose::from_rpy(rpy[0], rpy[1], rpy[2], Vector3::from(*xyz))
}

impl RobotModel {
    pub fn from_config(config: &RobotConfig) -> Result<Self, KinematicsError> {
        let n = config.joints.len();
        if n == 0 {
            return Err(KinematicsError::InvalidConfig("no joints".into()));
        }
        if config.home.len() != n {
            return Err(KinematicsError::InvalidConfig(format!("home has {} entries for {n} joints", config.home.len())));
        }
        if !(config.aperture > 0.0) {
            return Err(KinematicsError::InvalidConfig("aperture must be positive".into()));
        }
        let mut joints = Vec::with_capacity(n);
        for (i, j) in config.joints.iter().enumerate() {
            let axis = Vector3::from(j.axis);
            if !(j.limits[0] < j.limits[1]) {
                return Err(KinematicsError::InvalidConfig(format!("joint {i}: lower limit must be below upper")));
            }
            if !(axis.norm() > 1e-9) {
                return Err(KinematicsError::InvalidConfig(format!("joint {i}: zero axis")));
            }
            joints.push(Joint {
                origin: fixed(&j.xyz, &j.rpy),
                axis: axis.normalize(),
                lower: j.limits[0],
                upper: j.limits[1],
            });
        }
        for (i, c) in config.capsules.iter().enumerate() {
            if !(c.radius > 0.0) || c.frame > n + 1 {
                return Err(KinematicsError::InvalidConfig(format!("capsule {i}: bad radius or frame")));
            }
        }
        let tool = config.tool.iter().fold(Pose::identity(), |acc, t| acc.compose(&fixed(&t.xyz, &t.rpy)));
        Ok(Self {
            name: config.name.clone(),
            joints,
            tool,
            capsules: config.capsules.clone(),
            home: DVector::from_vec(config.home.clone()),
            aperture: config.aperture,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, KinematicsError> {
        let config: RobotConfig = toml::from_str(text).map_err(|e| KinematicsError::InvalidConfig(e.to_string()))?;
        Self::from_config(&config)
    }

    /// The built-in Panda-like arm.
    pub fn panda() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("bundled robot config is valid")
    }

    pub fn default_config_toml() -> &'static str {
        DEFAULT_CONFIG
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    /// Frame index of the end-effector.
    pub fn ee_frame(&self) -> usize {
        self.joints.len() + 1
    }

    pub fn capsules(&self) -> &[CapsuleSpec] {
        &self.capsules
    }

    pub fn home(&self) -> &DVector<f64> {
        &self.home
    }

    pub fn aperture(&self) -> f64 {
        self.aperture
    }

    pub fn limits(&self) -> Vec<(f64, f64)> {
        self.joints.iter().map(|j| (j.lower, j.upper)).collect()
    }

    pub fn within_limits(&self, q: &DVector<f64>) -> bool {
        q.len() == self.n_joints() && self.joints.iter().zip(q.iter()).all(|(j, &v)| v >= j.lower && v <= j.upper)
    }

    pub fn check_dim(&self, q: &DVector<f64>) -> Result<(), KinematicsError> {
        if q.len() != self.n_joints() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.n_joints(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Panics if `q` has the wrong length; use [`check_dim`](Self::check_dim) first on untrusted input.
    pub fn fk(&self, q: &DVector<f64>) -> Fk {
        assert_eq!(q.len(), self.n_joints(), "joint vector length");
        let n = self.n_joints();
        let mut frames = Vec::with_capacity(n + 2);
        let mut axes = Vec::with_capacity(n);
        let mut origins = Vec::with_capacity(n);
        let mut current = Pose::identity();
        frames.push(current);
        for (joint, &angle) in self.joints.iter().zip(q.iter()) {
            let mount = current.compose(&joint.origin);
            axes.push(mount.rotation() * joint.axis);
            origins.push(*mount.translation());
            current = mount.compose(&Pose::from_axis_angle(&joint.axis, angle, Vector3::zeros()));
            frames.push(current);
        }
        frames.push(current.compose(&self.tool));
        Fk { frames, axes, origins }
    }

    /// 6×n geometric Jacobian of the end-effector (linear rows first).
    pub fn ee_jacobian(&self, fk: &Fk) -> DMatrix<f64> {
        let n = self.n_joints();
        let p = fk.end_effector().translation();
        let mut j = DMatrix::zeros(6, n);
        for k in 0..n {
            let lin = fk.axes[k].cross(&(p - fk.origins[k]));
            j.fixed_view_mut::<3, 1>(0, k).copy_from(&lin);
            j.fixed_view_mut::<3, 1>(3, k).copy_from(&fk.axes[k]);
        }
        j
    }

    /// World-frame endpoints of capsule `i`.
    pub fn capsule_world(&self, fk: &Fk, i: usize) -> (Vector3<f64>, Vector3<f64>) {
        let c = &self.capsules[i];
        let f = &fk.frames[c.frame];
        (f.transform_point(&Vector3::from(c.a)), f.transform_point(&Vector3::from(c.b)))
    }
}
