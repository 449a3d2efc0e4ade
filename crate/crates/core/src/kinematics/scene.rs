use nalgebra::{DVector, RowDVector, Vector3};

use super::distance::{capsule_box_distance, capsule_table_distance, Capsule};
use super::robot::{CapsuleKind, Fk, RobotModel};
use super::KinematicsError;
use crate::geometry::{CameraModel, Cuboid, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Obstacle {
    Target,
    Object(usize),
    Table,
}

/// One entry of `d(q)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairDistance {
    pub capsule: usize,
    pub kind: CapsuleKind,
    pub obstacle: Obstacle,
    pub distance: f64,
    /// Closest point on the capsule axis (world).
    pub point: Vector3<f64>,
    pub gradient: Vector3<f64>,
}

impl PairDistance {
    /// Row Jacobian `∂d/∂q`.
    pub fn jacobian(&self, robot: &RobotModel, fk: &Fk) -> RowDVector<f64> {
        let frame = robot.capsules()[self.capsule].frame;
        (self.gradient.transpose() * fk.point_jacobian(frame, &self.point)).into_owned()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub cuboid: Cuboid,
    pub albedo: f64,
    pub textured: bool,
}

/// Robot, objects and cameras. The table is the plane `z = 0`.
#[derive(Clone, Debug)]
pub struct SceneState {
    pub robot: RobotModel,
    q: DVector<f64>,
    pub objects: Vec<SceneObject>,
    attached: Option<(usize, Pose)>,
    pub camera: CameraModel,
    pub topdown: Option<CameraModel>,
}

impl SceneState {
    pub fn new(robot: RobotModel, objects: Vec<SceneObject>, camera: CameraModel) -> Self {
        let q = robot.home().clone();
        Self {
            robot,
            q,
            objects,
            attached: None,
            camera,
            topdown: None,
        }
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn within_limits(&self) -> bool {
        self.robot.within_limits(&self.q)
    }

    /// Sets the configuration without clamping and moves any attached object.
    pub fn set_q(&mut self, q: DVector<f64>) -> Result<(), KinematicsError> {
        self.robot.check_dim(&q)?;
        self.q = q;
        self.update_attached();
        Ok(())
    }

    fn update_attached(&mut self) {
        if let Some((idx, offset)) = self.attached {
            let ee = *self.robot.fk(&self.q).end_effector();
            let obj = &mut self.objects[idx];
            obj.cuboid.pose = ee.compose(&offset).renormalized();
        }
    }

    pub fn attached(&self) -> Option<(usize, Pose)> {
        self.attached
    }

    /// Latches `grasp_offset = ee⁻¹ · object` for object `index`.
    pub fn attach(&mut self, index: usize) -> Result<Pose, KinematicsError> {
        let obj = self.objects.get(index).ok_or(KinematicsError::NoSuchObject(index))?;
        let ee = *self.robot.fk(&self.q).end_effector();
        let offset = ee.inverse().compose(&obj.cuboid.pose);
        self.attached = Some((index, offset));
        Ok(offset)
    }

    pub fn detach(&mut self) {
        self.attached = None;
    }

    pub fn set_object_pose(&mut self, index: usize, pose: Pose) -> Result<(), KinematicsError> {
        let obj = self.objects.get_mut(index).ok_or(KinematicsError::NoSuchObject(index))?;
        obj.cuboid.pose = pose;
        if matches!(self.attached, Some((i, _)) if i == index) {
            self.attached = None;
        }
        Ok(())
    }

    /// Robot capsules at the current configuration.
    pub fn robot_capsules(&self) -> Vec<Capsule> {
        let fk = self.robot.fk(&self.q);
        (0..self.robot.capsules().len())
            .map(|i| {
                let (a, b) = self.robot.capsule_world(&fk, i);
                Capsule { a, b, radius: self.robot.capsules()[i].radius }
            })
            .collect()
    }

    pub fn ee_pose(&self) -> Pose {
        *self.robot.fk(&self.q).end_effector()
    }

    /// `d(q)`: every capsule against `target`, the other scene objects and the
    /// table. `skip` names the scene object that `target` stands for (not
    /// counted twice); an attached object is never an obstacle.
    pub fn pairwise_distances(&self, q: &DVector<f64>, target: &Cuboid, skip: Option<usize>) -> Vec<PairDistance> {
        let fk = self.robot.fk(q);
        self.pairwise_distances_fk(&fk, target, skip)
    }

    pub fn pairwise_distances_fk(&self, fk: &Fk, target: &Cuboid, skip: Option<usize>) -> Vec<PairDistance> {
        let attached = self.attached.map(|(i, _)| i);
        let mut obstacles: Vec<(Obstacle, Option<&Cuboid>)> = vec![(Obstacle::Target, Some(target))];
        for (i, o) in self.objects.iter().enumerate() {
            if Some(i) != skip && Some(i) != attached {
                obstacles.push((Obstacle::Object(i), Some(&o.cuboid)));
            }
        }
        obstacles.push((Obstacle::Table, None));
        let mut out = Vec::with_capacity(self.robot.capsules().len() * obstacles.len());
        for (ci, spec) in self.robot.capsules().iter().enumerate() {
            let (a, b) = self.robot.capsule_world(fk, ci);
            let cap = Capsule { a, b, radius: spec.radius };
            for &(obstacle, cuboid) in &obstacles {
                let sd = match cuboid {
                    Some(c) => capsule_box_distance(&cap, c),
                    None => capsule_table_distance(&cap),
                };
                out.push(PairDistance {
                    capsule: ci,
                    kind: spec.kind,
                    obstacle,
                    distance: sd.distance,
                    point: a + (b - a) * sd.t,
                    gradient: sd.gradient,
                });
            }
        }
        out
    }
}
