use nalgebra::{Matrix3, Vector3};

use super::{GeometryError, Pose};

/// Pinhole camera. The camera frame has +z along the optical axis, +x to
/// the right of the image and +y down; pixel `(u, v)` is (column, row).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    extrinsics: Pose,
    width: usize,
    height: usize,
}

impl CameraModel {
    pub fn new(
        intrinsics: Matrix3<f64>,
        extrinsics: Pose,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = &intrinsics;
        let lower_zero = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
        if !lower_zero || k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 || (k[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(GeometryError::InvalidIntrinsics);
        }
        Ok(Self {
            intrinsics,
            extrinsics,
            width,
            height,
        })
    }

    pub fn from_focal(f: f64, cx: f64, cy: f64, extrinsics: Pose, width: usize, height: usize) -> Result<Self, GeometryError> {
        Self::new(Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0), extrinsics, width, height)
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll (image up).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        f: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::x());
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rot = Matrix3::from_columns(&[x, y, z]);
        let extrinsics = Pose::new(rot, eye)?;
        Self::from_focal(f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, extrinsics, width, height)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    /// Camera-to-world transform.
    pub fn extrinsics(&self) -> &Pose {
        &self.extrinsics
    }

    pub fn with_extrinsics(mut self, extrinsics: Pose) -> Self {
        self.extrinsics = extrinsics;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    fn skew(&self) -> f64 {
        self.intrinsics[(0, 1)]
    }

    /// Camera-frame point for pixel `(u, v)` at depth `d` (z in camera frame).
    pub fn unproject_camera(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let y = (v - self.cy()) / self.fy();
        let x = (u - self.cx() - self.skew() * y) / self.fx();
        Vector3::new(x * depth, y * depth, depth)
    }

    /// World-frame point for pixel `(u, v)` at depth `d`: inverse intrinsics,
    /// then the camera-to-world extrinsics.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.extrinsics.transform_point(&self.unproject_camera(u, v, depth))
    }

    /// Unit-depth ray direction (camera z = 1) for a pixel, in world frame.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        self.extrinsics.transform_vector(&self.unproject_camera(u, v, 1.0))
    }

    pub fn center(&self) -> Vector3<f64> {
        *self.extrinsics.translation()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.extrinsics.inverse().transform_point(p)
    }

    /// Projects a world point to `(u, v, depth)`. Depth may be ≤ 0 for
    /// points behind the camera; callers decide how to treat those.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let c = self.world_to_camera(p);
        let x = c.x / c.z;
        let y = c.y / c.z;
        let u = self.fx() * x + self.skew() * y + self.cx();
        let v = self.fy() * y + self.cy();
        (u, v, c.z)
    }
}
