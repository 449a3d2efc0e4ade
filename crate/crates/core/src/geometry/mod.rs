//! Rigid-body math, camera projection, pointcloud containers, voxel
//! filtering and pose error metrics.
//!
//! Pixel convention used throughout the crate: depth images are row-major,
//! pixel `(u, v)` is column `u`, row `v`, and pixel centers sit at integer
//! coordinates. Backprojection applies the inverse intrinsics first and the
//! camera-to-world extrinsics second.

mod camera;
mod cloud;
mod cuboid;
mod image;
mod pose;
mod voxel;

pub use camera::CameraModel;
pub use cloud::PointCloud;
pub use cuboid::{Cuboid, CuboidRecord};
pub use image::{DepthImage, GrayImage, Image, Mask, Rect};
pub use pose::{geodesic_error, skew, Pose, PoseRecord};
pub use voxel::{voxel_filter, voxel_key};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("rotation is not proper (orthonormality error {ortho_error:e}, det {det})")]
    InvalidRotation { ortho_error: f64, det: f64 },
    #[error("{points} points but {covariances} covariances")]
    CovarianceCount { points: usize, covariances: usize },
    #[error("intrinsics must be upper-triangular with positive focal lengths")]
    InvalidIntrinsics,
    #[error("cuboid half extents must be strictly positive")]
    InvalidExtents,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid depth {depth} at pixel ({u}, {v})")]
    InvalidDepth { u: usize, v: usize, depth: f32 },
    #[error("image size mismatch: {0}")]
    SizeMismatch(String),
    #[error("cuboid corner behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("ply: {0}")]
    Ply(String),
}

/// Lifts every masked depth pixel to a world-frame point.
pub fn backproject(depth: &DepthImage, mask: &Mask, camera: &CameraModel) -> Result<PointCloud, GeometryError> {
    if depth.width() != mask.width() || depth.height() != mask.height() {
        return Err(GeometryError::SizeMismatch(format!(
            "depth {}x{} vs mask {}x{}",
            depth.width(),
            depth.height(),
            mask.width(),
            mask.height()
        )));
    }
    let mut points = Vec::with_capacity(mask.count());
    for v in 0..depth.height() {
        for u in 0..depth.width() {
            if !*mask.get(u, v) {
                continue;
            }
            let d = *depth.get(u, v);
            if !d.is_finite() || d <= 0.0 {
                return Err(GeometryError::InvalidDepth { u, v, depth: d });
            }
            points.push(camera.unproject(u as f64, v as f64, d as f64));
        }
    }
    PointCloud::new(points)
}

/// Minimal image rectangle containing the 8 projected corners of `cuboid`,
/// clamped to the image. A cuboid entirely outside the frustum yields a
/// rectangle of zero area on the image border.
pub fn project_bbox(cuboid: &Cuboid, camera: &CameraModel) -> Result<Rect, GeometryError> {
    let mut rect = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in cuboid.corners() {
        let (u, v, z) = camera.project(&c);
        if z <= 0.0 {
            return Err(GeometryError::BehindCamera(z));
        }
        rect.min_u = rect.min_u.min(u);
        rect.min_v = rect.min_v.min(v);
        rect.max_u = rect.max_u.max(u);
        rect.max_v = rect.max_v.max(v);
    }
    Ok(rect.clamped(camera.width(), camera.height()))
}
