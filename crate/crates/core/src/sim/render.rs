use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraModel, DepthImage, GrayImage, Image, Pose, Rect};
use crate::kinematics::SceneState;

pub const LABEL_NONE: i16 = -3;
pub const LABEL_ROBOT: i16 = -2;
pub const LABEL_TABLE: i16 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    /// Direction toward the light (world).
    pub light: [f64; 3],
    pub table_albedo: f64,
    pub robot_albedo: f64,
    /// Standard deviation of additive depth noise (meters).
    pub depth_noise: f64,
    pub noise_seed: u64,
    /// Checker cell size for textured objects (meters).
    pub checker: f64,
    pub render_robot: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            light: [0.4, -0.3, 1.0],
            table_albedo: 0.35,
            robot_albedo: 0.85,
            depth_noise: 0.001,
            noise_seed: 0,
            checker: 0.015,
            render_robot: true,
        }
    }
}

/// Pixel-aligned intensity, depth and per-pixel labels (object index,
/// [`LABEL_TABLE`], [`LABEL_ROBOT`] or [`LABEL_NONE`]).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    pub tick: u64,
    pub intensity: GrayImage,
    pub depth: DepthImage,
    pub labels: Image<i16>,
    pub ground_truth: Vec<Pose>,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Box { index: usize },
    Capsule { a: Vector3<f64>, b: Vector3<f64>, r: f64 },
}

struct Primitive {
    shape: Shape,
    rect: Rect,
}

/// Ray–capsule intersection; `dir` need not be unit. Returns `(t, normal)`.
pub fn ray_capsule(origin: &Vector3<f64>, dir: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, r: f64) -> Option<(f64, Vector3<f64>)> {
    let ba = b - a;
    let oa = origin - a;
    let baba = ba.dot(&ba);
    let bard = ba.dot(dir);
    let baoa = ba.dot(&oa);
    let rdoa = dir.dot(&oa);
    let rdrd = dir.dot(dir);
    let oaoa = oa.dot(&oa);
    let qa = baba * rdrd - bard * bard;
    let qb = baba * rdoa - baoa * bard;
    let qc = baba * oaoa - baoa * baoa - r * r * baba;
    let mut best: Option<f64> = None;
    if qa.abs() > 1e-18 {
        let h = qb * qb - qa * qc;
        if h >= 0.0 {
            let t = (-qb - h.sqrt()) / qa;
            let y = baoa + t * bard;
            if t > 0.0 && y > 0.0 && y < baba {
                best = Some(t);
            }
        }
    }
    for c in [a, b] {
        let oc = origin - c;
        let bq = oc.dot(dir);
        let cq = oc.dot(&oc) - r * r;
        let h = bq * bq - rdrd * cq;
        if h >= 0.0 {
            let t = (-bq - h.sqrt()) / rdrd;
            if t > 0.0 && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
    }
    best.map(|t| {
        let p = origin + dir * t;
        let s = ((p - a).dot(&ba) / baba).clamp(0.0, 1.0);
        (t, (p - (a + ba * s)).normalize())
    })
}

fn sphere_rect(camera: &CameraModel, center: &Vector3<f64>, radius: f64) -> Rect {
    let c = camera.world_to_camera(center);
    let full = Rect::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::INFINITY);
    if c.z - radius <= 1e-3 {
        return if c.z + radius <= 0.0 { Rect::new(1.0, 1.0, 0.0, 0.0) } else { full };
    }
    let (u, v, _) = camera.project(center);
    // Conservative screen extent of the sphere.
    let s = radius / (c.z - radius) * (1.0 + (c.x * c.x + c.y * c.y).sqrt() / (c.z - radius));
    Rect::new(u - camera.fx() * s - 1.0, v - camera.fy() * s - 1.0, u + camera.fx() * s + 1.0, v + camera.fy() * s + 1.0)
}

/// Raycasts table, cuboids and (optionally) robot capsules.
pub fn render(scene: &SceneState, camera: &CameraModel, options: &RenderOptions, tick: u64) -> FrameBundle {
    let (w, h) = (camera.width(), camera.height());
    let light = Vector3::from(options.light).normalize();
    let mut prims = Vec::new();
    for (i, o) in scene.objects.iter().enumerate() {
        prims.push(Primitive {
            shape: Shape::Box { index: i },
            rect: sphere_rect(camera, &o.cuboid.center(), o.cuboid.half_extents().norm()),
        });
    }
    if options.render_robot {
        let fk = scene.robot.fk(scene.q());
        for (ci, spec) in scene.robot.capsules().iter().enumerate() {
            let (a, b) = scene.robot.capsule_world(&fk, ci);
            prims.push(Primitive {
                shape: Shape::Capsule { a, b, r: spec.radius },
                rect: sphere_rect(camera, &((a + b) / 2.0), (b - a).norm() / 2.0 + spec.radius),
            });
        }
    }

    let origin = camera.center();
    let mut depth = DepthImage::filled(w, h, 0.0);
    let mut intensity = GrayImage::filled(w, h, 0.0);
    let mut labels = Image::filled(w, h, LABEL_NONE);
    let mut active = Vec::with_capacity(prims.len());
    for v in 0..h {
        for u in 0..w {
            let (uf, vf) = (u as f64, v as f64);
            let dir = camera.ray_direction(uf, vf);
            let mut best_t = f64::INFINITY;
            let mut hit: Option<(Vector3<f64>, f64, i16)> = None;
            if dir.z < 0.0 {
                let t = -origin.z / dir.z;
                if t > 0.0 {
                    best_t = t;
                    hit = Some((Vector3::z(), options.table_albedo, LABEL_TABLE));
                }
            }
            active.clear();
            active.extend(prims.iter().filter(|p| p.rect.contains(uf, vf)));
            for p in &active {
                match p.shape {
                    Shape::Box { index } => {
                        let obj = &scene.objects[index];
                        if let Some((t, n)) = obj.cuboid.ray_intersect(&origin, &dir) {
                            if t > 0.0 && t < best_t {
                                best_t = t;
                                let mut albedo = obj.albedo;
                                if obj.textured {
                                    let l = obj.cuboid.to_local(&(origin + dir * t));
                                    let k = (l / options.checker).map(|x| x.floor() as i64);
                                    if (k.x + k.y + k.z).rem_euclid(2) == 1 {
                                        albedo *= 0.55;
                                    }
                                }
                                hit = Some((n, albedo, index as i16));
                            }
                        }
                    }
                    Shape::Capsule { a, b, r } => {
                        if let Some((t, n)) = ray_capsule(&origin, &dir, &a, &b, r) {
                            if t < best_t {
                                best_t = t;
                                hit = Some((n, options.robot_albedo, LABEL_ROBOT));
                            }
                        }
                    }
                }
            }
            if let Some((n, albedo, label)) = hit {
                depth.set(u, v, best_t as f32);
                intensity.set(u, v, (albedo * n.dot(&light).max(0.0)) as f32);
                labels.set(u, v, label);
            }
        }
    }
    if options.depth_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(options.noise_seed ^ tick.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let normal = Normal::new(0.0, options.depth_noise).expect("finite noise");
        for d in depth.data_mut() {
            if *d > 0.0 {
                *d = (*d as f64 + normal.sample(&mut rng)).max(1e-4) as f32;
            }
        }
    }
    FrameBundle {
        tick,
        intensity,
        depth,
        labels,
        ground_truth: scene.objects.iter().map(|o| o.cuboid.pose).collect(),
    }
}
