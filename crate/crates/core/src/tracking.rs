//! 6-DoF object tracking: top-down detection, template capture, per-frame
//! template matching, mask lifting and G-ICP pose updates.

use std::collections::VecDeque;
use std::io::{self, Write};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    backproject, geodesic_error, project_bbox, voxel_filter, CameraModel, Cuboid, DepthImage, GeometryError, GrayImage,
    Mask, PointCloud, Pose, Rect,
};
use crate::kinematics::Capsule;
use crate::registration::{register, RegistrationConfig, RegistrationError, RegistrationResult};
use crate::thor::{ClassicalExtractor, Segmenter, ThorConfig, ThorError, ThorTracker, TrackState};

pub const HISTORY_LEN: usize = 4096;
pub const CSV_HEADER: &str = "frame_index,t_err_m,r_err_rad,score,status";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("initialization failed: {0}")]
    InitializationFailed(String),
    #[error("image size mismatch: {0}")]
    SizeMismatch(String),
    #[error("in-hand frame needs the end-effector pose")]
    MissingKinematics,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Thor(#[from] ThorError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    /// Minimum height above the background surface (m).
    pub threshold: f64,
    pub min_area: usize,
    /// Extra clearance around robot capsules (m).
    pub robot_margin: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            threshold: 0.01,
            min_area: 30,
            robot_margin: 0.01,
        }
    }
}

/// One foreground cluster from the top-down view.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub cuboid: Cuboid,
    pub bbox: Rect,
    pub pixels: usize,
}

fn near_capsules(p: &Vector3<f64>, capsules: &[Capsule], margin: f64) -> bool {
    capsules.iter().any(|c| {
        let ab = c.b - c.a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 { ((p - c.a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        (p - (c.a + ab * t)).norm() < c.radius + margin
    })
}

/// Yaw of the minimum-area rectangle around `pts` and its half extents
/// and center in the world xy plane.
fn min_area_rect(pts: &[Vector2<f64>]) -> (f64, Vector2<f64>, Vector2<f64>) {
    let extent = |yaw: f64| {
        let (s, c) = yaw.sin_cos();
        let mut lo = Vector2::repeat(f64::INFINITY);
        let mut hi = Vector2::repeat(f64::NEG_INFINITY);
        for p in pts {
            let l = Vector2::new(c * p.x + s * p.y, -s * p.x + c * p.y);
            lo = lo.inf(&l);
            hi = hi.sup(&l);
        }
        (lo, hi)
    };
    let area = |yaw: f64| {
        let (lo, hi) = extent(yaw);
        let d = hi - lo;
        d.x * d.y
    };
    let step = 1f64.to_radians();
    let mut best = 0.0;
    let mut best_area = f64::INFINITY;
    for k in 0..90 {
        let yaw = k as f64 * step;
        let a = area(yaw);
        if a < best_area {
            best_area = a;
            best = yaw;
        }
    }
    let (mut lo, mut hi) = (best - step, best + step);
    for _ in 0..40 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if area(m1) <= area(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let yaw = (lo + hi) / 2.0;
    let (l, h) = extent(yaw);
    let (s, c) = yaw.sin_cos();
    let mid = (l + h) / 2.0;
    let center = Vector2::new(c * mid.x - s * mid.y, s * mid.x + c * mid.y);
    (yaw, (h - l) / 2.0, center)
}

/// Background subtraction in a top-down depth image. Each 4-connected
/// cluster becomes a cuboid standing on the table, yawed to the
/// minimum-area footprint. Pixels on `exclude` capsules are ignored.
pub fn detect_objects(
    depth: &DepthImage,
    background: &DepthImage,
    camera: &CameraModel,
    exclude: &[Capsule],
    config: &DetectConfig,
) -> Result<Vec<Detection>, TrackingError> {
    let (w, h) = (depth.width(), depth.height());
    if background.width() != w || background.height() != h || camera.width() != w || camera.height() != h {
        return Err(TrackingError::SizeMismatch(format!("depth {w}x{h}")));
    }
    let mut fg = vec![None; w * h];
    for v in 0..h {
        for u in 0..w {
            let d = *depth.get(u, v) as f64;
            let b = *background.get(u, v) as f64;
            if d <= 0.0 || !(b <= 0.0 || b - d > config.threshold) {
                continue;
            }
            let p = camera.unproject(u as f64, v as f64, d);
            if p.z > config.threshold && !near_capsules(&p, exclude, config.robot_margin) {
                fg[v * w + u] = Some(p);
            }
        }
    }

    let mut label = vec![usize::MAX; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for seed in 0..w * h {
        if fg[seed].is_none() || label[seed] != usize::MAX {
            continue;
        }
        let id = seed;
        label[seed] = id;
        stack.push(seed);
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (u, v) = (i % w, i / w);
            let mut visit = |j: usize| {
                if fg[j].is_some() && label[j] == usize::MAX {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if u > 0 {
                visit(i - 1);
            }
            if u + 1 < w {
                visit(i + 1);
            }
            if v > 0 {
                visit(i - w);
            }
            if v + 1 < h {
                visit(i + w);
            }
        }
        if members.len() < config.min_area {
            continue;
        }
        let mut xy = Vec::with_capacity(members.len());
        let mut top: f64 = 0.0;
        let mut bbox = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut footprint = 0.0;
        for &i in &members {
            let p = fg[i].expect("foreground");
            xy.push(p.xy());
            top = top.max(p.z);
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            bbox = Rect::new(bbox.min_u.min(u), bbox.min_v.min(v), bbox.max_u.max(u + 1.0), bbox.max_v.max(v + 1.0));
            footprint += *depth.get(i % w, i / w) as f64 / camera.fx();
        }
        let (yaw, half, center) = min_area_rect(&xy);
        // Pixel centers sample the footprint; pad by half a pixel.
        let pad = 0.5 * footprint / members.len() as f64;
        let half = Vector3::new(half.x + pad, half.y + pad, top / 2.0);
        let pose = Pose::from_rpy(0.0, 0.0, yaw, Vector3::new(center.x, center.y, top / 2.0));
        out.push(Detection {
            cuboid: Cuboid::new(pose, half)?,
            bbox,
            pixels: members.len(),
        });
    }
    Ok(out)
}

/// Object mask from depth: pixels inside the matched box whose 3D point
/// lies near the predicted object, above the table and off the robot.
pub struct DepthSegmenter<'a> {
    pub depth: &'a DepthImage,
    pub camera: &'a CameraModel,
    pub center: Vector3<f64>,
    pub radius: f64,
    pub table_z: f64,
    pub exclude: &'a [Capsule],
    pub robot_margin: f64,
    /// Growth factor of the matched box.
    pub expand: f64,
}

impl Segmenter for DepthSegmenter<'_> {
    fn segment(&self, bbox: &Rect, width: usize, height: usize) -> Mask {
        let mut mask = Mask::filled(width, height, false);
        let (us, vs) = bbox.scaled(self.expand).pixel_range(width, height);
        let r2 = self.radius * self.radius;
        for v in vs {
            for u in us.clone() {
                let d = *self.depth.get(u, v) as f64;
                if !(d > 0.0) {
                    continue;
                }
                let p = self.camera.unproject(u as f64, v as f64, d);
                if p.z > self.table_z
                    && (p - self.center).norm_squared() <= r2
                    && !near_capsules(&p, self.exclude, self.robot_margin)
                {
                    mask.set(u, v, true);
                }
            }
        }
        mask
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub thor: ThorConfig,
    pub voxel_leaf: f64,
    /// Added to the half-diagonal for the depth gate (m).
    pub gate_margin: f64,
    pub table_z: f64,
    pub robot_margin: f64,
    pub box_expand: f64,
    /// In-hand results farther than this from the kinematic prior are rejected.
    pub in_hand_max_translation: f64,
    pub in_hand_max_rotation: f64,
    pub min_points: usize,
    pub max_iterations: usize,
    pub correspondence_max_dist: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            thor: ThorConfig::default(),
            voxel_leaf: 0.005,
            gate_margin: 0.04,
            table_z: 0.005,
            robot_margin: 0.005,
            box_expand: 1.1,
            in_hand_max_translation: 0.03,
            in_hand_max_rotation: 0.2,
            min_points: 10,
            max_iterations: 30,
            correspondence_max_dist: 0.05,
        }
    }
}

impl TrackerConfig {
    fn registration(&self) -> RegistrationConfig {
        RegistrationConfig {
            max_iterations: self.max_iterations,
            correspondence_max_dist: self.correspondence_max_dist,
            ..RegistrationConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Ok,
    Lost,
    NoOverlap,
    Rejected,
    Paused,
}

impl TrackStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrackStatus::Ok => "ok",
            TrackStatus::Lost => "lost",
            TrackStatus::NoOverlap => "no_overlap",
            TrackStatus::Rejected => "rejected",
            TrackStatus::Paused => "paused",
        }
    }

    pub fn is_lost(&self) -> bool {
        matches!(self, TrackStatus::Lost | TrackStatus::NoOverlap)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Free,
    /// `offset = ee⁻¹ · object`, latched at closure.
    InHand { offset: Pose },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryEntry {
    pub frame_index: u64,
    pub pose: Pose,
    pub t_err: Option<f64>,
    pub r_err: Option<f64>,
    pub score: f64,
    pub status: TrackStatus,
}

impl HistoryEntry {
    pub fn csv_row(&self) -> String {
        let f = |x: Option<f64>| x.map(|v| format!("{v:.6e}")).unwrap_or_default();
        format!("{},{},{},{:.6},{}", self.frame_index, f(self.t_err), f(self.r_err), self.score, self.status.as_str())
    }
}

/// One camera frame.
#[derive(Clone, Copy)]
pub struct Frame<'a> {
    pub intensity: &'a GrayImage,
    pub depth: &'a DepthImage,
    pub index: u64,
}

/// Per-frame side information.
#[derive(Clone, Copy, Default)]
pub struct StepContext<'a> {
    pub ee_pose: Option<Pose>,
    pub exclude: &'a [Capsule],
    /// True pose of the tracked object, for error bookkeeping.
    pub ground_truth: Option<Pose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub pose: Pose,
    pub status: TrackStatus,
    pub bbox: Rect,
    pub score: f64,
    pub observed_points: usize,
    pub fitness: f64,
}

pub struct TrackerState {
    template_cloud: PointCloud,
    template_filtered: PointCloud,
    half_extents: Vector3<f64>,
    current_pose: Pose,
    initial_pose: Pose,
    reference: Option<Pose>,
    thor: ThorTracker,
    bbox: Rect,
    mode: Mode,
    camera: CameraModel,
    config: TrackerConfig,
    history: VecDeque<HistoryEntry>,
    last_status: TrackStatus,
}

impl TrackerState {
    /// Captures the template cloud from the depth-segmented box and fills
    /// all ten template slots with the initial crop.
    pub fn initialize(
        frame: Frame<'_>,
        bbox: &Rect,
        initial: &Cuboid,
        camera: &CameraModel,
        exclude: &[Capsule],
        config: TrackerConfig,
    ) -> Result<Self, TrackingError> {
        let (w, h) = (camera.width(), camera.height());
        if frame.depth.width() != w || frame.intensity.width() != w || frame.depth.height() != h || frame.intensity.height() != h {
            return Err(TrackingError::SizeMismatch(format!("frame vs camera {w}x{h}")));
        }
        let pose = initial.pose;
        let segmenter = DepthSegmenter {
            depth: frame.depth,
            camera,
            center: initial.center(),
            radius: initial.half_extents().norm() + config.gate_margin,
            table_z: config.table_z,
            exclude,
            robot_margin: config.robot_margin,
            expand: config.box_expand,
        };
        let mask = segmenter.segment(bbox, w, h);
        if mask.count() < config.min_points {
            return Err(TrackingError::InitializationFailed(format!("mask has {} pixels", mask.count())));
        }
        let world = backproject(frame.depth, &mask, camera)?;
        let template_cloud = world.transformed(&pose.inverse());
        let template_filtered = voxel_filter(&template_cloud, config.voxel_leaf)?;
        let thor = ThorTracker::new(frame.intensity, bbox, Box::new(ClassicalExtractor), config.thor)?;
        let mut history = VecDeque::with_capacity(HISTORY_LEN);
        history.push_back(HistoryEntry {
            frame_index: frame.index,
            pose,
            t_err: None,
            r_err: None,
            score: 1.0,
            status: TrackStatus::Ok,
        });
        Ok(Self {
            template_cloud,
            template_filtered,
            half_extents: *initial.half_extents(),
            current_pose: pose,
            initial_pose: pose,
            reference: None,
            thor,
            bbox: *bbox,
            mode: Mode::Free,
            camera: *camera,
            config,
            history,
            last_status: TrackStatus::Ok,
        })
    }

    /// Ground-truth pose of the object at initialization; later errors are
    /// measured against `gt · reference⁻¹ · initial_pose`.
    pub fn set_reference(&mut self, ground_truth: Pose) {
        self.reference = Some(ground_truth);
        if let Some(e) = self.history.back_mut() {
            let (t, r) = Self::errors(&self.initial_pose, &ground_truth, &ground_truth, &e.pose);
            e.t_err = Some(t);
            e.r_err = Some(r);
        }
    }

    fn errors(initial: &Pose, reference: &Pose, gt: &Pose, pose: &Pose) -> (f64, f64) {
        let expected = gt.compose(&reference.inverse()).compose(initial);
        (expected.translation_distance(pose), geodesic_error(&expected, pose))
    }

    pub fn expected_pose(&self, ground_truth: &Pose) -> Option<Pose> {
        self.reference.map(|r| ground_truth.compose(&r.inverse()).compose(&self.initial_pose))
    }

    pub fn template_cloud(&self) -> &PointCloud {
        &self.template_cloud
    }

    pub fn template_module(&self) -> &crate::thor::TemplateModule {
        self.thor.module()
    }

    pub fn current_pose(&self) -> &Pose {
        &self.current_pose
    }

    pub fn cuboid(&self) -> Cuboid {
        Cuboid::new(self.current_pose, self.half_extents).expect("validated at init")
    }

    pub fn bbox(&self) -> &Rect {
        &self.bbox
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn last_status(&self) -> TrackStatus {
        self.last_status
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Switches to kinematic priors; the offset is latched from the current estimate.
    pub fn grasp(&mut self, ee_pose: &Pose) {
        self.mode = Mode::InHand {
            offset: ee_pose.inverse().compose(&self.current_pose),
        };
    }

    pub fn release(&mut self) {
        self.mode = Mode::Free;
    }

    /// Registers the template onto `observed` from `guess`.
    pub fn relocalize(&self, observed: &PointCloud, guess: &Pose) -> Option<RegistrationResult> {
        register(&self.template_filtered, observed, guess, &self.config.registration()).ok()
    }

    /// Replaces pose and search box after an external re-detection.
    pub fn reseed(&mut self, pose: Pose, bbox: Rect) {
        self.current_pose = pose;
        self.bbox = bbox;
    }

    pub fn history(&self) -> &VecDeque<HistoryEntry> {
        &self.history
    }

    fn prior(&self, ctx: &StepContext<'_>) -> Result<Pose, TrackingError> {
        match self.mode {
            Mode::Free => Ok(self.current_pose),
            Mode::InHand { offset } => {
                let ee = ctx.ee_pose.ok_or(TrackingError::MissingKinematics)?;
                Ok(ee.compose(&offset).renormalized())
            }
        }
    }

    fn prior_bbox(&self, prior: &Pose) -> Rect {
        let projected = Cuboid::new(*prior, self.half_extents).ok().and_then(|c| project_bbox(&c, &self.camera).ok());
        match (self.mode, projected) {
            (_, Some(p)) if p.is_empty() => self.bbox,
            (Mode::InHand { .. }, Some(p)) => p,
            (Mode::Free, Some(p)) => {
                let (cu, cv) = self.bbox.center();
                Rect::from_center(cu, cv, p.width(), p.height())
            }
            (_, None) => self.bbox,
        }
    }

    fn record(&mut self, index: u64, score: f64, status: TrackStatus, gt: Option<Pose>) {
        let (t_err, r_err) = match (self.reference, gt) {
            (Some(r), Some(g)) => {
                let (t, e) = Self::errors(&self.initial_pose, &r, &g, &self.current_pose);
                (Some(t), Some(e))
            }
            _ => (None, None),
        };
        if self.history.len() == HISTORY_LEN {
            self.history.pop_front();
        }
        self.history.push_back(HistoryEntry {
            frame_index: index,
            pose: self.current_pose,
            t_err,
            r_err,
            score,
            status,
        });
        self.last_status = status;
    }

    /// Holds the prior without touching the template memory.
    pub fn skip(&mut self, frame_index: u64, ctx: &StepContext<'_>) -> Result<StepResult, TrackingError> {
        let prior = self.prior(ctx)?;
        self.current_pose = prior;
        self.record(frame_index, 0.0, TrackStatus::Paused, ctx.ground_truth);
        Ok(StepResult {
            pose: prior,
            status: TrackStatus::Paused,
            bbox: self.bbox,
            score: 0.0,
            observed_points: 0,
            fitness: 0.0,
        })
    }

    /// Match, lift, filter, register. Lost frames hold the prior pose.
    pub fn step(&mut self, frame: Frame<'_>, ctx: &StepContext<'_>) -> Result<StepResult, TrackingError> {
        let prior = self.prior(ctx)?;
        let prior_box = self.prior_bbox(&prior);
        let center = prior.transform_point(&Vector3::zeros());
        let segmenter = DepthSegmenter {
            depth: frame.depth,
            camera: &self.camera,
            center,
            radius: self.half_extents.norm() + self.config.gate_margin,
            table_z: self.config.table_z,
            exclude: ctx.exclude,
            robot_margin: self.config.robot_margin,
            expand: self.config.box_expand,
        };
        let matched: TrackState = self.thor.track(frame.intensity, &prior_box, frame.index, &segmenter)?;

        let mut result = StepResult {
            pose: prior,
            status: TrackStatus::Lost,
            bbox: matched.bbox,
            score: matched.score,
            observed_points: 0,
            fitness: 0.0,
        };
        // In hand the kinematic box stands in for a lost match.
        let mask = match (matched.lost, self.mode) {
            (false, _) => Some(matched.mask),
            (true, Mode::InHand { .. }) => Some(segmenter.segment(&prior_box, frame.depth.width(), frame.depth.height())),
            (true, Mode::Free) => None,
        };
        if let Some(mask) = mask {
            self.bbox = if matched.lost { prior_box } else { matched.bbox };
            if mask.count() >= self.config.min_points {
                let obs = voxel_filter(&backproject(frame.depth, &mask, &self.camera)?, self.config.voxel_leaf)?;
                result.observed_points = obs.len();
                if obs.len() >= self.config.min_points {
                    match register(&self.template_filtered, &obs, &prior, &self.config.registration()) {
                        Ok(r) => {
                            result.fitness = r.fitness;
                            result.status = TrackStatus::Ok;
                            result.pose = r.transform;
                            if let Mode::InHand { .. } = self.mode {
                                if r.transform.translation_distance(&prior) > self.config.in_hand_max_translation
                                    || geodesic_error(&r.transform, &prior) > self.config.in_hand_max_rotation
                                {
                                    result.status = TrackStatus::Rejected;
                                    result.pose = prior;
                                }
                            }
                        }
                        Err(RegistrationError::NoOverlap(_)) => result.status = TrackStatus::NoOverlap,
                        Err(RegistrationError::InsufficientPoints { .. }) => result.status = TrackStatus::NoOverlap,
                        Err(e) => return Err(e.into()),
                    }
                } else {
                    result.status = TrackStatus::NoOverlap;
                }
            } else {
                result.status = TrackStatus::NoOverlap;
            }
        }
        self.current_pose = result.pose;
        self.record(frame.index, matched.score, result.status, ctx.ground_truth);
        Ok(result)
    }

    /// One CSV row per history entry.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for e in &self.history {
            writeln!(out, "{}", e.csv_row())?;
        }
        Ok(())
    }
}

/// Quarter-turn variant of a yaw-only detection closest to `reference`
/// whose footprint matches `half_extents` (x and y swap on odd turns).
pub fn align_yaw(detection: &Cuboid, reference: &Pose, half_extents: &Vector3<f64>) -> Pose {
    let d = detection.half_extents();
    let mut best = detection.pose;
    let mut best_score = f64::INFINITY;
    for k in 0..4 {
        let cand = detection.pose.compose(&Pose::from_rpy(0.0, 0.0, k as f64 * std::f64::consts::FRAC_PI_2, Vector3::zeros()));
        let (hx, hy) = if k % 2 == 0 { (d.x, d.y) } else { (d.y, d.x) };
        let mismatch = (hx - half_extents.x).abs() + (hy - half_extents.y).abs();
        let score = geodesic_error(&cand, reference) + 10.0 * mismatch;
        if score < best_score {
            best_score = score;
            best = cand;
        }
    }
    best
}
