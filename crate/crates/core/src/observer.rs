//! Grasp observer: a pool of IK-based grasp candidates, each pulled toward
//! the target while a random approach basis keeps the pool diverse; aged,
//! re-solved and ranked every tick.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Cuboid;
use crate::kinematics::{SceneState, TaskMapOptions, TaskMaps};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObserverError {
    #[error("invalid observer config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Weights {
    pub pos: f64,
    pub align: f64,
    pub coll: f64,
    pub limit: f64,
    pub home: f64,
    pub rand: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            pos: 1000.0,
            align: 100000.0,
            coll: 100.0,
            limit: 100.0,
            home: 0.1,
            rand: 3.0,
        }
    }
}

impl Weights {
    pub fn scaled(&self, s: f64) -> Weights {
        Weights {
            pos: self.pos * s,
            align: self.align * s,
            coll: self.coll * s,
            limit: self.limit * s,
            home: self.home * s,
            rand: self.rand * s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObserverConfig {
    pub n_candidates: usize,
    pub weights: Weights,
    /// `W = w_reg · I`.
    pub w_reg: f64,
    pub alpha: f64,
    pub margin: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Re-randomize the basis of candidates stuck outside the target for more than `2α` ticks.
    pub rerandomize: bool,
    pub ignore_finger_target: bool,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self {
            n_candidates: 16,
            weights: Weights::default(),
            w_reg: 1e-3,
            alpha: 20.0,
            margin: 0.03,
            iterations: 3,
            seed: 0,
            rerandomize: true,
            ignore_finger_target: true,
        }
    }
}

impl ObserverConfig {
    pub fn validate(&self) -> Result<(), ObserverError> {
        let w = &self.weights;
        if [w.pos, w.align, w.coll, w.limit, w.home, w.rand].iter().any(|v| !(*v >= 0.0)) {
            return Err(ObserverError::InvalidConfig("weights must be non-negative".into()));
        }
        if !(self.w_reg > 0.0) || !(self.alpha > 0.0) || !(self.margin > 0.0) {
            return Err(ObserverError::InvalidConfig("w_reg, alpha and margin must be positive".into()));
        }
        if self.n_candidates == 0 {
            return Err(ObserverError::InvalidConfig("need at least one candidate".into()));
        }
        Ok(())
    }

    fn map_options(&self) -> TaskMapOptions {
        TaskMapOptions {
            margin: self.margin,
            ignore_finger_target: self.ignore_finger_target,
            ..TaskMapOptions::default()
        }
    }
}

/// `(f_inc, f_dec)` sigmoid age weights.
pub fn age_weights(age: f64, alpha: f64) -> (f64, f64) {
    let f_inc = 1.0 / (1.0 + (alpha / 2.0 - age).exp());
    (f_inc, 1.0 - f_inc)
}

/// Per-term squared norms `‖φ_i‖²`. `rand` depends on the candidate's own
/// basis and is kept apart from the shared comparison vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostVector {
    pub pos: f64,
    pub align: f64,
    pub coll: f64,
    pub limit: f64,
    pub home: f64,
    pub rand: f64,
}

impl CostVector {
    fn from_maps(maps: &TaskMaps) -> Self {
        Self {
            pos: maps.pos.norm_squared(),
            align: maps.align.norm_squared(),
            coll: maps.coll.norm_squared(),
            limit: maps.limit.norm_squared(),
            home: maps.home.norm_squared(),
            rand: maps.rand.norm_squared(),
        }
    }

    /// The age-independent part shared by all candidates at initialization.
    pub fn shared(&self) -> [f64; 5] {
        [self.pos, self.align, self.coll, self.limit, self.home]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraspCandidate {
    pub q: DVector<f64>,
    pub cost: CostVector,
    pub age: u64,
    pub basis: Matrix3<f64>,
    pub converged: bool,
    /// Consecutive ticks spent outside the target.
    pub outside_ticks: u64,
    generation: u64,
}

/// Random orthonormal basis with det +1 from the QR factorization of a
/// Gaussian matrix.
pub fn random_basis(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let g = Matrix3::from_fn(|_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for k in 0..3 {
        if r[(k, k)] < 0.0 {
            let col = -q.column(k);
            q.set_column(k, &col);
        }
    }
    if q.determinant() < 0.0 {
        let col = -q.column(2);
        q.set_column(2, &col);
    }
    q
}

fn candidate_rng(seed: u64, index: usize, generation: u64) -> ChaCha8Rng {
    let mix = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(generation.wrapping_mul(0x94D0_49BB_1331_11EB));
    ChaCha8Rng::seed_from_u64(mix)
}

/// Geometry of a candidate relative to the target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub inside: bool,
    /// Euclidean norm of the end-effector position in the cuboid frame with
    /// each axis divided by its half extent (0 at the center, 1 on a face).
    pub distance: f64,
    /// Metric distance to the center.
    pub distance_m: f64,
    /// Cuboid width across the jaw direction.
    pub grasp_width: f64,
    pub feasible: bool,
    pub home_cost: f64,
    pub min_distance: f64,
}

pub fn evaluate(candidate: &GraspCandidate, scene: &SceneState, target: &Cuboid, skip: Option<usize>) -> Evaluation {
    let fk = scene.robot.fk(&candidate.q);
    let ee = fk.end_effector();
    let local = target.to_local(ee.translation());
    let h = target.half_extents();
    let inside = (0..3).all(|k| local[k].abs() <= h[k]);
    let distance = local.component_div(h).norm();
    let jaw = ee.axis(1);
    let grasp_width: f64 = (0..3).map(|k| 2.0 * h[k] * target.pose.axis(k).dot(&jaw).abs()).sum();
    let pairs = scene.pairwise_distances_fk(&fk, target, skip);
    let min_distance = pairs.iter().map(|p| p.distance).fold(f64::INFINITY, f64::min);
    let feasible = grasp_width <= scene.robot.aperture() && min_distance >= 0.0 && scene.robot.within_limits(&candidate.q);
    Evaluation {
        inside,
        distance,
        distance_m: local.norm(),
        grasp_width,
        feasible,
        home_cost: (&candidate.q - scene.robot.home()).norm_squared(),
        min_distance,
    }
}

struct Objective<'a> {
    scene: &'a SceneState,
    target: &'a Cuboid,
    skip: Option<usize>,
    basis: Matrix3<f64>,
    config: &'a ObserverConfig,
    f_inc: f64,
    f_dec: f64,
}

impl Objective<'_> {
    fn scales(&self) -> [f64; 6] {
        let w = &self.config.weights;
        [
            (w.pos * self.f_inc).sqrt(),
            (w.align * self.f_inc).sqrt(),
            (w.coll * self.f_inc).sqrt(),
            w.limit.sqrt(),
            w.home.sqrt(),
            (w.rand * self.f_dec).sqrt(),
        ]
    }

    fn residual(&self, q: &DVector<f64>, with_jacobian: bool) -> (DVector<f64>, Option<DMatrix<f64>>, TaskMaps) {
        let maps = TaskMaps::evaluate(self.scene, q, self.target, self.skip, &self.basis, &self.config.map_options());
        let n = q.len();
        let terms = [&maps.pos, &maps.align, &maps.coll, &maps.limit, &maps.home, &maps.rand];
        let rows = n + terms.iter().map(|t| t.value.len()).sum::<usize>();
        let sw = self.config.w_reg.sqrt();
        let mut r = DVector::zeros(rows);
        let mut j = if with_jacobian { Some(DMatrix::zeros(rows, n)) } else { None };
        r.rows_mut(0, n).copy_from(&(q * sw));
        if let Some(j) = j.as_mut() {
            j.view_mut((0, 0), (n, n)).fill_diagonal(sw);
        }
        let mut row = n;
        for (t, s) in terms.iter().zip(self.scales()) {
            let m = t.value.len();
            r.rows_mut(row, m).copy_from(&(&t.value * s));
            if let Some(j) = j.as_mut() {
                j.view_mut((row, 0), (m, n)).copy_from(&(&t.jacobian * s));
            }
            row += m;
        }
        (r, j, maps)
    }
}

/// Levenberg–Marquardt on the weighted least-squares objective. Returns the
/// objective value after every accepted step.
pub fn solve_candidate(
    candidate: &mut GraspCandidate,
    scene: &SceneState,
    target: &Cuboid,
    skip: Option<usize>,
    config: &ObserverConfig,
) -> Vec<f64> {
    let (f_inc, f_dec) = age_weights(candidate.age as f64, config.alpha);
    let obj = Objective {
        scene,
        target,
        skip,
        basis: candidate.basis,
        config,
        f_inc,
        f_dec,
    };
    let n = candidate.q.len();
    let mut accepted = Vec::new();
    let (mut r, mut j, _) = obj.residual(&candidate.q, true);
    let mut f = r.norm_squared();
    let mut mu = 1e-3;
    candidate.converged = false;
    for _ in 0..config.iterations {
        let jac = j.as_ref().expect("jacobian requested");
        let jtj = jac.transpose() * jac;
        let g = jac.transpose() * &r;
        if g.norm() < 1e-10 {
            candidate.converged = true;
            break;
        }
        let mut stepped = false;
        for _ in 0..10 {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += mu * (1.0 + jtj[(k, k)]);
            }
            let Some(chol) = a.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let delta = -chol.solve(&g);
            let q_new = &candidate.q + &delta;
            let (r_new, _, _) = obj.residual(&q_new, false);
            let f_new = r_new.norm_squared();
            if f_new <= f {
                let improvement = f - f_new;
                candidate.q = q_new;
                mu = (mu / 3.0).max(1e-9);
                let (r2, j2, _) = obj.residual(&candidate.q, true);
                r = r2;
                j = j2;
                f = f_new;
                accepted.push(f);
                stepped = true;
                if improvement <= 1e-12 * (1.0 + f) && delta.norm() < 1e-9 {
                    candidate.converged = true;
                }
                break;
            }
            mu *= 4.0;
        }
        if !stepped {
            candidate.converged = true;
            break;
        }
    }
    accepted
}

/// Ranked view of the pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    /// Candidate indices, best first.
    pub order: Vec<usize>,
    pub evaluations: Vec<Evaluation>,
    /// No candidate is both inside the target and feasible.
    pub no_feasible_grasp: bool,
}

impl Ranking {
    pub fn best(&self) -> Option<usize> {
        if self.no_feasible_grasp {
            None
        } else {
            self.order.first().copied()
        }
    }
}

fn group(e: &Evaluation) -> u8 {
    match (e.inside, e.feasible) {
        (true, true) => 0,
        (true, false) => 1,
        _ => 2,
    }
}

/// Total order used by [`rank`]: inside and feasible first, then inside,
/// then outside; within a group by distance to the center, then home cost,
/// then index.
pub fn compare(a: (usize, &Evaluation), b: (usize, &Evaluation)) -> std::cmp::Ordering {
    group(a.1)
        .cmp(&group(b.1))
        .then(a.1.distance.total_cmp(&b.1.distance))
        .then(a.1.home_cost.total_cmp(&b.1.home_cost))
        .then(a.0.cmp(&b.0))
}

pub fn rank(candidates: &[GraspCandidate], scene: &SceneState, target: &Cuboid, skip: Option<usize>) -> Ranking {
    let evaluations: Vec<Evaluation> = candidates.iter().map(|c| evaluate(c, scene, target, skip)).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| compare((a, &evaluations[a]), (b, &evaluations[b])));
    let no_feasible_grasp = !evaluations.iter().any(|e| e.inside && e.feasible);
    Ranking {
        order,
        evaluations,
        no_feasible_grasp,
    }
}

/// The candidate pool.
#[derive(Clone, Debug)]
pub struct GraspObserver {
    pub config: ObserverConfig,
    pub candidates: Vec<GraspCandidate>,
    pub ticks: u64,
    last_ranking: Option<Ranking>,
}

impl GraspObserver {
    /// All candidates start at `warm_start` with age 0.
    pub fn new(config: ObserverConfig, scene: &SceneState, target: &Cuboid, skip: Option<usize>, warm_start: &DVector<f64>) -> Result<Self, ObserverError> {
        config.validate()?;
        let mut candidates = Vec::with_capacity(config.n_candidates);
        for i in 0..config.n_candidates {
            let basis = random_basis(&mut candidate_rng(config.seed, i, 0));
            let mut c = GraspCandidate {
                q: warm_start.clone(),
                cost: CostVector::default(),
                age: 0,
                basis,
                converged: false,
                outside_ticks: 0,
                generation: 0,
            };
            c.cost = CostVector::from_maps(&TaskMaps::evaluate(scene, &c.q, target, skip, &c.basis, &config.map_options()));
            candidates.push(c);
        }
        Ok(Self {
            config,
            candidates,
            ticks: 0,
            last_ranking: None,
        })
    }

    pub fn ranking(&self) -> Option<&Ranking> {
        self.last_ranking.as_ref()
    }

    /// Ages every candidate, advances it by the configured solver
    /// iterations against the live scene, re-evaluates costs and re-ranks.
    pub fn tick(&mut self, scene: &SceneState, target: &Cuboid, skip: Option<usize>) -> &Ranking {
        self.ticks += 1;
        let opts = self.config.map_options();
        for (i, c) in self.candidates.iter_mut().enumerate() {
            c.age += 1;
            solve_candidate(c, scene, target, skip, &self.config);
            c.cost = CostVector::from_maps(&TaskMaps::evaluate(scene, &c.q, target, skip, &c.basis, &opts));
            let e = evaluate(c, scene, target, skip);
            c.outside_ticks = if e.inside { 0 } else { c.outside_ticks + 1 };
            if self.config.rerandomize && c.outside_ticks as f64 > 2.0 * self.config.alpha {
                c.generation += 1;
                c.basis = random_basis(&mut candidate_rng(self.config.seed, i, c.generation));
                c.age = 0;
                c.outside_ticks = 0;
            }
        }
        self.last_ranking = Some(rank(&self.candidates, scene, target, skip));
        self.last_ranking.as_ref().expect("just set")
    }

    /// CSV rows for the current pool.
    pub fn write_csv_rows<W: Write>(&self, out: &mut W, tick: u64) -> io::Result<()> {
        for (i, c) in self.candidates.iter().enumerate() {
            let e = self.last_ranking.as_ref().map(|r| r.evaluations[i]);
            writeln!(
                out,
                "{tick},{i},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{:.6}",
                c.age,
                c.cost.pos,
                c.cost.align,
                c.cost.coll,
                c.cost.limit,
                c.cost.home,
                c.cost.rand,
                e.map(|e| e.inside as u8).unwrap_or(0),
                e.map(|e| e.distance).unwrap_or(f64::NAN),
            )?;
        }
        Ok(())
    }

    pub const CSV_HEADER: &'static str = "tick,candidate,age,c_pos,c_align,c_coll,c_limit,c_home,c_rand,inside,distance";
}
