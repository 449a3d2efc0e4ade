//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any gating criterion fails. C9 is informative.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thorgrasp::geometry::{geodesic_error, CameraModel, Cuboid, GrayImage, PointCloud, Pose};
use thorgrasp::kinematics::{RobotModel, SceneObject, SceneState, TaskMapOptions, TaskMaps, TaskTerm};
use thorgrasp::registration::{register, RegistrationConfig};
use thorgrasp::sim::{run_scenario, Metrics, Scenario};
use thorgrasp::thor::{gamma_of, gram_of, Feature, Template, TemplateModule, LTM_SIZE};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn scenario(name: &str) -> Scenario {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", name].iter().collect();
    Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn side_camera() -> CameraModel {
    CameraModel::look_at(Vector3::new(1.3, -0.6, 0.5), Vector3::new(0.5, 0.0, 0.05), Vector3::z(), 500.0, 640, 480).unwrap()
}

/// Area-weighted uniform samples over all six faces of a box centered at the origin.
fn cuboid_surface(half: &Vector3<f64>, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut axis = 0;
            while pick > areas[axis] && axis < 2 {
                pick -= areas[axis];
                axis += 1;
            }
            let mut p = Vector3::new(rng.random_range(-half.x..half.x), rng.random_range(-half.y..half.y), rng.random_range(-half.z..half.z));
            p[axis] = if rng.random_bool(0.5) { half[axis] } else { -half[axis] };
            p
        })
        .collect()
}

fn c1_registration() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let trials = 200;
    let mut ok = 0;
    for _ in 0..trials {
        let half = Vector3::new(rng.random_range(0.02..0.05), rng.random_range(0.02..0.05), rng.random_range(0.02..0.05));
        let pose = Pose::from_rpy(0.0, 0.0, rng.random_range(-3.0..3.0), Vector3::new(rng.random_range(0.4..0.6), rng.random_range(-0.1..0.1), half.z));
        let model = PointCloud::new(cuboid_surface(&half, 1500, &mut rng)).unwrap().transformed(&pose);

        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let angle = rng.random_range(0.0..20f64.to_radians());
        let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = t.normalize() * rng.random_range(0.0..0.05);
        // Perturbation about the object center.
        let c = pose.translation();
        let truth = Pose::from_translation(c + t) * Pose::from_axis_angle(&axis, angle, Vector3::zeros()) * Pose::from_translation(-c);

        // Self-occlusion: the 30% of points farthest from a random viewpoint are missing.
        let view = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.2..1.0)).normalize();
        let mut idx: Vec<usize> = (0..model.len()).collect();
        idx.sort_by(|&a, &b| {
            let da = (model.points()[a] - c).dot(&view);
            let db = (model.points()[b] - c).dot(&view);
            db.total_cmp(&da)
        });
        let keep = &idx[..(model.len() as f64 * 0.7).round() as usize];
        let observed = PointCloud::new(keep.iter().map(|&i| truth.transform_point(&model.points()[i])).collect()).unwrap();

        // The partial observation is aligned onto the full model; the result undoes the perturbation.
        let res = register(&observed, &model, &Pose::identity(), &RegistrationConfig::default()).unwrap();
        let recovered = res.transform.inverse();
        if recovered.translation_distance(&truth) <= 1e-3 && geodesic_error(&recovered, &truth) <= 1e-3 {
            ok += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let rate = ok as f64 / trials as f64;
    outcome(rate >= 0.98 && secs < 60.0, format!("{ok}/{trials} recovered ({:.1}%), {secs:.1} s", rate * 100.0))
}

fn c2_occlusion() -> Outcome {
    let start = Instant::now();
    let m = run_scenario(&scenario("occlusion.toml")).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = m.lost_frames == 0 && m.max_t_err() <= 0.02 && m.max_r_err() <= 0.1 && m.max_occlusion >= 0.4 && secs < 120.0;
    outcome(
        pass,
        format!(
            "{} frames, peak occlusion {:.0}%, lost {}, max t {:.4} m, max r {:.4} rad, {secs:.1} s",
            m.frames,
            m.max_occlusion * 100.0,
            m.lost_frames,
            m.max_t_err(),
            m.max_r_err()
        ),
    )
}

fn c3_manipulation() -> Outcome {
    let m = run_scenario(&scenario("manipulation.toml")).unwrap();
    let n = m.r_errors.len();
    let within = m.r_errors.iter().filter(|r| **r <= 0.1).count();
    let frac = within as f64 / n.max(1) as f64;
    let pass = n > 0 && m.grasped && frac >= 0.95 && m.max_r_err() <= 0.3;
    outcome(pass, format!("{n} frames, {:.1}% within 0.1 rad, max r {:.4} rad, grasped {}", frac * 100.0, m.max_r_err(), m.grasped))
}

/// Returns the static run so C9 can reuse its timings.
fn c4_drift() -> (Outcome, Metrics) {
    let m = run_scenario(&scenario("static.toml")).unwrap();
    let n = m.t_errors.len();
    let early_t = m.t_errors[..10].iter().cloned().fold(0.0, f64::max);
    let early_r = m.r_errors[..10].iter().cloned().fold(0.0, f64::max);
    let (final_t, final_r) = (m.t_errors[n - 1], m.r_errors[n - 1]);
    let pass = n >= 1000 && m.lost_frames == 0 && final_t <= 2.0 * early_t && final_r <= 2.0 * early_r;
    let detail = format!("{n} frames, final t {final_t:.5} m vs first-10 max {early_t:.5} m, final r {final_r:.5} rad vs {early_r:.5} rad");
    (outcome(pass, detail), m)
}

fn c5_grasp() -> Outcome {
    let runs = 50;
    let mut success = 0;
    let mut unsafe_configs = 0;
    for seed in 0..runs {
        let m = run_scenario(&Scenario::random_grasp(seed)).unwrap();
        success += m.success as u64;
        unsafe_configs += m.unsafe_configs;
    }
    let pass = success * 10 >= runs * 9 && unsafe_configs == 0;
    outcome(pass, format!("{success}/{runs} succeeded, {unsafe_configs} unsafe configurations"))
}

fn c6_reactivity() -> Outcome {
    let runs = 25;
    let mut good = 0;
    let mut success = 0;
    for seed in 0..runs {
        let m = run_scenario(&Scenario::perturbed_grasp(seed)).unwrap();
        success += m.success as u64;
        if m.success && m.backsteps > 0 {
            good += 1;
        }
    }
    outcome(good * 5 >= runs * 4, format!("{good}/{runs} succeeded with a backstep ({success} succeeded overall)"))
}

fn template(feature: Feature, frame: u64) -> Template {
    Template { patch: GrayImage::filled(2, 2, 0.0), feature, source_frame: frame }
}

fn raw_dot(a: &Feature, b: &Feature) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
}

fn oracle_volume(features: &[&Feature]) -> f64 {
    let n = features.len();
    let g = DMatrix::from_fn(n, n, |i, j| raw_dot(features[i], features[j]));
    g.lu().determinant().max(0.0).sqrt()
}

fn oracle_gamma(features: &[&Feature]) -> f64 {
    let n = features.len();
    let mut g_max = f64::MIN;
    let mut off = 0.0;
    for i in 0..n {
        for j in 0..n {
            let s = raw_dot(features[i], features[j]);
            g_max = g_max.max(s);
            if j > i {
                off += s;
            }
        }
    }
    1.0 - 2.0 * off / (n as f64 * (n as f64 + 1.0) * g_max)
}

fn c7_thor() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dim = 12;
    let mut checks = 0;
    let mut failures = Vec::new();
    let mut sets = 0;
    while sets < 1000 {
        let base: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gt = Feature::from_values(base.clone());
        let lower = rng.random_range(0.5..0.95);
        let mut module = TemplateModule::new(template(gt.clone(), 0), lower, 1).unwrap();
        for frame in 1..=12u64 {
            let noise = rng.random_range(0.1..1.5);
            let f = Feature::from_values(base.iter().map(|b| b + noise * rng.random_range(-1.0..1.0)).collect());
            if rng.random_bool(0.5) {
                module.update_stm(template(f.clone(), frame), frame);
            }
            // γ against an independent evaluation from raw features.
            let stm: Vec<&Feature> = module.stm().map(|t| &t.feature).collect();
            let gamma = module.gamma().unwrap();
            if (gamma - oracle_gamma(&stm)).abs() > 1e-12 || (gamma_of(&gram_of(&stm)).unwrap() - gamma).abs() > 1e-12 {
                failures.push(format!("gamma mismatch set {sets}"));
            }

            // Exhaustive slot-replacement oracle.
            let ltm: Vec<Feature> = module.ltm().iter().map(|t| t.feature.clone()).collect();
            let refs: Vec<&Feature> = ltm.iter().collect();
            let before = oracle_volume(&refs);
            let gate = raw_dot(&f, &ltm[0]) > lower * raw_dot(&ltm[0], &ltm[0]) - oracle_gamma(&stm);
            let mut best: Option<(usize, f64)> = None;
            for slot in 1..LTM_SIZE {
                let mut trial = refs.clone();
                trial[slot] = &f;
                let v = oracle_volume(&trial);
                if best.is_none_or(|b| v > b.1 + 1e-12) {
                    best = Some((slot, v));
                }
            }
            let (slot, vol) = best.unwrap();
            let expect_admit = gate && vol > before + 1e-12;
            let near_tie = (vol - before).abs() <= 1e-12;
            let got = module.try_admit_ltm(&template(f.clone(), frame));
            sets += 1;
            checks += 1;
            if !near_tie && (got.admitted != expect_admit || (expect_admit && got.slot != Some(slot))) {
                failures.push(format!("admission mismatch set {sets}: got {:?}, oracle slot {slot} gate {gate}", got.slot));
            }
            if got.volume_after + 1e-12 < got.volume_before || module.ltm_volume() + 1e-12 < before {
                failures.push(format!("LTM volume decreased in set {sets}"));
            }
            if module.ground_truth().feature != gt || module.ground_truth().source_frame != 0 {
                failures.push(format!("ground-truth slot changed in set {sets}"));
            }
        }
    }
    outcome(failures.is_empty(), format!("{checks} admissions checked, {} mismatches{}", failures.len(), failures.first().map(|f| format!(" ({f})")).unwrap_or_default()))
}

fn c8_jacobians() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let robot = RobotModel::panda();
    let camera = side_camera();
    let h = 1e-6;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut per_term = [0usize; 6];
    for _ in 0..100 {
        let target = Cuboid::new(
            Pose::from_rpy(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-3.0..3.0),
                Vector3::new(rng.random_range(0.3..0.7), rng.random_range(-0.3..0.3), rng.random_range(0.02..0.3)),
            ),
            Vector3::new(rng.random_range(0.02..0.06), rng.random_range(0.02..0.06), rng.random_range(0.02..0.06)),
        )
        .unwrap();
        let obstacle = Cuboid::new(Pose::from_translation(Vector3::new(0.45, 0.25, 0.1)), Vector3::new(0.05, 0.05, 0.1)).unwrap();
        let scene = SceneState::new(
            robot.clone(),
            vec![SceneObject { cuboid: target, albedo: 0.6, textured: false }, SceneObject { cuboid: obstacle, albedo: 0.4, textured: false }],
            camera,
        );
        let basis: Matrix3<f64> = *Pose::from_rpy(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), Vector3::zeros()).rotation();
        let q = DVector::from_iterator(7, robot.limits().into_iter().map(|(lo, hi)| rng.random_range(lo - 0.1..hi + 0.1)));
        // A wide activation margin so most collision rows are live.
        let opts = TaskMapOptions { margin: 0.3, ..TaskMapOptions::default() };
        let maps = TaskMaps::evaluate(&scene, &q, &target, Some(0), &basis, &opts);
        for k in 0..7 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[k] += h;
            qm[k] -= h;
            let mp = TaskMaps::evaluate(&scene, &qp, &target, Some(0), &basis, &opts);
            let mm = TaskMaps::evaluate(&scene, &qm, &target, Some(0), &basis, &opts);
            for (ti, term) in TaskTerm::ALL.into_iter().enumerate() {
                let (a, p, m) = (maps.get(term), mp.get(term), mm.get(term));
                for r in 0..a.value.len() {
                    let (f0, fp, fm) = (a.value[r], p.value[r], m.value[r]);
                    // Rows whose hinge or nearest box feature switches inside the stencil are not differentiable there.
                    if ((fp - f0) - (f0 - fm)).abs() > 1e-9 || (f0 == 0.0) != (fp == 0.0) || (f0 == 0.0) != (fm == 0.0) {
                        continue;
                    }
                    let fd = (fp - fm) / (2.0 * h);
                    worst = worst.max((fd - a.jacobian[(r, k)]).abs());
                    checked += 1;
                    per_term[ti] += 1;
                }
            }
        }
    }
    let pass = worst <= 1e-5 && per_term.iter().all(|&n| n > 0);
    let names: Vec<String> = TaskTerm::ALL.iter().zip(per_term).map(|(t, n)| format!("{}={n}", t.name())).collect();
    outcome(pass, format!("{checked} entries over 100 configurations ({}), worst |fd - J| {worst:.2e}", names.join(" ")))
}

fn c9_timing(m: &Metrics) -> Outcome {
    let mean = m.step_ms.iter().sum::<f64>() / m.step_ms.len().max(1) as f64;
    outcome(mean <= 50.0, format!("mean tracking step {mean:.1} ms over {} frames at 640x480", m.step_ms.len()))
}

fn main() {
    // `cargo test` passes harness flags; a name filter selects criteria.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |id: &str| filter.as_ref().is_none_or(|f| id.contains(f.as_str()));

    let mut failed = Vec::new();
    let mut report = |id: &str, name: &str, gating: bool, o: Outcome| {
        let verdict = match (o.pass, gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "INFO",
        };
        println!("{id} {name}: {verdict} ({})", o.detail);
        if gating && !o.pass {
            failed.push(id.to_string());
        }
    };

    if wanted("C1") {
        report("C1", "registration recovery", true, c1_registration());
    }
    if wanted("C2") {
        report("C2", "occlusion tracking", true, c2_occlusion());
    }
    if wanted("C3") {
        report("C3", "manipulation tracking", true, c3_manipulation());
    }
    let mut timing = None;
    if wanted("C4") || wanted("C9") {
        let (drift, m) = c4_drift();
        if wanted("C4") {
            report("C4", "drift bound", true, drift);
        }
        timing = Some(c9_timing(&m));
    }
    if wanted("C5") {
        report("C5", "grasp success", true, c5_grasp());
    }
    if wanted("C6") {
        report("C6", "reactivity", true, c6_reactivity());
    }
    if wanted("C7") {
        report("C7", "template memory algebra", true, c7_thor());
    }
    if wanted("C8") {
        report("C8", "analytic gradients", true, c8_jacobians());
    }

    if let (true, Some(o)) = (wanted("C9"), timing) {
        report("C9", "real-time budget (informative)", false, o);
    }

    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
