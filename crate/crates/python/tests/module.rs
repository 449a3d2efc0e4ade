use std::ffi::CString;
use std::sync::Once;

use pyo3::prelude::*;
use pyo3::types::PyDict;

static INIT: Once = Once::new();

fn run(code: &str) {
    INIT.call_once(|| {
        pyo3::append_to_inittab!(thorgrasp_module);
        Python::initialize();
    });
    use thorgrasp_py::thorgrasp_module;
    let code = CString::new(code).unwrap();
    Python::attach(|py| {
        let globals = PyDict::new(py);
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed: {e}");
        }
    });
}

#[test]
fn pose_round_trips() {
    run(r#"
import math, thorgrasp as tg
p = tg.Pose.from_rpy(0.1, -0.2, 0.3, [1.0, 2.0, 3.0])
assert max(abs(a - b) for a, b in zip(p.rpy(), [0.1, -0.2, 0.3])) < 1e-12
q = p @ p.inverse()
assert q.translation_distance(tg.Pose()) < 1e-12
assert q.geodesic_distance(tg.Pose()) < 1e-9
x = p.apply([0.0, 0.0, 0.0])
assert x == p.translation
w, *v = p.quaternion
assert abs(w * w + sum(c * c for c in v) - 1.0) < 1e-12
m = p.matrix()
assert m[3] == [0.0, 0.0, 0.0, 1.0]
try:
    tg.Pose(quaternion=[0.0, 0.0, 0.0, 0.0])
    raise AssertionError("zero quaternion accepted")
except ValueError:
    pass
"#);
}

#[test]
fn register_recovers_a_small_offset() {
    run(r#"
import thorgrasp as tg
pts = []
n = 12
for i in range(n):
    for j in range(n):
        u, v = i / (n - 1) * 0.1, j / (n - 1) * 0.1
        pts += [[u, v, 0.0], [u, 0.0, v], [0.0, u, v]]
truth = tg.Pose.from_rpy(0.02, -0.01, 0.03, [0.004, -0.003, 0.002])
moved = [truth.apply(p) for p in pts]
r = tg.register(pts, moved, max_iterations=60, correspondence_max_dist=0.05)
assert r.transform.translation_distance(truth) < 1e-3, r.transform
assert r.transform.geodesic_distance(truth) < 1e-2
assert 0.9 <= r.fitness <= 1.0
try:
    tg.register([], moved)
    raise AssertionError("empty source accepted")
except ValueError:
    pass
"#);
}

#[test]
fn simulation_steps_and_accepts_commands() {
    run(r#"
import json, thorgrasp as tg
s = tg.Scenario.random_grasp(3)
assert tg.Scenario.from_toml(s.to_toml()).to_toml() == s.to_toml()
s.duration = 20
sim = tg.Simulation(s)
snap = json.loads(sim.snapshot())
assert snap["type"] == "snapshot" and snap["tick"] == 0
assert snap["proto_version"] == tg.PROTO_VERSION
sim.step(5)
assert sim.tick == 5
sim.command('{"kind": "pause"}')
sim.step(3)
assert sim.tick == 5
sim.command(json.dumps({"type": "command", "proto_version": tg.PROTO_VERSION, "tick": 5,
                        "command": {"kind": "resume"}}))
for bad in ['{"kind": "fly"}', 'not json', '{"kind": "move_object", "index": 0, "delta": [9, 0, 0]}']:
    try:
        sim.command(bad)
        raise AssertionError("accepted " + bad)
    except ValueError:
        pass
m = sim.finish()
assert m.ticks == 20
try:
    sim.step()
    raise AssertionError("stepping a finished simulation")
except RuntimeError:
    pass
"#);
}

#[test]
fn run_scenario_matches_manual_stepping() {
    run(r#"
import thorgrasp as tg
s = tg.Scenario.random_grasp(11)
s.duration = 30
a = tg.run_scenario(s)
b = tg.Simulation(s).finish()
assert a.tracking_csv == b.tracking_csv and a.planner_csv == b.planner_csv
assert a.ticks == 30 and len(a.t_errors) == a.frames
"#);
}
