//! Per-frame tracking latency on the static scene.

use anyhow::Result;
use thorgrasp::sim::{RunMode, Scenario, Simulation};

pub const STATIC_SCENARIO: &str = include_str!("../../../scenarios/static.toml");
/// Real-time budget per tracking step at 640x480.
pub const BUDGET_MS: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl BenchReport {
    pub fn within_budget(&self) -> bool {
        self.mean_ms <= BUDGET_MS
    }
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "tracking step latency over {} frames at {}x{}", self.frames, self.width, self.height)?;
        writeln!(f, "  mean   {:7.2} ms", self.mean_ms)?;
        writeln!(f, "  median {:7.2} ms", self.median_ms)?;
        writeln!(f, "  p95    {:7.2} ms", self.p95_ms)?;
        writeln!(f, "  max    {:7.2} ms", self.max_ms)?;
        write!(
            f,
            "  budget {BUDGET_MS:.0} ms: {}",
            if self.within_budget() { "met" } else { "exceeded" }
        )
    }
}

/// Tracks `frames` frames of `scenario` (the static scene when `None`).
pub fn bench(scenario: Option<Scenario>, frames: usize) -> Result<BenchReport> {
    let mut s = match scenario {
        Some(s) => s,
        None => Scenario::from_toml(STATIC_SCENARIO)?,
    };
    s.mode = RunMode::Track;
    s.duration = frames as u64 * s.frame_every;
    let (width, height) = (s.camera.width, s.camera.height);
    let metrics = Simulation::new(s)?.run()?;
    let mut ms = metrics.step_ms.clone();
    anyhow::ensure!(!ms.is_empty(), "no frames were tracked");
    ms.sort_by(f64::total_cmp);
    let at = |q: f64| ms[((ms.len() - 1) as f64 * q).round() as usize];
    Ok(BenchReport {
        frames: ms.len(),
        width,
        height,
        mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
        median_ms: at(0.5),
        p95_ms: at(0.95),
        max_ms: *ms.last().unwrap(),
    })
}
