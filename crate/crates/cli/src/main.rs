use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use thorgrasp::sim::{Scenario, Simulation};
use thorgrasp_cli::{bench, plot, serve};

#[derive(Parser)]
#[command(name = "thorgrasp", version, about = "Reactive grasping in simulation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario in simulated time. Exits 0 on success.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario seed (object albedo, depth noise, observer).
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for tracking.csv, planner.csv and outcome.toml.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print only the final summary.
        #[arg(long)]
        headless: bool,
    },
    /// Run a scenario in real time and stream it over WebSocket.
    Serve {
        scenario: PathBuf,
        #[arg(long, default_value_t = 8765)]
        port: u16,
    },
    /// Plot a tracking or planner CSV as SVG.
    Plot {
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report per-frame tracking latency.
    Bench {
        /// Scenario to track (defaults to the built-in static scene).
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        frames: usize,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<Scenario> {
    let mut s = Scenario::load(path)?;
    if let Some(seed) = seed {
        s.seed = seed;
        s.render.noise_seed = seed;
        s.observer.seed = seed;
    }
    Ok(s)
}

fn run(scenario: Scenario, out: Option<PathBuf>, headless: bool) -> Result<bool> {
    let mut sim = Simulation::new(scenario)?;
    let mut last_phase = None;
    while !sim.finished() {
        sim.step()?;
        if !headless {
            let phase = sim.planner().map(|p| p.phase);
            if phase != last_phase || sim.tick() % 100 == 0 {
                let status = sim.tracker().map(|t| t.last_status().as_str()).unwrap_or("-");
                eprintln!("tick {:5}  phase {:9}  tracker {status}", sim.tick(), phase.map(|p| p.name()).unwrap_or("-"));
                last_phase = phase;
            }
        }
    }
    let m = sim.into_metrics();
    if let Some(dir) = &out {
        m.write(dir).with_context(|| format!("writing {}", dir.display()))?;
    }
    println!(
        "ticks {}  frames {}  lost {}  max_t {:.4} m  max_r {:.4} rad  backsteps {}  recoveries {}  unsafe {}  phase {}  success {}",
        m.ticks,
        m.frames,
        m.lost_frames,
        m.max_t_err(),
        m.max_r_err(),
        m.backsteps,
        m.recoveries,
        m.unsafe_configs,
        m.final_phase.map(|p| p.name()).unwrap_or("none"),
        m.success
    );
    Ok(m.success)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run { scenario, seed, out, headless } => load(&scenario, seed).and_then(|s| run(s, out, headless)),
        Cmd::Serve { scenario, port } => load(&scenario, None).and_then(|s| serve::serve(s, port)).map(|_| true),
        Cmd::Plot { csv, out } => plot::plot(&csv, &out).map(|_| true),
        Cmd::Bench { scenario, frames } => scenario
            .map(|p| load(&p, None))
            .transpose()
            .and_then(|s| bench::bench(s, frames))
            .map(|r| {
                println!("{r}");
                true
            }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
