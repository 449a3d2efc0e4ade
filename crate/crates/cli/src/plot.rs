//! Error-over-time SVG plots from the tracking or planner CSV.

use std::fmt::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

const WIDTH: f64 = 800.0;
const PANEL: f64 = 240.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const GAP: f64 = 50.0;

pub struct Series {
    pub title: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// x positions drawn as red ticks (lost frames, backsteps).
    pub marks: Vec<f64>,
}

/// Reads a tracking CSV (`frame_index,t_err_m,...`) or a planner CSV
/// (`tick,phase,...`) into plot panels.
pub fn read_series(path: &Path) -> Result<(String, Vec<Series>)> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let num = |s: &str| s.parse::<f64>().ok();
    if let (Some(fi), Some(ti), Some(ri), Some(si)) = (col("frame_index"), col("t_err_m"), col("r_err_rad"), col("status")) {
        let mut t = Series { title: "translation error (m)".into(), x: vec![], y: vec![], marks: vec![] };
        let mut r = Series { title: "rotation error (rad)".into(), x: vec![], y: vec![], marks: vec![] };
        for rec in rdr.records() {
            let rec = rec?;
            let Some(f) = num(&rec[fi]) else { continue };
            if let Some(v) = num(&rec[ti]) {
                t.x.push(f);
                t.y.push(v);
            }
            if let Some(v) = num(&rec[ri]) {
                r.x.push(f);
                r.y.push(v);
            }
            if matches!(&rec[si], "lost" | "no_overlap") {
                t.marks.push(f);
                r.marks.push(f);
            }
        }
        return Ok(("frame".into(), vec![t, r]));
    }
    if let (Some(ki), Some(pi), Some(bi), Some(di)) = (col("tick"), col("s"), col("backstep"), col("min_distance")) {
        let mut s = Series { title: "path parameter s".into(), x: vec![], y: vec![], marks: vec![] };
        let mut d = Series { title: "minimum distance (m)".into(), x: vec![], y: vec![], marks: vec![] };
        for rec in rdr.records() {
            let rec = rec?;
            let Some(k) = num(&rec[ki]) else { continue };
            if let Some(v) = num(&rec[pi]) {
                s.x.push(k);
                s.y.push(v);
            }
            if let Some(v) = num(&rec[di]).filter(|v| v.is_finite()) {
                d.x.push(k);
                d.y.push(v);
            }
            if matches!(&rec[bi], "true" | "1") {
                s.marks.push(k);
                d.marks.push(k);
            }
        }
        return Ok(("tick".into(), vec![s, d]));
    }
    bail!("{}: neither a tracking nor a planner CSV (columns: {:?})", path.display(), headers.iter().collect::<Vec<_>>())
}

fn nice_max(v: f64) -> f64 {
    if !(v > 0.0) {
        return 1.0;
    }
    let p = 10f64.powf(v.log10().floor());
    for m in [1.0, 2.0, 5.0, 10.0] {
        if v <= m * p {
            return m * p;
        }
    }
    10.0 * p
}

pub fn render_svg(x_label: &str, panels: &[Series]) -> String {
    let height = MARGIN_T + panels.len() as f64 * (PANEL + GAP);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let x_max = panels.iter().flat_map(|p| p.x.iter().chain(&p.marks)).cloned().fold(0.0, f64::max).max(1.0);
    for (i, p) in panels.iter().enumerate() {
        let top = MARGIN_T + i as f64 * (PANEL + GAP);
        let y_lo = p.y.iter().cloned().fold(0.0, f64::min);
        let y_hi = nice_max(p.y.iter().cloned().fold(0.0, f64::max));
        let sx = |x: f64| MARGIN_L + x / x_max * plot_w;
        let sy = |y: f64| top + PANEL - (y - y_lo) / (y_hi - y_lo) * PANEL;
        let _ = writeln!(s, r#"<text x="{MARGIN_L}" y="{}" font-weight="bold">{}</text>"#, top - 8.0, p.title);
        let _ = writeln!(s, r##"<rect x="{MARGIN_L}" y="{top}" width="{plot_w}" height="{PANEL}" fill="none" stroke="#444"/>"##);
        for k in 0..=4 {
            let y = y_lo + (y_hi - y_lo) * k as f64 / 4.0;
            let _ = writeln!(s, r##"<line x1="{MARGIN_L}" x2="{0}" y1="{1:.1}" y2="{1:.1}" stroke="#ddd"/>"##, MARGIN_L + plot_w, sy(y));
            let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, MARGIN_L - 6.0, sy(y) + 4.0, fmt_tick(y));
        }
        for m in &p.marks {
            let _ = writeln!(s, r#"<line x1="{0:.1}" x2="{0:.1}" y1="{top}" y2="{1}" stroke="red" stroke-opacity="0.5"/>"#, sx(*m), top + PANEL);
        }
        let pts: Vec<String> = p.x.iter().zip(&p.y).map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y))).collect();
        let _ = writeln!(s, r##"<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##, pts.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x_label} (0 to {})</text>"#, MARGIN_L + plot_w, top + PANEL + 18.0, x_max);
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

pub fn plot(csv: &Path, out: &Path) -> Result<()> {
    let (x_label, panels) = read_series(csv)?;
    std::fs::write(out, render_svg(&x_label, &panels)).with_context(|| format!("writing {}", out.display()))
}
