//! Per-epoch run reports, CSV serialization and SVG learning curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 11] = [
    "algo",
    "seed",
    "epoch",
    "env_steps",
    "success_rate",
    "subgoal_distance",
    "lower_q",
    "higher_loss",
    "critic_loss",
    "actor_loss",
    "wall_time_s",
];

/// One evaluation row. Metrics that do not apply are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub algo: String,
    pub seed: u64,
    pub epoch: usize,
    pub env_steps: usize,
    pub success_rate: f64,
    pub subgoal_distance: f64,
    pub lower_q: f64,
    pub higher_loss: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub algo: String,
    pub seed: u64,
    pub rows: Vec<EpochRow>,
}

impl RunReport {
    pub fn new(algo: impl Into<String>, seed: u64) -> Self {
        Self {
            algo: algo.into(),
            seed,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: EpochRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.env_steps <= last.env_steps {
                return Err(Error::Unsupported(format!(
                    "env_steps must increase: {} after {}",
                    row.env_steps, last.env_steps
                )));
            }
        }
        if !(0.0..=1.0).contains(&row.success_rate) {
            return Err(Error::Unsupported(format!("success rate {} outside [0, 1]", row.success_rate)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn final_success(&self) -> Option<f64> {
        self.rows.last().map(|r| r.success_rate)
    }

    /// Mean of a column over the last third of the rows, skipping NaN.
    pub fn final_third_mean(&self, column: impl Fn(&EpochRow) -> f64) -> Option<f64> {
        let n = self.rows.len();
        if n == 0 {
            return None;
        }
        let start = n - n.div_ceil(3);
        let vals: Vec<f64> = self.rows[start..].iter().map(column).filter(|v| !v.is_nan()).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.6}")
    }
}

pub fn write_csv<W: Write>(reports: &[RunReport], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for row in reports.iter().flat_map(|r| &r.rows) {
        w.write_record([
            row.algo.clone(),
            row.seed.to_string(),
            row.epoch.to_string(),
            row.env_steps.to_string(),
            fmt_f(row.success_rate),
            fmt_f(row.subgoal_distance),
            fmt_f(row.lower_q),
            fmt_f(row.higher_loss),
            fmt_f(row.critic_loss),
            fmt_f(row.actor_loss),
            fmt_f(row.wall_time_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(reports: &[RunReport]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(reports, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
}

/// Read rows back and regroup them into reports by `(algo, seed)`.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<RunReport>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::Parse(format!("unexpected CSV header {header:?}")));
    }
    let mut reports: Vec<RunReport> = Vec::new();
    for row in rd.deserialize() {
        let row: EpochRow = row?;
        match reports.iter_mut().find(|r| r.algo == row.algo && r.seed == row.seed) {
            Some(r) => r.rows.push(row),
            None => reports.push(RunReport {
                algo: row.algo.clone(),
                seed: row.seed,
                rows: vec![row],
            }),
        }
    }
    Ok(reports)
}

/// Mean and population standard deviation across seeds at each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub env_steps: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn seed_band(reports: &[&RunReport], column: impl Fn(&EpochRow) -> f64) -> Band {
    let n = reports.iter().map(|r| r.rows.len()).min().unwrap_or(0);
    let mut band = Band {
        env_steps: Vec::with_capacity(n),
        mean: Vec::with_capacity(n),
        std: Vec::with_capacity(n),
    };
    for i in 0..n {
        let vals: Vec<f64> = reports.iter().map(|r| column(&r.rows[i])).filter(|v| !v.is_nan()).collect();
        let steps = reports.iter().map(|r| r.rows[i].env_steps as f64).sum::<f64>() / reports.len() as f64;
        let (mean, std) = if vals.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            (m, var.sqrt())
        };
        band.env_steps.push(steps);
        band.mean.push(mean);
        band.std.push(std);
    }
    band
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line chart of one column, one mean curve with a ±1 std band per algorithm.
pub fn render_svg(reports: &[RunReport], title: &str, column: impl Fn(&EpochRow) -> f64 + Copy) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let mut groups: BTreeMap<&str, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.algo.as_str()).or_default().push(r);
    }
    let bands: Vec<(&str, Band)> = groups.iter().map(|(a, rs)| (*a, seed_band(rs, column))).collect();
    let finite = |v: &f64| v.is_finite();
    let xs: Vec<f64> = bands.iter().flat_map(|(_, b)| b.env_steps.iter().copied()).collect();
    let ys: Vec<f64> = bands
        .iter()
        .flat_map(|(_, b)| b.mean.iter().zip(&b.std).flat_map(|(m, s)| [m - s, m + s]))
        .filter(finite)
        .collect();
    let x_max = xs.iter().copied().fold(1.0, f64::max);
    let (mut y_min, mut y_max) = ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_max - y_min < 1e-9 {
        y_max = y_min + 1.0;
    }
    let px = |x: f64| pad + x / x_max * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - y_min) / (y_max - y_min) * (h - 2.0 * pad);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        svg,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{y_max:.3}</text>"#, pad - 4.0, pad + 4.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{y_min:.3}</text>"#, pad - 4.0, h - pad);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{x_max:.0} env steps</text>"#, w - pad, h - pad + 16.0);
    for (i, (algo, band)) in bands.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64, f64)> = band
            .env_steps
            .iter()
            .zip(&band.mean)
            .zip(&band.std)
            .filter(|((_, m), _)| m.is_finite())
            .map(|((x, m), s)| (*x, *m, *s))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let upper: Vec<String> = pts.iter().map(|(x, m, s)| format!("{:.2},{:.2}", px(*x), py(m + s))).collect();
        let lower: Vec<String> = pts.iter().rev().map(|(x, m, s)| format!("{:.2},{:.2}", px(*x), py(m - s))).collect();
        let _ = writeln!(
            svg,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = pts.iter().map(|(x, m, _)| format!("{:.2},{:.2}", px(*x), py(*m))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{algo}</text>"#,
            w - pad - 150.0,
            pad + 16.0 * (i as f64 + 1.0)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write `report.csv` plus one SVG per plotted metric into `dir`.
pub fn render_report(reports: &[RunReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("report.csv");
    write_csv(reports, fs::File::create(&csv_path)?)?;
    let mut written = vec![csv_path];
    let charts: [(&str, &str, fn(&EpochRow) -> f64); 3] = [
        ("success_rate.svg", "success rate", |r| r.success_rate),
        ("subgoal_distance.svg", "subgoal distance", |r| r.subgoal_distance),
        ("lower_q.svg", "lower-level value", |r| r.lower_q),
    ];
    for (file, title, column) in charts {
        let path = dir.join(file);
        fs::write(&path, render_svg(reports, title, column))?;
        written.push(path);
    }
    Ok(written)
}
