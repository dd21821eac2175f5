//! CSV, weight-file and SVG output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use straightfm::evalmetrics::MetricReport;
use straightfm::flowmatch::LossRecord;
use straightfm::odesolve::Trajectory;
use straightfm::Matrix64;

/// `dir/stem.suffix` next to `path`, e.g. `fm.sfmw` → `fm.log.csv`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    ensure_parent(path)?;
    csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))
}

fn coords(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|k| format!("{prefix}{k}")).collect()
}

/// Header `x0,x1,…`, one row per sample.
pub fn write_samples(path: &Path, x: &Matrix64) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(coords("x", x.cols()))?;
    for row in x.iter_rows() {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Header `x0_0,x0_1,x1_0,x1_1`: noise then data coordinates per pair.
pub fn write_couplings(path: &Path, x0: &Matrix64, x1: &Matrix64) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = coords("x0_", x0.cols());
    header.extend(coords("x1_", x1.cols()));
    w.write_record(header)?;
    for (a, b) in x0.iter_rows().zip(x1.iter_rows()) {
        let row: Vec<f64> = a.iter().chain(b).copied().collect();
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Header `t,x0,x1,…`; one contiguous block of `times.len()` rows per
/// sample, in batch order.
pub fn write_trajectories(path: &Path, traj: &Trajectory<f64>) -> Result<()> {
    let mut w = writer(path)?;
    let d = traj.states[0].cols();
    let mut header = vec!["t".to_string()];
    header.extend(coords("x", d));
    w.write_record(header)?;
    for i in 0..traj.batch_size() {
        for (t, x) in traj.times.iter().zip(&traj.states) {
            let rec: Vec<f64> = std::iter::once(*t).chain(x.row(i).iter().copied()).collect();
            w.serialize(rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_train_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["iter", "total", "revs", "forw", "kl"])?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_diffusion_log(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["iter", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.serialize((i, l))?;
    }
    w.flush()?;
    Ok(())
}

/// Header `metric,steps,value,n,seed`.
pub fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["metric", "steps", "value", "n", "seed"])?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

const VIEW: f64 = 512.0;

/// Scatter of `points` (and optional paths) in a fixed `[-bound, bound]²`
/// viewport.
pub fn write_svg(path: &Path, points: &Matrix64, paths: Option<&Trajectory<f64>>, bound: f64) -> Result<()> {
    let map = |x: f64, y: f64| ((x + bound) / (2.0 * bound) * VIEW, (bound - y) / (2.0 * bound) * VIEW);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{VIEW}" height="{VIEW}" viewBox="0 0 {VIEW} {VIEW}">"#
    )?;
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    if let Some(traj) = paths {
        for i in 0..traj.batch_size() {
            let pts: Vec<String> = traj
                .states
                .iter()
                .map(|x| {
                    let (px, py) = map(x.row(i)[0], x.row(i)[1]);
                    format!("{px:.2},{py:.2}")
                })
                .collect();
            writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-opacity="0.3" stroke-width="0.6"/>"#,
                pts.join(" ")
            )?;
        }
    }
    for row in points.iter_rows() {
        let (px, py) = map(row[0], row[1]);
        writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="1.2" fill="black"/>"#)?;
    }
    s.push_str("</svg>\n");
    ensure_parent(path)?;
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}
