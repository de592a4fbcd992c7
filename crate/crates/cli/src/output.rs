//! CSV tables, SVG plots and the run manifest.

use lapwave::nonlinear::LifespanRecord;
use lapwave::report::Report;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::CliError;

pub fn num(x: f64) -> String {
    format!("{x:.12e}")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Column order: experiment, quantity, parameters, measured, predicted,
/// residual, verdict.
pub fn report_csv(report: &Report) -> Result<Vec<u8>, CliError> {
    let keys = report.param_keys();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = vec!["experiment".into(), "quantity".into()];
    header.extend(keys.iter().cloned());
    header.extend(["measured", "predicted", "residual", "verdict"].map(String::from));
    w.write_record(&header).map_err(|e| CliError::Io(e.to_string()))?;
    for row in &report.rows {
        let mut rec = vec![report.experiment.clone(), row.quantity.clone()];
        for k in &keys {
            rec.push(row.param(k).map(num).unwrap_or_default());
        }
        rec.push(num(row.measured));
        rec.push(num(row.predicted));
        rec.push(num(row.residual()));
        rec.push(report.label(row));
        w.write_record(&rec).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

pub fn lifespan_csv(records: &[LifespanRecord]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["delta", "t_obs", "reason", "iterations", "final_m"]).map_err(|e| CliError::Io(e.to_string()))?;
    for r in records {
        w.write_record([num(r.delta), num(r.t_obs), r.reason.to_string(), r.iterations.to_string(), num(r.final_m)])
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

/// Log-log scatter of the report series with the fitted line and, when the
/// report carries a predicted exponent, a reference line of that slope.
pub fn svg_plot(report: &Report) -> Option<String> {
    let pts: Vec<(f64, f64)> = report.series.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let (w, h, pad) = (480.0, 360.0, 48.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let clip = |y: f64| y.clamp(y0 - 0.5 * (y1 - y0), y1 + 0.5 * (y1 - y0));
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#, w - 2.0 * pad, h - 2.0 * pad);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">log {}</text>"#, w / 2.0, h - 12.0, report.axes.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">log {}</text>"#, h / 2.0, h / 2.0, report.axes.1);
    let _ = writeln!(s, r#"<text x="{pad}" y="20" font-size="13">{}</text>"#, report.experiment);
    if let Some(f) = report.fit {
        let line = |x: f64| f.prefactor.ln() + f.exponent * x;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="steelblue" stroke-width="1.5"/>"#,
            sx(x0),
            sy(clip(line(x0))),
            sx(x1),
            sy(clip(line(x1)))
        );
        let _ = writeln!(s, r#"<text x="{}" y="36" font-size="11" fill="steelblue">fit slope {:.3}</text>"#, pad, f.exponent);
    }
    if let Some(p) = report.predicted {
        let (ax, ay) = pts[0];
        let line = |x: f64| ay + p * (x - ax);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="firebrick" stroke-dasharray="5,4"/>"#,
            sx(x0),
            sy(clip(line(x0))),
            sx(x1),
            sy(clip(line(x1)))
        );
        let _ = writeln!(s, r#"<text x="{}" y="36" font-size="11" fill="firebrick">reference slope {:.3}</text>"#, w / 2.0, p);
    }
    for &(x, y) in &pts {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="black"/>"#, sx(x), sy(y));
    }
    s.push_str("</svg>\n");
    Some(s)
}

#[derive(Serialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct Manifest {
    pub experiment: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub wall_time_s: f64,
    pub verdicts: Vec<(String, String)>,
    pub notes: Vec<String>,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes files into one directory and remembers their digests.
pub struct OutputDir {
    pub dir: PathBuf,
    pub files: Vec<FileEntry>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(OutputDir { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.files.push(FileEntry { name: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(path)
    }

    pub fn finish(mut self, mut manifest: Manifest) -> Result<PathBuf, CliError> {
        manifest.files = std::mem::take(&mut self.files);
        let text = toml::to_string(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        let path = self.dir.join("manifest.toml");
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lapwave::report::{Row, Verdict};

    #[test]
    fn csv_header_and_format() {
        let mut r = Report::new("demo");
        r.rows.push(Row::new(&[("T", 2.0)], 0.5, 0.25, Verdict::Pass));
        r.rows.push(Row::new(&[("lambda", 4.0)], 1.0, f64::NAN, Verdict::Fail).outside());
        let text = String::from_utf8(report_csv(&r).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "experiment,quantity,T,lambda,measured,predicted,residual,verdict");
        assert_eq!(lines[1], "demo,,2.000000000000e0,,5.000000000000e-1,2.500000000000e-1,2.500000000000e-1,pass");
        assert!(lines[2].ends_with("outside-hypothesis"));
    }

    #[test]
    fn plot_needs_two_points() {
        let mut r = Report::new("demo");
        r.set_series("x", "y", vec![(1.0, 1.0)]);
        assert!(svg_plot(&r).is_none());
        r.set_series("x", "y", vec![(1.0, 1.0), (2.0, 0.5)]);
        assert!(svg_plot(&r).unwrap().starts_with("<svg"));
    }
}
