//! CSV schemas and the SVG line chart.

use std::fmt::Write as _;
use std::path::Path;

use exssnet::harness::RunReport;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const CURVES_CSV: &str = "curves.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SVG: &str = "sweep.svg";
pub const CHECKPOINT: &str = "checkpoint.exss";
pub const RUN_LOG: &str = "run.log";

/// One accuracy-matrix entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub mode: String,
    pub seed: u64,
    pub task_learned: usize,
    pub task_eval: usize,
    pub accuracy: f64,
}

/// One run; `forgetting` is empty for single-task runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub mode: String,
    pub seed: u64,
    pub avg_accuracy: f64,
    pub forgetting: Option<f64>,
    pub mean_sparse_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub run_id: String,
    pub task: usize,
    pub phase: String,
    pub epoch: usize,
    pub val_accuracy: f64,
}

/// Seed-averaged sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub mode: String,
    pub seeds: usize,
    pub avg_accuracy: f64,
    pub forgetting: Option<f64>,
    pub mean_sparse_overlap: f64,
}

pub fn metric_rows(run_id: &str, report: &RunReport) -> Vec<MetricRow> {
    let t = &report.config.train;
    let mut rows = Vec::new();
    for (i, row) in report.metrics.matrix.rows().iter().enumerate() {
        for (j, &a) in row.iter().enumerate() {
            rows.push(MetricRow {
                run_id: run_id.to_string(),
                mode: t.mode.to_string(),
                seed: t.seed,
                task_learned: i,
                task_eval: j,
                accuracy: a,
            });
        }
    }
    rows
}

pub fn summary_row(run_id: &str, report: &RunReport) -> SummaryRow {
    SummaryRow {
        run_id: run_id.to_string(),
        mode: report.config.train.mode.to_string(),
        seed: report.config.train.seed,
        avg_accuracy: report.metrics.average_accuracy,
        forgetting: report.metrics.forgetting,
        mean_sparse_overlap: report.mean_sparse_overlap(),
    }
}

pub fn curve_rows(run_id: &str, report: &RunReport) -> Vec<CurveRow> {
    report
        .metrics
        .curves
        .iter()
        .map(|p| CurveRow {
            run_id: run_id.to_string(),
            task: p.task_id,
            phase: format!("{:?}", p.phase).to_lowercase(),
            epoch: p.epoch,
            val_accuracy: p.val_accuracy,
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))
}

#[cfg(test)]
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(|e| CliError::Runtime(e.to_string()))
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Polyline chart of `series` (name, points sorted by x).
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let margin = ((y1 - y0) * 0.1).max(1e-3);
    (y0, y1) = (y0 - margin, y1 + margin);
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<polyline points="{PAD},{PAD} {PAD},{} {},{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="11">{xv:.3}</text>"#, sx(xv), H - PAD + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="11">{yv:.3}</text>"#, PAD - 4.0, sy(yv) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, coords.join(" "));
        let ly = PAD + 16.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-size="12" fill="{color}">{}</text>"#, W - PAD - 90.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_balanced_markup() {
        let svg = line_chart("a<b", "x", "y", &[("s1".into(), vec![(0.0, 0.5), (1.0, 0.7)]), ("s2".into(), vec![(0.0, 0.6)])]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("a&lt;b"));
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn chart_handles_degenerate_input() {
        let svg = line_chart("t", "x", "y", &[]);
        assert!(!svg.contains("NaN"));
        let svg = line_chart("t", "x", "y", &[("one".into(), vec![(2.0, 1.0)])]);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn summary_csv_round_trips_missing_forgetting() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let rows = vec![
            SummaryRow { run_id: "a".into(), mode: "supsup".into(), seed: 1, avg_accuracy: 0.5, forgetting: None, mean_sparse_overlap: 0.0 },
            SummaryRow { run_id: "b".into(), mode: "ssnet".into(), seed: 2, avg_accuracy: 0.25, forgetting: Some(-0.125), mean_sparse_overlap: 0.3 },
        ];
        write_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("run_id,mode,seed,avg_accuracy,forgetting,mean_sparse_overlap\n"));
        assert_eq!(read_csv::<SummaryRow>(&p).unwrap(), rows);
    }
}
