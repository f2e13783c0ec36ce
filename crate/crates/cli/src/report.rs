//! CSV, text table and SVG renderings of experiment reports.
//!
//! CSV columns: `experiment_id`, `n_W` (remote workers), `throughput_bps`
//! (aggregate batches per second), `cost` (dollars for the run), `duplicates`,
//! `losses`, `evictions` and `padding_waste` (padding units consumed).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::harness::MetricsReport;
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Table,
    Svg,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Table => "txt",
            ReportFormat::Svg => "svg",
        }
    }
}

pub const CSV_HEADER: &str =
    "experiment_id,n_W,throughput_bps,cost,duplicates,losses,evictions,padding_waste";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_csv(reports: &[MetricsReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.8},{},{},{},{}",
            csv_field(&r.experiment_id),
            r.n_workers,
            r.throughput_bps,
            r.cost,
            r.duplicates,
            r.losses,
            r.evictions,
            r.padding_waste
        );
    }
    out
}

pub fn render_table(reports: &[MetricsReport]) -> String {
    let headers = [
        "experiment",
        "n_W",
        "batches/s",
        "cost $",
        "dup",
        "lost",
        "evict",
        "padding",
    ];
    let rows: Vec<[String; 8]> = reports
        .iter()
        .map(|r| {
            [
                r.experiment_id.clone(),
                r.n_workers.to_string(),
                format!("{:.2}", r.throughput_bps),
                format!("{:.6}", r.cost),
                r.duplicates.to_string(),
                r.losses.to_string(),
                r.evictions.to_string(),
                r.padding_waste.to_string(),
            ]
        })
        .collect();
    let mut widths = headers.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[&str]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(&headers);
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        out += &line(&cells);
    }
    out
}

/// Throughput (solid) and cost (dashed, right axis) against worker count.
pub fn render_svg(reports: &[MetricsReport]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 60.0;
    let mut pts: Vec<(f64, f64, f64)> = reports
        .iter()
        .map(|r| (r.n_workers as f64, r.throughput_bps, r.cost))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let max_x = pts.iter().map(|p| p.0).fold(1.0, f64::max);
    let max_t = pts.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-9);
    let max_c = pts.iter().map(|p| p.2).fold(0.0, f64::max).max(1e-12);
    let x = |v: f64| PAD + v / max_x * (W - 2.0 * PAD);
    let y = |v: f64, max: f64| H - PAD - v / max * (H - 2.0 * PAD);
    let path = |f: &dyn Fn(&(f64, f64, f64)) -> f64, max: f64| {
        pts.iter()
            .map(|p| format!("{:.2},{:.2}", x(p.0), y(f(p), max)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD},{PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{PAD}" x2="{}" y2="{}" stroke="gray"/>"#,
        W - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">workers</text>"#,
        W / 2.0,
        H - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="{}">batches/s (max {max_t:.2})</text>"#,
        PAD - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end" fill="gray">cost $ (max {max_c:.6})</text>"#,
        W - PAD,
        PAD - 20.0
    );
    for p in &pts {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            x(p.0),
            H - PAD + 16.0,
            p.0
        );
    }
    if !pts.is_empty() {
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
            path(&|p| p.1, max_t)
        );
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="gray" stroke-dasharray="6 4" stroke-width="2"/>"#,
            path(&|p| p.2, max_c)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<dir>/<name>.<ext>` and returns its path.
pub fn emit_report(
    reports: &[MetricsReport],
    format: ReportFormat,
    dir: &Path,
    name: &str,
) -> Result<PathBuf, HarnessError> {
    let body = match format {
        ReportFormat::Csv => render_csv(reports),
        ReportFormat::Table => render_table(reports),
        ReportFormat::Svg => render_svg(reports),
    };
    fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(format!("{name}.{}", format.extension()));
    fs::write(&path, body).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}
