use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::AblationReport;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Svg];

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Svg => "svg",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::config(format!("unknown report format '{other}' (csv, json, svg)"))),
        }
    }
}

pub const CSV_HEADER: &str = "variant,seed,final_acc,best_acc,wall_s";

/// Per-seed rows in report order, then one `mean` row per variant whose
/// `wall_s` is the variant's total.
pub fn render_csv(report: &AblationReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in &report.rows {
        for r in &row.runs {
            let _ = writeln!(out, "{},{},{},{},{:.3}", row.variant, r.seed, r.final_acc, r.best_acc, r.wall_s);
        }
    }
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{},mean,{},{},{:.3}",
            row.variant, row.final_mean, row.best_mean, row.wall_s
        );
    }
    out
}

pub fn render_json(report: &AblationReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart of mean final accuracy per variant with ±1 standard deviation
/// whiskers.
pub fn render_svg(report: &AblationReport) -> String {
    const BAR: f64 = 48.0;
    const GAP: f64 = 24.0;
    const PLOT_H: f64 = 240.0;
    const TOP: f64 = 30.0;
    const LEFT: f64 = 50.0;
    let n = report.rows.len() as f64;
    let width = LEFT + n * (BAR + GAP) + GAP;
    let height = TOP + PLOT_H + 90.0;
    let base = TOP + PLOT_H;
    let y_of = |acc: f64| base - acc.clamp(0.0, 1.0) * PLOT_H;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="18" font-family="sans-serif" font-size="13">Target test accuracy (final, mean ± std)</text>"#
    );
    for tick in 0..=4 {
        let v = tick as f64 * 0.25;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y}" x2="{width}" y2="{y}" stroke="#ddd"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.2}</text>"#,
            LEFT - 4.0,
            y + 3.0
        );
    }
    for (i, row) in report.rows.iter().enumerate() {
        let x = LEFT + GAP + i as f64 * (BAR + GAP);
        let top = y_of(row.final_mean);
        let _ = writeln!(
            s,
            r##"<rect class="bar" x="{x}" y="{top}" width="{BAR}" height="{}" fill="#4a78b5"><title>{}: {:.4}</title></rect>"##,
            base - top,
            escape(row.variant.as_str()),
            row.final_mean
        );
        let cx = x + BAR / 2.0;
        let (lo, hi) = (y_of(row.final_mean - row.final_std), y_of(row.final_mean + row.final_std));
        let _ = writeln!(
            s,
            r#"<line class="whisker" x1="{cx}" y1="{lo}" x2="{cx}" y2="{hi}" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end" transform="rotate(-40 {cx} {})">{}</text>"#,
            base + 14.0,
            base + 14.0,
            escape(row.variant.as_str())
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn render(report: &AblationReport, format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Json => render_json(report)?,
        ReportFormat::Svg => render_svg(report),
    })
}

pub fn emit_report(report: &AblationReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, render(report, format)?)?;
    Ok(())
}
