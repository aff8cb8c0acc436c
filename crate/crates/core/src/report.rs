//! CSV, JSON and SVG renderings of a composition report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::quantify::CompositionReport;

pub const CSV_HEADER: &str = "slice,sat_ml,vat_ml,muscle_ml";

/// Value in ten-thousandths of a millilitre, the unit of every printed volume.
fn ten_thousandths(ml: f64) -> i64 {
    (ml * 1e4).round() as i64
}

fn fmt4(v: i64) -> String {
    let sign = if v < 0 { "-" } else { "" };
    let a = v.unsigned_abs();
    format!("{sign}{}.{:04}", a / 10_000, a % 10_000)
}

/// One row per slice plus a `total` row. The total is the sum of the printed
/// row values, so re-adding the column reproduces it exactly.
pub fn report_csv(report: &CompositionReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let mut total = [0i64; 3];
    for r in &report.rows {
        let v = [r.sat_ml, r.vat_ml, r.muscle_ml].map(ten_thousandths);
        for (t, x) in total.iter_mut().zip(v) {
            *t += x;
        }
        let _ = writeln!(out, "{},{},{},{}", r.slice, fmt4(v[0]), fmt4(v[1]), fmt4(v[2]));
    }
    let _ = writeln!(out, "total,{},{},{}", fmt4(total[0]), fmt4(total[1]), fmt4(total[2]));
    out
}

pub fn report_json(report: &CompositionReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn parse_report_json(text: &str) -> Result<CompositionReport> {
    Ok(serde_json::from_str(text)?)
}

/// Bar colors and plot geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SvgOptions {
    pub sat_color: String,
    pub vat_color: String,
    pub muscle_color: String,
    pub bar_width: f64,
    pub plot_height: f64,
    pub title: String,
}

impl Default for SvgOptions {
    fn default() -> Self {
        Self {
            sat_color: "#e31a1c".into(),
            vat_color: "#33a02c".into(),
            muscle_color: "#ffd92f".into(),
            bar_width: 12.0,
            plot_height: 300.0,
            title: "Tissue volume per slice".into(),
        }
    }
}

const MARGIN_LEFT: f64 = 60.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 40.0;
const LEGEND_WIDTH: f64 = 120.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Stacked bars, one group per slice, bottom to top SAT, VAT, muscle. All
/// bars share one linear scale; the legend uses circles so every `rect` in
/// the document is a bar segment.
pub fn report_svg(report: &CompositionReport, opts: &SvgOptions) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::Invalid("cannot plot a report without slices".into()));
    }
    let n = report.rows.len() as f64;
    let max = report
        .rows
        .iter()
        .map(|r| r.sat_ml + r.vat_ml + r.muscle_ml)
        .fold(0.0, f64::max);
    let scale = if max > 0.0 { opts.plot_height / max } else { 0.0 };
    let plot_w = n * opts.bar_width;
    let width = MARGIN_LEFT + plot_w + LEGEND_WIDTH;
    let height = MARGIN_TOP + opts.plot_height + MARGIN_BOTTOM;
    let base = MARGIN_TOP + opts.plot_height;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<text x="{MARGIN_LEFT}" y="20" font-family="sans-serif" font-size="14">{}</text>"#, esc(&opts.title));
    let _ = writeln!(s, r#"<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{base}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{MARGIN_LEFT}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, MARGIN_LEFT + plot_w);
    let _ = writeln!(
        s,
        r#"<text x="10" y="{MARGIN_TOP}" font-family="sans-serif" font-size="10">{max:.1} ml</text>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN_LEFT}" y="{}" font-family="sans-serif" font-size="10">slice</text>"#,
        base + 25.0
    );
    for (i, r) in report.rows.iter().enumerate() {
        let x = MARGIN_LEFT + i as f64 * opts.bar_width;
        let _ = writeln!(s, r#"<g class="slice" data-slice="{}">"#, r.slice);
        let mut y = base;
        for (class, v, color) in [
            ("sat", r.sat_ml, &opts.sat_color),
            ("vat", r.vat_ml, &opts.vat_color),
            ("muscle", r.muscle_ml, &opts.muscle_color),
        ] {
            let h = v * scale;
            y -= h;
            let _ = writeln!(
                s,
                r#"<rect class="{class}" x="{x:.3}" y="{y:.3}" width="{:.3}" height="{h:.3}" fill="{}"/>"#,
                opts.bar_width * 0.9,
                esc(color)
            );
        }
        s.push_str("</g>\n");
    }
    let lx = MARGIN_LEFT + plot_w + 20.0;
    for (i, (name, color)) in [("SAT", &opts.sat_color), ("VAT", &opts.vat_color), ("Muscle", &opts.muscle_color)]
        .into_iter()
        .enumerate()
    {
        let ly = MARGIN_TOP + 10.0 + i as f64 * 20.0;
        let _ = writeln!(s, r#"<circle cx="{lx}" cy="{ly}" r="6" fill="{}"/>"#, esc(color));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{name}</text>"#,
            lx + 12.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Paths of the three files written by [`write_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportPaths {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub svg: PathBuf,
}

/// Writes `{stem}.csv`, `{stem}.json` and `{stem}.svg` into `dir`.
pub fn write_report(dir: impl AsRef<Path>, stem: &str, report: &CompositionReport, opts: &SvgOptions) -> Result<ReportPaths> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ReportPaths {
        csv: dir.join(format!("{stem}.csv")),
        json: dir.join(format!("{stem}.json")),
        svg: dir.join(format!("{stem}.svg")),
    };
    let write = |p: &Path, text: String| std::fs::write(p, text).map_err(|e| Error::io(p, e));
    write(&paths.csv, report_csv(report))?;
    write(&paths.json, report_json(report)?)?;
    write(&paths.svg, report_svg(report, opts)?)?;
    Ok(paths)
}
