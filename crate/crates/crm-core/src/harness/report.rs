//! Report emission: tab-separated tables and self-contained SVG line
//! plots, both written deterministically so reruns diff clean.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Canonical float formatting for report tables.
pub fn tsv_float(x: f64) -> String {
    format!("{x:.6}")
}

/// Write a tab-separated table: one header row, then data rows. Every row
/// must have exactly as many cells as the header.
pub fn write_tsv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if header.is_empty() {
        return Err(Error::Config("a table needs at least one column".to_string()));
    }
    let mut out = String::new();
    out.push_str(&header.join("\t"));
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::Config(format!(
                "table row {i} has {} cells, header has {}",
                row.len(),
                header.len()
            )));
        }
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One named line on a plot.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// A complete line plot.
#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];
const TICKS: usize = 5;

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        // Degenerate span: pad so the single value sits mid-axis.
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.5 };
        (lo - pad, hi + pad)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && (a < 0.01 || a >= 10000.0) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Render a line plot to a standalone SVG file. Output bytes are a pure
/// function of the spec, so identical inputs rewrite identical files.
pub fn line_plot_svg(path: &Path, spec: &PlotSpec) -> Result<()> {
    if spec.series.is_empty() {
        return Err(Error::Config("a plot needs at least one series".to_string()));
    }
    for s in &spec.series {
        if s.points.is_empty() {
            return Err(Error::Config(format!("series '{}' has no points", s.label)));
        }
        if s.points.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::NonFinite(format!("plot series '{}'", s.label)));
        }
    }

    let (x_lo, x_hi) = axis_range(spec.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y_lo, y_hi) = axis_range(spec.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let to_px = |x: f64, y: f64| {
        let px = MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (PLOT_W - MARGIN_L - MARGIN_R);
        let py = PLOT_H - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (PLOT_H - MARGIN_T - MARGIN_B);
        (px, py)
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" \
         viewBox=\"0 0 {PLOT_W} {PLOT_H}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        PLOT_W / 2.0,
        xml_escape(&spec.title)
    ));

    // Grid, ticks, tick labels.
    for i in 0..TICKS {
        let f = i as f64 / (TICKS - 1) as f64;
        let xv = x_lo + f * (x_hi - x_lo);
        let yv = y_lo + f * (y_hi - y_lo);
        let (px, _) = to_px(xv, y_lo);
        let (_, py) = to_px(x_lo, yv);
        svg.push_str(&format!(
            "  <line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n",
            MARGIN_T,
            PLOT_H - MARGIN_B
        ));
        svg.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\" stroke=\"#dddddd\"/>\n",
            MARGIN_L,
            PLOT_W - MARGIN_R
        ));
        svg.push_str(&format!(
            "  <text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            PLOT_H - MARGIN_B + 16.0,
            tick_label(xv)
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 6.0,
            py + 4.0,
            tick_label(yv)
        ));
    }

    // Axes.
    svg.push_str(&format!(
        "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        MARGIN_L,
        PLOT_H - MARGIN_B,
        PLOT_W - MARGIN_R,
        PLOT_H - MARGIN_B
    ));
    svg.push_str(&format!(
        "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        MARGIN_L,
        MARGIN_T,
        MARGIN_L,
        PLOT_H - MARGIN_B
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + (PLOT_W - MARGIN_L - MARGIN_R) / 2.0,
        PLOT_H - 12.0,
        xml_escape(&spec.x_label)
    ));
    svg.push_str(&format!(
        "  <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        MARGIN_T + (PLOT_H - MARGIN_T - MARGIN_B) / 2.0,
        MARGIN_T + (PLOT_H - MARGIN_T - MARGIN_B) / 2.0,
        xml_escape(&spec.y_label)
    ));

    // Series polylines, markers, legend.
    for (i, s) in spec.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| {
                let (px, py) = to_px(x, y);
                format!("{px:.1},{py:.1}")
            })
            .collect();
        svg.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
        for &(x, y) in &s.points {
            let (px, py) = to_px(x, y);
            svg.push_str(&format!(
                "  <circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"3\" fill=\"{color}\"/>\n"
            ));
        }
        let ly = MARGIN_T + 14.0 * i as f64;
        svg.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            PLOT_W - MARGIN_R - 150.0,
            PLOT_W - MARGIN_R - 130.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            PLOT_W - MARGIN_R - 124.0,
            ly + 4.0,
            xml_escape(&s.label)
        ));
    }

    svg.push_str("</svg>\n");
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
