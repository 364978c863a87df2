//! Small deterministic SVG plots built straight from the metric CSVs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use r2n2::experiments::PlotKind;

use crate::{CliError, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader.headers()?.iter().map(str::to_string).collect::<Vec<_>>();
        let rows = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        if header.is_empty() || rows.is_empty() {
            return Err(CliError::Plot("empty CSV".into()));
        }
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn require(&self, name: &str, kind: PlotKind) -> Result<usize> {
        self.col(name)
            .ok_or_else(|| CliError::Plot(format!("{kind:?} plot needs a `{name}` column")))
    }
}

fn value(cell: &str) -> f64 {
    cell.parse().unwrap_or(f64::NAN)
}

#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Err(CliError::Plot("no plottable values".into()));
        }
        if log {
            lo = lo.floor();
            hi = hi.ceil().max(lo + 1.0);
        } else if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        } else {
            let pad = 0.05 * (hi - lo);
            lo -= pad;
            hi += pad;
        }
        Ok(Self { lo, hi, log })
    }

    fn include(mut self, v: f64) -> Self {
        let v = if self.log { v.log10() } else { v };
        self.lo = self.lo.min(v);
        self.hi = self.hi.max(v);
        self
    }

    /// Fraction along the axis, or `None` for values a log axis can't show.
    fn frac(&self, v: f64) -> Option<f64> {
        if !v.is_finite() || (self.log && v <= 0.0) {
            return None;
        }
        let v = if self.log { v.log10() } else { v };
        Some((v - self.lo) / (self.hi - self.lo))
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            (self.lo as i32..=self.hi as i32)
                .map(|e| (10f64.powi(e), format!("1e{e}")))
                .collect()
        } else {
            (0..=4)
                .map(|i| {
                    let v = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
                    (v, format!("{v:.3}"))
                })
                .collect()
        }
    }
}

struct Canvas {
    x: Axis,
    y: Axis,
    body: String,
    legend: Vec<(String, &'static str)>,
}

impl Canvas {
    fn px(&self, v: f64) -> Option<f64> {
        self.x.frac(v).map(|f| LEFT + f * (WIDTH - LEFT - RIGHT))
    }

    fn py(&self, v: f64) -> Option<f64> {
        self.y.frac(v).map(|f| HEIGHT - BOTTOM - f * (HEIGHT - TOP - BOTTOM))
    }

    fn point(&mut self, x: f64, y: f64, color: &str) {
        if let (Some(px), Some(py)) = (self.px(x), self.py(y)) {
            let _ = writeln!(self.body, r#"<circle cx="{px:.2}" cy="{py:.2}" r="2.5" fill="{color}"/>"#);
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str, dashed: bool) {
        let coords: Vec<String> = pts
            .iter()
            .filter_map(|&(x, y)| Some(format!("{:.2},{:.2}", self.px(x)?, self.py(y)?)))
            .collect();
        if coords.len() < 2 {
            return;
        }
        let dash = if dashed { r#" stroke-dasharray="6,4""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            coords.join(" ")
        );
    }

    fn finish(self, title: &str, x_label: &str, y_label: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
        let _ = writeln!(
            s,
            r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            x1 - x0,
            y1 - y0
        );
        for (v, label) in self.x.ticks() {
            if let Some(px) = self.px(v) {
                let _ = writeln!(s, r#"<line x1="{px:.2}" y1="{y1}" x2="{px:.2}" y2="{}" stroke="black"/>"#, y1 + 4.0);
                let _ = writeln!(s, r#"<text x="{px:.2}" y="{}" text-anchor="middle">{label}</text>"#, y1 + 16.0);
            }
        }
        for (v, label) in self.y.ticks() {
            if let Some(py) = self.py(v) {
                let _ = writeln!(s, r#"<line x1="{}" y1="{py:.2}" x2="{x0}" y2="{py:.2}" stroke="black"/>"#, x0 - 4.0);
                let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{label}</text>"#, x0 - 6.0, py + 4.0);
            }
        }
        let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, (x0 + x1) / 2.0, escape(title));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 12.0, escape(x_label));
        let _ = writeln!(
            s,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
        s.push_str(&self.body);
        for (i, (name, color)) in self.legend.iter().enumerate() {
            let ly = y0 + 10.0 + 16.0 * i as f64;
            let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, x1 + 10.0, ly - 8.0);
            let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, x1 + 26.0, escape(name));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Groups row indices by the value of `col`, in order of first appearance.
fn groups(csv: &Csv, col: Option<usize>) -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, row) in csv.rows.iter().enumerate() {
        let key = col.map(|c| row[c].clone()).unwrap_or_default();
        match out.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(i),
            None => out.push((key, vec![i])),
        }
    }
    out
}

fn scatter_ratio(csv: &Csv) -> Result<String> {
    let ratio = csv.require("ratio", PlotKind::ScatterRatio)?;
    let group_col = csv.col("matrix").or_else(|| csv.col("k"));
    let ys: Vec<f64> = csv.rows.iter().map(|r| value(&r[ratio])).collect();
    let x = Axis::fit((0..ys.len()).map(|i| i as f64), false)?;
    let y = Axis::fit(ys.iter().copied(), false)?.include(1.0);
    let mut canvas = Canvas {
        x,
        y,
        body: String::new(),
        legend: Vec::new(),
    };
    canvas.polyline(&[(x.lo, 1.0), (x.hi, 1.0)], "#555555", true);
    for (g, (name, idx)) in groups(csv, group_col).into_iter().enumerate() {
        let color = PALETTE[g % PALETTE.len()];
        for i in idx {
            canvas.point(i as f64, ys[i], color);
        }
        if group_col.is_some() {
            let label = match group_col.map(|c| csv.header[c].as_str()) {
                Some("k") => format!("k = {name}"),
                _ => name,
            };
            canvas.legend.push((label, color));
        }
    }
    Ok(canvas.finish("relative performance", "sample", "ratio"))
}

fn convergence_lines(csv: &Csv) -> Result<String> {
    let series = csv.require("series", PlotKind::ConvergenceLines)?;
    let k = csv.require("k", PlotKind::ConvergenceLines)?;
    let mean = csv.require("mean", PlotKind::ConvergenceLines)?;
    let x = Axis::fit(csv.rows.iter().map(|r| value(&r[k])), false)?;
    let y = Axis::fit(csv.rows.iter().map(|r| value(&r[mean])), true)?;
    let mut canvas = Canvas {
        x,
        y,
        body: String::new(),
        legend: Vec::new(),
    };
    for (g, (name, idx)) in groups(csv, Some(series)).into_iter().enumerate() {
        let color = PALETTE[g % PALETTE.len()];
        let pts: Vec<(f64, f64)> = idx
            .iter()
            .map(|&i| (value(&csv.rows[i][k]), value(&csv.rows[i][mean])))
            .collect();
        canvas.polyline(&pts, color, false);
        for (px, py) in pts {
            canvas.point(px, py, color);
        }
        canvas.legend.push((name, color));
    }
    Ok(canvas.finish("residual norm per iteration", "iteration k", "mean residual norm"))
}

fn error_vs_h(csv: &Csv, guide_slope: Option<f64>) -> Result<String> {
    let h = csv.require("h", PlotKind::ErrorVsH)?;
    let errs: Vec<usize> = (0..csv.header.len())
        .filter(|&i| csv.header[i].starts_with("error_"))
        .collect();
    if errs.is_empty() {
        return Err(CliError::Plot("ErrorVsH plot needs `error_*` columns".into()));
    }
    // One-step errors only when the table holds several steps.
    let rows: Vec<&Vec<String>> = match csv.col("k") {
        Some(k) => csv.rows.iter().filter(|r| r[k] == "1").collect(),
        None => csv.rows.iter().collect(),
    };
    if rows.is_empty() {
        return Err(CliError::Plot("no rows with k = 1".into()));
    }
    let x = Axis::fit(rows.iter().map(|r| value(&r[h])), true)?;
    let y = Axis::fit(rows.iter().flat_map(|r| errs.iter().map(|&c| value(&r[c]))), true)?;
    let mut canvas = Canvas {
        x,
        y,
        body: String::new(),
        legend: Vec::new(),
    };
    for (g, &c) in errs.iter().enumerate() {
        let color = PALETTE[g % PALETTE.len()];
        for r in &rows {
            canvas.point(value(&r[h]), value(&r[c]), color);
        }
        canvas.legend.push((csv.header[c].trim_start_matches("error_").to_string(), color));
    }
    if let Some(slope) = guide_slope {
        // Anchored at the geometric mean of the last error column.
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (value(&r[h]), value(&r[*errs.last().unwrap()])))
            .filter(|(a, b)| a.is_finite() && b.is_finite() && *a > 0.0 && *b > 0.0)
            .collect();
        if !pts.is_empty() {
            let n = pts.len() as f64;
            let lx = pts.iter().map(|p| p.0.log10()).sum::<f64>() / n;
            let ly = pts.iter().map(|p| p.1.log10()).sum::<f64>() / n;
            let line = |hv: f64| 10f64.powf(ly + slope * (hv.log10() - lx));
            let (h0, h1) = (10f64.powf(x.lo), 10f64.powf(x.hi));
            canvas.polyline(&[(h0, line(h0)), (h1, line(h1))], "#555555", true);
            canvas.legend.push((format!("slope {slope}"), "#555555"));
        }
    }
    Ok(canvas.finish("one-step error", "h", "error"))
}

/// Renders CSV text as an SVG document.
pub fn render_plot(csv_text: &str, kind: PlotKind, guide_slope: Option<f64>) -> Result<String> {
    let csv = Csv::parse(csv_text)?;
    match kind {
        PlotKind::ScatterRatio => scatter_ratio(&csv),
        PlotKind::ConvergenceLines => convergence_lines(&csv),
        PlotKind::ErrorVsH => error_vs_h(&csv, guide_slope),
    }
}

/// Writes `<csv stem>.svg` next to the CSV and returns its path.
pub fn emit_plot(csv_path: &Path, kind: PlotKind, guide_slope: Option<f64>) -> Result<PathBuf> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| CliError::io(csv_path, e))?;
    let svg = render_plot(&text, kind, guide_slope)?;
    let out = csv_path.with_extension("svg");
    std::fs::write(&out, svg).map_err(|e| CliError::io(&out, e))?;
    Ok(out)
}
