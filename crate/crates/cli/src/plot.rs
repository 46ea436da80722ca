//! Static SVG emission: quantile fans over a data scatter, or error-vs-level
//! curves from a replication summary. The output is a single self-contained
//! text file with no external references.

use std::fs;
use std::path::Path;

use crate::CliError;

/// One polyline with a legend label.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// A parsed CSV: trimmed header names plus trimmed string cells, every row
/// as wide as the header.
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn read(path: &Path) -> Result<Csv, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let Some(head) = lines.next() else {
            return Err(CliError::Config(format!("{}: empty CSV", path.display())));
        };
        let header: Vec<String> = head.split(',').map(|c| c.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (idx, line) in lines.enumerate() {
            let cells: Vec<String> = line.split(',').map(|c| c.trim().to_string()).collect();
            if cells.len() != header.len() {
                return Err(CliError::Config(format!(
                    "{}: row {} has {} cells, header has {}",
                    path.display(),
                    idx + 2,
                    cells.len(),
                    header.len()
                )));
            }
            rows.push(cells);
        }
        if rows.is_empty() {
            return Err(CliError::Config(format!("{}: empty CSV", path.display())));
        }
        Ok(Csv { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize, CliError> {
        self.header.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Config(format!(
                "missing CSV column `{name}` (have: {})",
                self.header.join(", ")
            ))
        })
    }

    pub fn float(&self, row: usize, col: usize) -> Result<f64, CliError> {
        self.rows[row][col].parse::<f64>().map_err(|_| {
            CliError::Config(format!(
                "CSV row {}, column `{}`: `{}` is not a number",
                row + 2,
                self.header[col],
                self.rows[row][col]
            ))
        })
    }
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 520.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 18.0;
const MARGIN_T: f64 = 42.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
    "#bcbd22", "#7f7f7f",
];

struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Range {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Range { lo: 0.0, hi: 1.0 };
        }
        // Pad so extreme points do not sit on the frame; widen degenerate
        // spans so the scale stays invertible.
        let span = hi - lo;
        let pad = if span > 0.0 { 0.04 * span } else { 0.5 * lo.abs().max(1.0) };
        Range { lo: lo - pad, hi: hi + pad }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" || s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders series as polylines plus an optional scatter layer and returns
/// the SVG document text.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    scatter: &[(f64, f64)],
) -> Result<String, CliError> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(CliError::Config("nothing to plot: no series points".into()));
    }
    let xs = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .chain(scatter.iter().map(|p| p.0));
    let ys = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .chain(scatter.iter().map(|p| p.1));
    let xr = Range::of(xs);
    let yr = Range::of(ys);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + xr.frac(x) * plot_w;
    let py = |y: f64| MARGIN_T + (1.0 - yr.frac(y)) * plot_h;

    let mut out = String::with_capacity(16 * 1024);
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    out.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));

    // Frame, ticks, grid.
    out.push_str(&format!(
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"#333\"/>\n"
    ));
    const TICKS: usize = 6;
    for i in 0..TICKS {
        let f = i as f64 / (TICKS - 1) as f64;
        let xv = xr.lo + f * (xr.hi - xr.lo);
        let yv = yr.lo + f * (yr.hi - yr.lo);
        let gx = px(xv);
        let gy = py(yv);
        out.push_str(&format!(
            "<line x1=\"{gx:.2}\" y1=\"{MARGIN_T}\" x2=\"{gx:.2}\" y2=\"{:.2}\" \
             stroke=\"#ddd\"/>\n",
            MARGIN_T + plot_h
        ));
        out.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{gy:.2}\" x2=\"{:.2}\" y2=\"{gy:.2}\" \
             stroke=\"#ddd\"/>\n",
            MARGIN_L + plot_w
        ));
        out.push_str(&format!(
            "<text x=\"{gx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_T + plot_h + 16.0,
            fmt_tick(xv)
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 6.0,
            gy + 4.0,
            fmt_tick(yv)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        escape(y_label)
    ));

    // Scatter beneath the lines.
    for &(x, y) in scatter {
        out.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"#777\" fill-opacity=\"0.4\"/>\n",
            px(x),
            py(y)
        ));
    }

    for (idx, s) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let pts: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
    }

    // Legend only while it stays readable; a 19-line fan labels itself.
    if series.len() <= 12 {
        let lx = MARGIN_L + plot_w - 150.0;
        for (idx, s) in series.iter().enumerate() {
            let color = PALETTE[idx % PALETTE.len()];
            let ly = MARGIN_T + 14.0 + 16.0 * idx as f64;
            out.push_str(&format!(
                "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" \
                 stroke-width=\"2\"/>\n",
                lx + 18.0
            ));
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{}\">{}</text>\n",
                lx + 24.0,
                ly + 4.0,
                escape(&s.label)
            ));
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_one_polyline_per_series_and_scatter() {
        let series = vec![
            Series { label: "a".into(), points: vec![(0.0, 0.0), (1.0, 1.0)] },
            Series { label: "b".into(), points: vec![(0.0, 1.0), (1.0, 0.0)] },
        ];
        let svg = line_chart("t", "x", "y", &series, &[(0.5, 0.5)]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(svg.starts_with("<svg "));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn empty_series_is_an_error() {
        assert!(line_chart("t", "x", "y", &[], &[]).is_err());
    }

    #[test]
    fn degenerate_ranges_stay_finite() {
        let series =
            vec![Series { label: "c".into(), points: vec![(2.0, 5.0), (2.0, 5.0)] }];
        let svg = line_chart("t", "x", "y", &series, &[]).unwrap();
        assert!(!svg.contains("NaN"));
        assert!(!svg.contains("inf"));
    }

    #[test]
    fn tick_formatting_trims_zeros() {
        assert_eq!(fmt_tick(0.5), "0.5");
        assert_eq!(fmt_tick(2.0), "2");
        assert_eq!(fmt_tick(-0.0004), "0");
        assert_eq!(fmt_tick(1.25), "1.25");
    }
}
