//! Minimal SVG line and bar charts for experiment outputs.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// One polyline with optional symmetric error bars.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub errors: Vec<f64>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
            errors: Vec::new(),
        }
    }

    pub fn with_errors(mut self, errors: Vec<f64>) -> Self {
        self.errors = errors;
        self
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    log_x: bool,
}

impl Frame {
    fn sx(&self, x: f64) -> f64 {
        let (x, a, b) = if self.log_x {
            (x.ln(), self.x0.ln(), self.x1.ln())
        } else {
            (x, self.x0, self.x1)
        };
        let span = if b > a { b - a } else { 1.0 };
        PAD + (x - a) / span * (W - 2.0 * PAD)
    }

    fn sy(&self, y: f64) -> f64 {
        let span = if self.y1 > self.y0 { self.y1 - self.y0 } else { 1.0 };
        H - PAD - (y - self.y0) / span * (H - 2.0 * PAD)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str, x_ticks: &[f64]) {
    let _ = writeln!(
        out,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    for &t in x_ticks {
        let x = f.sx(t);
        let _ = writeln!(
            out,
            r#"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="black"/><text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#,
            H - PAD,
            H - PAD + 5.0,
            H - PAD + 18.0,
            fmt_tick(t)
        );
    }
    for k in 0..=4 {
        let v = f.y0 + (f.y1 - f.y0) * k as f64 / 4.0;
        let y = f.sy(v);
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{y:.1}" x2="{PAD}" y2="{y:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            PAD - 5.0,
            PAD - 8.0,
            y + 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.2e}")
    } else {
        format!("{:.4}", v)
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    }
}

fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let m = 0.05 * (hi - lo);
    (lo - m, hi + m)
}

/// Line chart; `log_x` puts the x axis on a log scale (x must be positive).
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool) -> String {
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let x0 = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x1 = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (y0, y1) = y_range(series.iter().flat_map(|s| {
        s.points.iter().enumerate().flat_map(move |(k, p)| {
            let e = s.errors.get(k).copied().unwrap_or(0.0);
            [p.1 - e, p.1 + e]
        })
    }));
    let f = Frame {
        x0: if x0.is_finite() { x0 } else { 0.0 },
        x1: if x1.is_finite() { x1 } else { 1.0 },
        y0,
        y1,
        log_x: log_x && x0 > 0.0,
    };
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    if ticks.len() > 10 {
        let step = ticks.len().div_ceil(10);
        ticks = ticks.into_iter().step_by(step).collect();
    }
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, x_label, y_label, &ticks);
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", f.sx(x), f.sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for (i, &(x, y)) in s.points.iter().enumerate() {
            let (px, py) = (f.sx(x), f.sy(y));
            let _ = writeln!(out, r#"<circle cx="{px:.1}" cy="{py:.1}" r="3" fill="{color}"/>"#);
            if let Some(&e) = s.errors.get(i) {
                let _ = writeln!(
                    out,
                    r#"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="{color}"/>"#,
                    f.sy(y - e),
                    f.sy(y + e)
                );
            }
        }
        let ly = PAD + 16.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{:.1}" width="12" height="3" fill="{color}"/><text x="{}" y="{:.1}">{}</text>"#,
            W - PAD - 140.0,
            ly,
            W - PAD - 122.0,
            ly + 5.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart with one bar per `(label, value, stderr)`.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64, f64)]) -> String {
    let (mut y0, y1) = y_range(bars.iter().flat_map(|b| [b.1 - b.2, b.1 + b.2]));
    y0 = y0.min(0.0);
    let f = Frame {
        x0: 0.0,
        x1: bars.len().max(1) as f64,
        y0,
        y1: y1.max(0.0),
        log_x: false,
    };
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, "", y_label, &[]);
    let width = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    for (k, (label, v, e)) in bars.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let x = PAD + width * (k as f64 + 0.15);
        let (top, base) = (f.sy(v.max(0.0)), f.sy(v.min(0.0)));
        let cx = x + width * 0.35;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{color}"/>"#,
            width * 0.7,
            (base - top).max(0.5)
        );
        let _ = writeln!(
            out,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            f.sy(v - e),
            f.sy(v + e)
        );
        let _ = writeln!(
            out,
            r#"<text x="{cx:.1}" y="{}" text-anchor="middle">{}</text>"#,
            H - PAD + 18.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let s = Series::new("a<b", vec![(50.0, 0.3), (100.0, 0.2), (200.0, 0.1)]).with_errors(vec![0.01; 3]);
        let svg = line_chart("distance", "n", "W1", &[s], true);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a&lt;b"));
        assert_eq!(svg.matches("<circle").count(), 3);
        let bars = bar_chart("cost", "J", &[("x".into(), 1.0, 0.1), ("y".into(), -0.5, 0.0)]);
        assert_eq!(bars.matches("<rect").count(), 3);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(line_chart("t", "x", "y", &[], false).contains("</svg>"));
        let flat = Series::new("c", vec![(1.0, 2.0), (2.0, 2.0)]);
        assert!(!line_chart("t", "x", "y", &[flat], false).contains("NaN"));
    }
}
