//! Static SVG line and scatter charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD_L: f64 = 70.0;
const PAD_R: f64 = 150.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let m = 0.05 * (hi - lo);
        Self { lo: lo - m, hi: hi + m, log }
    }

    /// Fraction of the axis span, or `None` for values a log axis cannot show.
    fn frac(&self, v: f64) -> Option<f64> {
        let v = if self.log {
            if v > 0.0 {
                v.log10()
            } else {
                return None;
            }
        } else {
            v
        };
        v.is_finite().then(|| (v - self.lo) / (self.hi - self.lo))
    }

    fn label(&self, f: f64) -> String {
        let v = self.lo + f * (self.hi - self.lo);
        let v = if self.log { 10f64.powf(v) } else { v };
        format!("{v:.3e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(title: &str, x_label: &str, y_label: &str, xa: Axis, ya: Axis) -> String {
    let mut s = String::new();
    let (pw, ph) = (W - PAD_L - PAD_R, H - PAD_T - PAD_B);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        PAD_L + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(s, r#"<rect x="{PAD_L}" y="{PAD_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let x = PAD_L + f * pw;
        let y = PAD_T + (1.0 - f) * ph;
        let _ = writeln!(s, r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#ccc"/>"##, PAD_T, PAD_T + ph);
        let _ = writeln!(s, r##"<line x1="{PAD_L}" y1="{y}" x2="{}" y2="{y}" stroke="#ccc"/>"##, PAD_L + pw);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, PAD_T + ph + 15.0, xa.label(f));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, PAD_L - 5.0, y + 4.0, ya.label(f));
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        PAD_L + pw / 2.0,
        H - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        PAD_T + ph / 2.0,
        PAD_T + ph / 2.0,
        escape(y_label)
    );
    s
}

fn to_px(xa: Axis, ya: Axis, (x, y): (f64, f64)) -> Option<(f64, f64)> {
    let (pw, ph) = (W - PAD_L - PAD_R, H - PAD_T - PAD_B);
    Some((PAD_L + xa.frac(x)? * pw, PAD_T + (1.0 - ya.frac(y)?) * ph))
}

/// Polyline chart with one line and marker set per series; log axes drop nonpositive values.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool, log_y: bool) -> String {
    let xa = Axis::fit(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)), log_x);
    let ya = Axis::fit(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)), log_y);
    let mut s = frame(title, x_label, y_label, xa, ya);
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let px: Vec<(f64, f64)> = ser.points.iter().filter_map(|&p| to_px(xa, ya, p)).collect();
        let path: Vec<String> = px.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for (x, y) in &px {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
        }
        let ly = PAD_T + 15.0 * i as f64 + 10.0;
        let lx = W - PAD_R + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 25.0, ly + 4.0, escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter of `(x, y)` points.
pub fn scatter(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let xa = Axis::fit(points.iter().map(|p| p.0), false);
    let ya = Axis::fit(points.iter().map(|p| p.1), false);
    let mut s = frame(title, x_label, y_label, xa, ya);
    for &p in points {
        if let Some((x, y)) = to_px(xa, ya, p) {
            let _ = writeln!(s, r##"<circle cx="{x:.2}" cy="{y:.2}" r="1.2" fill="#1f77b4" fill-opacity="0.5"/>"##);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Histogram of one-dimensional data drawn as a step line.
pub fn histogram(title: &str, x_label: &str, data: &[f64], bins: usize) -> String {
    let finite: Vec<f64> = data.iter().copied().filter(|v| v.is_finite()).collect();
    let bins = bins.max(1);
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in &finite {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = finite.len().max(1) as f64;
    let mut pts = Vec::with_capacity(2 * bins);
    for (b, c) in counts.iter().enumerate() {
        let dens = *c as f64 / (n * width);
        pts.push((lo + b as f64 * width, dens));
        pts.push((lo + (b + 1) as f64 * width, dens));
    }
    line_chart(title, x_label, "density", &[Series { name: "histogram".into(), points: pts }], false, false)
}
