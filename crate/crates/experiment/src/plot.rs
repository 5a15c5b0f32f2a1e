//! Static SVG scatter and line plots.

use std::fmt::Write as _;

pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f"];

const WIDTH: f64 = 520.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<[f64; 2]>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<[f64; 2]>) -> Self {
        Series {
            name: name.into(),
            points,
        }
    }
}

struct Frame {
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Frame {
    fn fit(series: &[Series], equal_aspect: bool) -> Frame {
        let finite = series.iter().flat_map(|s| &s.points).filter(|p| p[0].is_finite() && p[1].is_finite());
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in finite {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if !lo[0].is_finite() {
            return Frame { lo: [0.0; 2], hi: [1.0; 2] };
        }
        for k in 0..2 {
            if hi[k] - lo[k] < 1e-12 {
                lo[k] -= 0.5;
                hi[k] += 0.5;
            }
        }
        if equal_aspect {
            let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
            for k in 0..2 {
                let mid = 0.5 * (lo[k] + hi[k]);
                lo[k] = mid - 0.5 * span;
                hi[k] = mid + 0.5 * span;
            }
        }
        Frame { lo, hi }
    }

    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        let x = MARGIN + (p[0] - self.lo[0]) / (self.hi[0] - self.lo[0]) * (WIDTH - 2.0 * MARGIN);
        let y = HEIGHT - MARGIN - (p[1] - self.lo[1]) / (self.hi[1] - self.lo[1]) * (HEIGHT - 2.0 * MARGIN);
        (x, y)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(out: &mut String, title: &str, frame: &Frame, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, y0) = (MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        out,
        r#"<rect x="{x0}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    let _ = writeln!(out, r#"<text x="{x0}" y="{}">{:.3}</text>"#, y0 + 14.0, frame.lo[0]);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
        WIDTH - MARGIN,
        y0 + 14.0,
        frame.hi[0]
    );
    let _ = writeln!(out, r#"<text x="{}" y="{y0}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, frame.lo[1]);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
        x0 - 4.0,
        MARGIN + 10.0,
        frame.hi[1]
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, series: &[Series]) {
    for (i, s) in series.iter().enumerate() {
        let y = MARGIN + 14.0 + 14.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            WIDTH - MARGIN - 110.0,
            y - 9.0,
            WIDTH - MARGIN - 96.0,
            y,
            escape(&s.name)
        );
    }
}

/// One colour per series; non-finite points are dropped.
pub fn scatter_svg(title: &str, series: &[Series]) -> String {
    let frame = Frame::fit(series, true);
    let mut out = String::new();
    open(&mut out, title, &frame, "x", "y");
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(out, r#"<g fill="{color}" fill-opacity="0.5">"#);
        for p in s.points.iter().filter(|p| p[0].is_finite() && p[1].is_finite()) {
            let (x, y) = frame.map(*p);
            let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.5"/>"#);
        }
        out.push_str("</g>\n");
    }
    legend(&mut out, series);
    out.push_str("</svg>\n");
    out
}

/// Polylines through each series' points in order.
pub fn line_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let frame = Frame::fit(series, false);
    let mut out = String::new();
    open(&mut out, title, &frame, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p[0].is_finite() && p[1].is_finite())
            .map(|p| {
                let (x, y) = frame.map(*p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
    }
    legend(&mut out, series);
    out.push_str("</svg>\n");
    out
}
