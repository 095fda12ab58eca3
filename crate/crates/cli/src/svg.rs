//! Minimal static SVG line and bar charts.

use std::fmt::Write;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 50.0;
const MARGIN_B: f64 = 60.0;

pub struct Series {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub dashed: bool,
}

pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
    /// Vertical marker lines at these x positions.
    pub markers: Vec<f64>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace("--", "- -")
}

fn header(out: &mut String, w: f64, h: f64, provenance: &[String], timestamp: Option<&str>) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    for p in provenance {
        let _ = writeln!(out, "<!-- data: {} -->", escape(p));
    }
    if let Some(ts) = timestamp {
        let _ = writeln!(out, "<!-- generated: {} -->", escape(ts));
    }
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.1 } else { 1.0 };
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Side-by-side panels sharing both axis ranges.
pub fn line_panels(
    title: &str,
    x_label: &str,
    y_label: &str,
    panels: &[Panel],
    provenance: &[String],
    timestamp: Option<&str>,
) -> String {
    let n = panels.len().max(1) as f64;
    let w = n * (PANEL_W + MARGIN_L + MARGIN_R);
    let h = PANEL_H + MARGIN_T + MARGIN_B;
    let all = || panels.iter().flat_map(|p| p.series.iter());
    let (x0, x1) = range(all().flat_map(|s| s.xs.iter().copied()));
    let (y0, y1) = range(all().flat_map(|s| s.ys.iter().copied()));
    let mut out = String::new();
    header(&mut out, w, h, provenance, timestamp);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for (pi, panel) in panels.iter().enumerate() {
        let ox = pi as f64 * (PANEL_W + MARGIN_L + MARGIN_R) + MARGIN_L;
        let oy = MARGIN_T;
        let sx = |x: f64| ox + (x - x0) / (x1 - x0) * PANEL_W;
        let sy = |y: f64| oy + PANEL_H - (y - y0) / (y1 - y0) * PANEL_H;
        let _ = writeln!(
            out,
            r##"<rect x="{ox}" y="{oy}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#444"/>"##
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            ox + PANEL_W / 2.0,
            oy - 8.0,
            escape(&panel.title)
        );
        for k in 0..=4 {
            let yv = y0 + (y1 - y0) * k as f64 / 4.0;
            let xv = x0 + (x1 - x0) * k as f64 / 4.0;
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                ox - 4.0,
                sy(yv) + 4.0,
                fmt_tick(yv)
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                sx(xv),
                oy + PANEL_H + 14.0,
                fmt_tick(xv)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            ox + PANEL_W / 2.0,
            oy + PANEL_H + 32.0,
            escape(x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">{}</text>"#,
            ox - 45.0,
            oy + PANEL_H / 2.0,
            ox - 45.0,
            oy + PANEL_H / 2.0,
            escape(y_label)
        );
        for &m in &panel.markers {
            if m >= x0 && m <= x1 {
                let _ = writeln!(
                    out,
                    r##"<line x1="{0}" y1="{oy}" x2="{0}" y2="{1}" stroke="#999" stroke-dasharray="3,3"/>"##,
                    sx(m),
                    oy + PANEL_H
                );
                let _ = writeln!(
                    out,
                    r##"<path d="M {0} {1} l -5 -8 l 10 0 z" fill="#d62728"/>"##,
                    sx(m),
                    oy + PANEL_H
                );
            }
        }
        for (si, s) in panel.series.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            let mut d = String::new();
            let mut pen_up = true;
            for (&x, &y) in s.xs.iter().zip(&s.ys) {
                if !(x.is_finite() && y.is_finite()) {
                    pen_up = true;
                    continue;
                }
                let _ = write!(
                    d,
                    "{}{:.2} {:.2} ",
                    if pen_up { "M" } else { "L" },
                    sx(x),
                    sy(y)
                );
                pen_up = false;
            }
            let dash = if s.dashed { r#" stroke-dasharray="6,3""# } else { "" };
            let _ = writeln!(
                out,
                r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.2"{dash}/>"#,
                d.trim_end()
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
                ox + 6.0,
                oy + 14.0 + 13.0 * si as f64,
                escape(&s.label)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Grouped bars: one group per metric, one bar per run. Each group is scaled
/// to its own largest magnitude and annotated with the raw values.
pub fn bar_groups(
    title: &str,
    metrics: &[(String, Vec<f64>)],
    runs: &[String],
    provenance: &[String],
    timestamp: Option<&str>,
) -> String {
    let group_w = 40.0 + 28.0 * runs.len().max(1) as f64;
    let w = MARGIN_L + MARGIN_R + group_w * metrics.len().max(1) as f64;
    let h = PANEL_H + MARGIN_T + MARGIN_B + 14.0 * runs.len() as f64;
    let mut out = String::new();
    header(&mut out, w, h, provenance, timestamp);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let base = MARGIN_T + PANEL_H;
    let _ = writeln!(
        out,
        r##"<line x1="{MARGIN_L}" y1="{base}" x2="{}" y2="{base}" stroke="#444"/>"##,
        w - MARGIN_R
    );
    for (gi, (name, values)) in metrics.iter().enumerate() {
        let gx = MARGIN_L + gi as f64 * group_w + 20.0;
        let scale = values
            .iter()
            .filter(|v| v.is_finite())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        for (ri, &v) in values.iter().enumerate() {
            let color = PALETTE[ri % PALETTE.len()];
            let x = gx + 28.0 * ri as f64;
            if v.is_finite() && scale > 0.0 {
                let bh = v.abs() / scale * (PANEL_H - 20.0);
                let _ = writeln!(
                    out,
                    r#"<rect x="{x}" y="{:.2}" width="22" height="{bh:.2}" fill="{color}"/>"#,
                    base - bh
                );
                let _ = writeln!(
                    out,
                    r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="9" transform="rotate(-90 {} {:.2})">{}</text>"#,
                    x + 15.0,
                    base - bh - 4.0,
                    x + 15.0,
                    base - bh - 4.0,
                    fmt_tick(v)
                );
            } else {
                let _ = writeln!(
                    out,
                    r#"<text x="{}" y="{}" font-size="9">n/a</text>"#,
                    x + 2.0,
                    base - 4.0
                );
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            gx + 14.0 * values.len() as f64,
            base + 16.0,
            escape(name)
        );
    }
    for (ri, r) in runs.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{MARGIN_L}" y="{}" fill="{}">{}</text>"#,
            base + 36.0 + 14.0 * ri as f64,
            PALETTE[ri % PALETTE.len()],
            escape(r)
        );
    }
    out.push_str("</svg>\n");
    out
}
