//! Hand-rolled SVG output for the sweep reports: line charts and heatmaps.
//! No styling ambitions, just inspectable artifacts.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn color(i: usize) -> &'static str {
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    COLORS[i % COLORS.len()]
}

/// Multi-series line chart with linear axes.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = write!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="monospace" font-size="14">{}</text>"#,
        W / 2.0,
        title
    );
    // Axes.
    let _ = write!(
        svg,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    );
    let _ = write!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="monospace" font-size="12">{}</text>"#,
        W / 2.0,
        H - 16.0,
        x_label
    );
    let _ = write!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="monospace" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        y_label
    );
    // Axis extremes.
    for (v, x, y, anchor) in [
        (x0, px(x0), H - MARGIN + 16.0, "middle"),
        (x1, px(x1), H - MARGIN + 16.0, "middle"),
    ] {
        let _ = write!(
            svg,
            r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-family="monospace" font-size="10">{v:.2}</text>"#
        );
    }
    for (v, y) in [(y0, py(y0)), (y1, py(y1))] {
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="monospace" font-size="10">{:.2}</text>"#,
            MARGIN - 6.0,
            y + 4.0,
            v
        );
    }
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = write!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            pts.join(" "),
            color(i)
        );
        for &(x, y) in &s.points {
            let _ = write!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
                px(x),
                py(y),
                color(i)
            );
        }
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="12" fill="{}">{}</text>"#,
            W - MARGIN + 6.0,
            MARGIN + 16.0 * i as f64,
            color(i),
            s.label
        );
    }
    svg.push_str("</svg>");
    svg
}

/// Grayscale heatmap; rows render top to bottom.
pub fn heatmap(title: &str, rows: &[Vec<f64>]) -> String {
    let nr = rows.len().max(1);
    let nc = rows.iter().map(|r| r.len()).max().unwrap_or(1).max(1);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for row in rows {
        for &v in row {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || (hi - lo).abs() < 1e-12 {
        lo = 0.0;
        hi = 1.0;
    }
    let cw = (W - 2.0 * MARGIN) / nc as f64;
    let ch = (H - 2.0 * MARGIN) / nr as f64;
    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = write!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="monospace" font-size="14">{}</text>"#,
        W / 2.0,
        title
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - (v - lo) / (hi - lo))).round() as u8;
            let _ = write!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({shade},{shade},{shade})"/>"#,
                MARGIN + c as f64 * cw,
                MARGIN + r as f64 * ch,
                cw.max(1.0),
                ch.max(1.0)
            );
        }
    }
    svg.push_str("</svg>");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_valid_svg_shells() {
        let svg = line_chart(
            "t",
            "x",
            "y",
            &[Series {
                label: "a".into(),
                points: vec![(0.0, 0.0), (1.0, 2.0)],
            }],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>"));
        assert!(svg.contains("polyline"));

        let hm = heatmap("h", &[vec![0.0, 1.0], vec![0.5, 0.25]]);
        assert!(hm.contains("rect"));
    }
}
