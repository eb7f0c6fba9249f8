//! Minimal static SVG line charts for metric logs.

use std::fmt::Write;

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One chart with a shared axis per series set. Non-finite points are dropped.
pub fn line_chart(title: &str, x_label: &str, series: &[Series<'_>]) -> String {
    let pts = || {
        series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
    };
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    for (v, y) in [(y0, H - PAD), (y1, PAD)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{:.4}</text>"#,
            PAD - 4.0,
            y + 4.0,
            v
        );
    }
    for (v, x) in [(x0, PAD), (x1, W - PAD)] {
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{}" text-anchor="middle">{v}</text>"#,
            H - PAD + 14.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 10.0,
        escape(x_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                path.join(" ")
            );
        }
        let ly = PAD + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#,
            W - PAD - 4.0,
            escape(s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_polyline_per_series() {
        let svg = line_chart(
            "loss <total>",
            "step",
            &[
                Series {
                    label: "a",
                    points: vec![(0.0, 1.0), (1.0, 0.5)],
                },
                Series {
                    label: "b",
                    points: vec![(0.0, f64::NAN)],
                },
            ],
        );
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("loss &lt;total&gt;"));
        assert!(svg.ends_with("</svg>\n"));
    }
}
