//! Minimal SVG 1.1 scatter plots.

use std::fmt::Write;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 40.0;

/// Scatter of `points` with one `<circle>` per point. When `shade` is given,
/// each point is coloured along a blue-to-red ramp by its value.
pub fn scatter_svg(points: &[[f64; 2]], shade: Option<&[f64]>, title: &str) -> String {
    let (lo, hi) = bounds(points.iter().map(|p| p[0]));
    let (ylo, yhi) = bounds(points.iter().map(|p| p[1]));
    let (slo, shi) = bounds(shade.unwrap_or(&[]).iter().copied());
    let span = SIZE - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - lo) / (hi - lo) * span;
    let sy = |y: f64| SIZE - MARGIN - (y - ylo) / (yhi - ylo) * span;

    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{span}" height="{span}" fill="none" stroke="#999"/>"##
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        SIZE / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="10">x [{lo:.3}, {hi:.3}]  y [{ylo:.3}, {yhi:.3}]</text>"#,
        SIZE - 12.0
    );
    let _ = writeln!(out, r#"<g fill-opacity="0.6">"#);
    for (i, p) in points.iter().enumerate() {
        if !(p[0].is_finite() && p[1].is_finite()) {
            continue;
        }
        let fill = match shade {
            Some(v) => ramp((v[i] - slo) / (shi - slo)),
            None => "#1f4e9c".to_string(),
        };
        let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{fill}"/>"#, sx(p[0]), sy(p[1]));
    }
    out.push_str("</g>\n</svg>\n");
    out
}

/// Finite min and max, widened so the span is never zero.
fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn ramp(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.5 };
    let r = (40.0 + 200.0 * t) as u8;
    let b = (220.0 - 180.0 * t) as u8;
    format!("#{r:02x}50{b:02x}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
