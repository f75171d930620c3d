use std::fmt::Write;

use super::FrocCurve;

const W: f64 = 640.0;
const H: f64 = 440.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 24.0;
const BOTTOM: f64 = 52.0;
const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

/// FROC curves (sensitivity vs FPs per patient) with shaded CI bands, as SVG.
pub fn render_froc_svg(runs: &[(String, FrocCurve)]) -> String {
    let max_fp = runs
        .iter()
        .flat_map(|(_, c)| c.points.iter().map(|p| p.fp_per_patient))
        .fold(0.0, f64::max);
    let x_max = nice_ceiling(max_fp.max(1.0));
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let sx = |f: f64| LEFT + f / x_max * pw;
    let sy = |s: f64| TOP + (1.0 - s) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let (x, y) = (sx(t * x_max), sy(t));
        let _ = writeln!(svg, r##"<line x1="{x:.1}" y1="{TOP}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/>"##, TOP + ph);
        let _ = writeln!(svg, r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, LEFT + pw);
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, TOP + ph + 16.0, fmt_tick(t * x_max));
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{t:.1}</text>"#, LEFT - 6.0, y + 4.0);
    }
    let _ = writeln!(svg, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">FPs per patient</text>"#, LEFT + pw / 2.0, H - 12.0);
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">Sensitivity</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    for (k, (label, curve)) in runs.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts = &curve.points;
        if pts.iter().all(|p| p.ci_lo.is_some() && p.ci_hi.is_some()) && !pts.is_empty() {
            let upper = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.fp_per_patient), sy(p.ci_hi.unwrap_or(p.sensitivity))));
            let lower = pts.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.fp_per_patient), sy(p.ci_lo.unwrap_or(p.sensitivity))));
            let poly: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(svg, r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#, poly.join(" "));
        }
        let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.fp_per_patient), sy(p.sensitivity))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(svg, r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 26.0, ly + 4.0, escape(label));
    }
    svg.push_str("</svg>\n");
    svg
}

fn nice_ceiling(v: f64) -> f64 {
    let mag = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|&c| c >= v).unwrap_or(10.0 * mag)
}

fn fmt_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round())
    } else {
        format!("{v:.1}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
