//! Minimal fixed-layout SVG charts.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>
"#,
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD / 2.0,
        H - PAD,
        H - PAD,
        W / 2.0,
        H - 12.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label),
    );
}

fn y_axis(out: &mut String, y_max: f64) {
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = H - PAD - (H - 1.5 * PAD) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.0}</text>"#,
            PAD - 4.0,
            y + 4.0,
            v
        );
    }
}

fn top(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.filter(|v| v.is_finite()).fold(0.0_f64, f64::max);
    if m > 0.0 {
        m * 1.1
    } else {
        1.0
    }
}

/// Polyline through `points`, x on a linear axis labelled at each point.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let mut out = String::new();
    frame(&mut out, title, x_label, y_label);
    let y_max = top(points.iter().map(|p| p.1));
    y_axis(&mut out, y_max);
    let (x_lo, x_hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let px = |x: f64| PAD + (W - 1.5 * PAD) * (x - x_lo) / span;
    let py = |y: f64| H - PAD - (H - 1.5 * PAD) * y / y_max;
    let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        path.join(" ")
    );
    for &(x, y) in points {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/><text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(x),
            py(y),
            px(x),
            H - PAD + 16.0,
            x
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One labelled bar per entry.
pub fn bar_chart_svg(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let mut out = String::new();
    frame(&mut out, title, "", y_label);
    let y_max = top(bars.iter().map(|b| b.1));
    y_axis(&mut out, y_max);
    let slot = (W - 1.5 * PAD) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = (H - 1.5 * PAD) * v.max(0.0) / y_max;
        let x = PAD + slot * (i as f64 + 0.15);
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="steelblue"/><text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text><text x="{:.1}" y="{:.1}" text-anchor="middle">{:.1}</text>"#,
            x,
            H - PAD - h,
            slot * 0.7,
            h,
            x + slot * 0.35,
            H - PAD + 16.0,
            escape(label),
            x + slot * 0.35,
            H - PAD - h - 4.0,
            v
        );
    }
    out.push_str("</svg>\n");
    out
}
