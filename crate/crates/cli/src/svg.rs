//! Hand-written SVG for an EDC curve: one polyline, two linear axes with ten
//! labelled ticks each, and the operating-point annotation.

use std::fmt::Write;

use vitfiqa::eval::{EdcCurve, EdcSummary};

const W: f64 = 800.0;
const H: f64 = 600.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;

pub fn edc_svg(curve: &EdcCurve, summary: &EdcSummary) -> String {
    let x_max = 1.0;
    let peak = curve.fnmr.iter().cloned().fold(0.0, f64::max);
    // Round the y range up to a tenth of a power of ten so tick labels stay short.
    let y_max = if peak <= 0.0 {
        1.0
    } else {
        let unit = 10f64.powf(peak.log10().floor());
        ((peak / unit * 10.0).ceil() / 10.0 * unit)
            .min(1.0)
            .max(peak)
    };
    let px = |d: f64| LEFT + d / x_max * (W - LEFT - RIGHT);
    let py = |f: f64| H - BOTTOM - f / y_max * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (x0, y0, x1, y1) = (px(0.0), py(0.0), px(x_max), py(y_max));
    let _ = writeln!(
        s,
        r#"<path d="M{x0:.2} {y1:.2} V{y0:.2} H{x1:.2}" fill="none" stroke="black"/>"#
    );
    for i in 1..=10 {
        let d = x_max * i as f64 / 10.0;
        let x = px(d);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{d:.1}</text>"#,
            y0 + 5.0,
            y0 + 20.0
        );
        let f = y_max * i as f64 / 10.0;
        let y = py(f);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0,
            tick_label(f)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">fraction of comparisons discarded</text>"#,
        (x0 + x1) / 2.0,
        H - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(20 {:.2}) rotate(-90)" text-anchor="middle">FNMR</text>"#,
        (y0 + y1) / 2.0
    );
    let points: Vec<String> = curve
        .grid
        .iter()
        .zip(&curve.fnmr)
        .map(|(&d, &f)| format!("{:.2},{:.2}", px(d), py(f)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        points.join(" ")
    );
    let t = &summary.threshold;
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}">τ = {:.6} at FMR {:e} (achieved {:e}{}), pAUC30 = {:.6}, AUC = {:.6}</text>"#,
        x0,
        TOP - 20.0,
        t.tau,
        t.target_fmr,
        t.achieved_fmr,
        if t.unsaturated { ", unsaturated" } else { "" },
        summary.pauc30,
        summary.auc
    );
    s.push_str("</svg>\n");
    s
}

fn tick_label(v: f64) -> String {
    let text = format!("{v:.6}");
    text.trim_end_matches('0').trim_end_matches('.').to_string()
}
