//! Static SVG rendering of a glucose trace.

use std::fmt::Write as _;

use aidtwin_core::safety::TARGET_BAND;
use aidtwin_core::GlucoseTrace;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 320.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 24.0;
const BOTTOM: f64 = 40.0;

fn nice_step(span: f64, target_ticks: f64) -> f64 {
    let raw = span / target_ticks;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].into_iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

/// Glucose line over the shaded target band, with axes in minutes and mg/dL.
pub fn trace_svg(trace: &GlucoseTrace, title: &str) -> String {
    let (t0, t1) = (trace.t0, trace.end_time().max(trace.t0 + trace.dt));
    let g_min = trace.samples.iter().copied().fold(f64::INFINITY, f64::min);
    let g_max = trace.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = (g_min.min(TARGET_BAND.0) - 20.0).max(0.0).floor();
    let hi = (g_max.max(TARGET_BAND.1) + 20.0).ceil();
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |t: f64| LEFT + (t - t0) / (t1 - t0) * plot_w;
    let y = |g: f64| TOP + (hi - g) / (hi - lo) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{LEFT}" y="16" font-size="13">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r##"<rect class="target-band" x="{LEFT:.2}" y="{:.2}" width="{plot_w:.2}" height="{:.2}" fill="#2e8b57" fill-opacity="0.15"/>"##,
        y(TARGET_BAND.1),
        y(TARGET_BAND.0) - y(TARGET_BAND.1)
    );
    for g in [TARGET_BAND.0, TARGET_BAND.1] {
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.2}" x2="{:.2}" y1="{yy:.2}" y2="{yy:.2}" stroke="#2e8b57" stroke-dasharray="4 3"/>"##,
            LEFT + plot_w,
            yy = y(g)
        );
    }

    let gs = nice_step(hi - lo, 6.0);
    let mut g = (lo / gs).ceil() * gs;
    while g <= hi {
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" x2="{LEFT:.2}" y1="{yy:.2}" y2="{yy:.2}" stroke="#444"/><text x="{:.2}" y="{:.2}" text-anchor="end">{g}</text>"##,
            LEFT - 4.0,
            LEFT - 6.0,
            y(g) + 4.0,
            yy = y(g)
        );
        g += gs;
    }
    let ts = nice_step(t1 - t0, 8.0);
    let mut t = (t0 / ts).ceil() * ts;
    while t <= t1 + 1e-9 {
        let _ = writeln!(
            s,
            r##"<line x1="{xx:.2}" x2="{xx:.2}" y1="{:.2}" y2="{:.2}" stroke="#444"/><text x="{xx:.2}" y="{:.2}" text-anchor="middle">{t}</text>"##,
            TOP + plot_h,
            TOP + plot_h + 4.0,
            TOP + plot_h + 16.0,
            xx = x(t)
        );
        t += ts;
    }
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="#444"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">time (min)</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 6.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(14 {:.2}) rotate(-90)" text-anchor="middle">glucose (mg/dL)</text>"#,
        TOP + plot_h / 2.0
    );

    let points: Vec<String> =
        trace.samples.iter().enumerate().map(|(i, &g)| format!("{:.2},{:.2}", x(trace.time_at(i)), y(g))).collect();
    let _ = writeln!(
        s,
        r##"<polyline class="glucose" points="{}" fill="none" stroke="#1f4e9c" stroke-width="1.8"/>"##,
        points.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
