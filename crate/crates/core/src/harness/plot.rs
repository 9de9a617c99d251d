use std::fmt::Write;

use super::aggregate::AggregateCurve;

const PLOT_WIDTH: f64 = 426.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const CHAR_WIDTH: f64 = 6.5;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub struct PlotSeries<'a> {
    pub label: &'a str,
    pub curve: &'a AggregateCurve,
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Smallest of `{1, 2, 2.5, 5} * 10^k` that is at least `raw`.
fn nice_step(raw: f64) -> f64 {
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw * (1.0 - 1e-12))
        .unwrap_or(10.0 * mag)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Return vs samples: median lines with shaded 20/80 bands, and each
/// baseline as a dashed horizontal line.
pub fn plot_svg(series: &[PlotSeries], baselines: &[(String, f64)]) -> String {
    let points = series.iter().flat_map(|s| s.curve.points.iter());
    let x_max = points.clone().map(|p| p.x).fold(0.0, f64::max);
    let x_step = nice_step(if x_max > 0.0 { x_max / 4.0 } else { 0.25 });
    let x_ticks = ((x_max / x_step).ceil() as usize).max(1);
    let x_max = x_step * x_ticks as f64;
    let ys = points.flat_map(|p| [p.p20, p.p80, p.median]).chain(baselines.iter().map(|b| b.1));
    let (y_min, y_max) = ys.fold((0.0f64, 1.0f64), |(lo, hi), y| (lo.min(y), hi.max(y)));
    let longest = series.iter().map(|s| s.label.chars().count()).chain(baselines.iter().map(|b| b.0.chars().count())).max();
    let right = 40.0 + CHAR_WIDTH * longest.unwrap_or(0) as f64;
    let (pw, ph) = (PLOT_WIDTH, HEIGHT - TOP - BOTTOM);
    let width = LEFT + pw + right;
    let sx = |x: f64| LEFT + x / x_max * pw;
    let sy = |y: f64| TOP + (y_max - y) / (y_max - y_min) * ph;

    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{HEIGHT}" viewBox="0 0 {width} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(w, r#"<rect width="{width}" height="{HEIGHT}" fill="white"/>"#);
    for i in 0..=x_ticks {
        let xv = x_step * i as f64;
        let _ = writeln!(
            w,
            r##"<line x1="{x:.2}" y1="{t:.2}" x2="{x:.2}" y2="{b:.2}" stroke="#e0e0e0"/><text x="{x:.2}" y="{ly:.2}" text-anchor="middle">{l}</text>"##,
            x = sx(xv),
            t = TOP,
            b = TOP + ph,
            ly = TOP + ph + 16.0,
            l = tick_label(xv)
        );
    }
    for i in 0..=4 {
        let yv = y_min + i as f64 / 4.0 * (y_max - y_min);
        let _ = writeln!(
            w,
            r##"<line x1="{l:.2}" y1="{y:.2}" x2="{r:.2}" y2="{y:.2}" stroke="#e0e0e0"/><text x="{lx:.2}" y="{ty:.2}" text-anchor="end">{lab}</text>"##,
            l = LEFT,
            r = LEFT + pw,
            y = sy(yv),
            lx = LEFT - 6.0,
            ty = sy(yv) + 4.0,
            lab = tick_label(yv)
        );
    }
    let _ = writeln!(
        w,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        w,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">samples</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        w,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">return</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    let mut legend_y = TOP + 8.0;
    let legend_x = LEFT + pw + 12.0;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts = &s.curve.points;
        if pts.len() > 1 {
            let band: Vec<String> = pts
                .iter()
                .map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.p80)))
                .chain(pts.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.p20))))
                .collect();
            let _ = writeln!(w, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, band.join(" "));
            let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.median))).collect();
            let _ = writeln!(w, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        } else if let Some(p) = pts.first() {
            let _ = writeln!(
                w,
                r#"<line x1="{x:.2}" y1="{a:.2}" x2="{x:.2}" y2="{b:.2}" stroke="{color}" stroke-opacity="0.4" stroke-width="3"/><circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}"/>"#,
                x = sx(p.x),
                a = sy(p.p80),
                b = sy(p.p20),
                y = sy(p.median)
            );
        }
        let _ = writeln!(
            w,
            r#"<line x1="{legend_x:.2}" y1="{legend_y:.2}" x2="{:.2}" y2="{legend_y:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            legend_x + 18.0,
            legend_x + 24.0,
            legend_y + 4.0,
            escape(s.label)
        );
        legend_y += 16.0;
    }
    for (i, (label, value)) in baselines.iter().enumerate() {
        let color = PALETTE[(series.len() + i) % PALETTE.len()];
        let _ = writeln!(
            w,
            r#"<line x1="{l:.2}" y1="{y:.2}" x2="{r:.2}" y2="{y:.2}" stroke="{color}" stroke-width="1.5" stroke-dasharray="6 4"/>"#,
            l = LEFT,
            r = LEFT + pw,
            y = sy(*value)
        );
        let _ = writeln!(
            w,
            r#"<line x1="{legend_x:.2}" y1="{legend_y:.2}" x2="{:.2}" y2="{legend_y:.2}" stroke="{color}" stroke-width="1.5" stroke-dasharray="6 4"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            legend_x + 18.0,
            legend_x + 24.0,
            legend_y + 4.0,
            escape(label)
        );
        legend_y += 16.0;
    }
    out.push_str("</svg>\n");
    out
}
