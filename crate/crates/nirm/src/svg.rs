//! Hand-written SVG for trajectory overlays and the ablation bar chart.

use std::fmt::Write as _;

use nirm_core::metrics::AblationRow;
use nirm_core::models::Trajectory;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// One labelled panel per `(label, truth, prediction)`; lateral displacement
/// runs left to right, longitudinal bottom to top, both panels share a scale.
pub fn overlay(title: &str, panels: &[(String, &Trajectory, &Trajectory)]) -> String {
    const PANEL: f64 = 180.0;
    const PAD: f64 = 24.0;
    let cols = panels.len().clamp(1, 4);
    let rows = panels.len().div_ceil(cols).max(1);
    let width = cols as f64 * (PANEL + PAD) + PAD;
    let height = rows as f64 * (PANEL + PAD + 14.0) + PAD + 20.0;

    let extent = panels
        .iter()
        .flat_map(|(_, t, p)| t.points.iter().chain(&p.points))
        .flat_map(|q| [q.longitudinal.abs(), q.lateral.abs()])
        .filter(|v| v.is_finite())
        .fold(1.0f64, f64::max);
    let scale = (PANEL / 2.0 - 6.0) / extent;

    let mut s = header(width, height);
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"18\" font-size=\"13\">{}</text>",
        escape(title)
    );
    for (i, (label, truth, pred)) in panels.iter().enumerate() {
        let x0 = PAD + (i % cols) as f64 * (PANEL + PAD);
        let y0 = 30.0 + (i / cols) as f64 * (PANEL + PAD + 14.0);
        let (cx, cy) = (x0 + PANEL / 2.0, y0 + PANEL / 2.0);
        let _ = writeln!(
            s,
            "<rect x=\"{x0}\" y=\"{y0}\" width=\"{PANEL}\" height=\"{PANEL}\" fill=\"none\" stroke=\"#bbb\"/>"
        );
        let _ = writeln!(
            s,
            "<line x1=\"{x0}\" y1=\"{cy}\" x2=\"{}\" y2=\"{cy}\" stroke=\"#eee\"/>\
             <line x1=\"{cx}\" y1=\"{y0}\" x2=\"{cx}\" y2=\"{}\" stroke=\"#eee\"/>",
            x0 + PANEL,
            y0 + PANEL
        );
        for (traj, style) in [
            (truth, "stroke=\"#1f77b4\" stroke-width=\"2\""),
            (pred, "stroke=\"#d62728\" stroke-width=\"1.5\" stroke-dasharray=\"4 3\""),
        ] {
            let mut pts = format!("{cx:.2},{cy:.2}");
            for q in &traj.points {
                // Lateral is positive to the left of the heading.
                let _ = write!(pts, " {:.2},{:.2}", cx - q.lateral * scale, cy - q.longitudinal * scale);
            }
            let _ = writeln!(s, "<polyline points=\"{pts}\" fill=\"none\" {style}/>");
        }
        let _ = writeln!(
            s,
            "<text x=\"{x0}\" y=\"{}\">{}</text>",
            y0 + PANEL + 13.0,
            escape(label)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"{}\" fill=\"#1f77b4\">truth</text>\
         <text x=\"{}\" y=\"{}\" fill=\"#d62728\">prediction</text>",
        height - 6.0,
        PAD + 40.0,
        height - 6.0
    );
    s.push_str("</svg>\n");
    s
}

/// Grouped bars of in-domain and OOD ADE per variant, with ±1 std whiskers.
pub fn bar_chart(rows: &[AblationRow]) -> String {
    const LEFT: f64 = 56.0;
    const TOP: f64 = 30.0;
    const PLOT_H: f64 = 240.0;
    const GROUP: f64 = 110.0;
    let width = LEFT + GROUP * rows.len().max(1) as f64 + 20.0;
    let height = TOP + PLOT_H + 70.0;

    let top = rows
        .iter()
        .flat_map(|r| {
            [
                r.in_domain_ade.zip(r.in_domain_std).map(|(m, s)| m + s),
                r.ood_ade.zip(r.ood_std).map(|(m, s)| m + s),
            ]
        })
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let ymax = if top > 0.0 { nice_ceiling(top) } else { 1.0 };
    let y = |v: f64| TOP + PLOT_H * (1.0 - v / ymax);

    let mut s = header(width, height);
    let _ = writeln!(
        s,
        "<text x=\"{LEFT}\" y=\"18\" font-size=\"13\">ADE (m), mean ± std over seeds</text>"
    );
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        let _ = writeln!(
            s,
            "<line x1=\"{LEFT}\" y1=\"{yy:.2}\" x2=\"{:.2}\" y2=\"{yy:.2}\" stroke=\"#eee\"/>\
             <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.2}</text>",
            width - 20.0,
            LEFT - 4.0,
            y(v) + 4.0,
            yy = y(v)
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let gx = LEFT + GROUP * i as f64 + 15.0;
        for (j, (m, sd, fill)) in [
            (r.in_domain_ade, r.in_domain_std, "#1f77b4"),
            (r.ood_ade, r.ood_std, "#ff7f0e"),
        ]
        .into_iter()
        .enumerate()
        {
            let bx = gx + 40.0 * j as f64;
            match m {
                Some(m) if m.is_finite() => {
                    let _ = writeln!(
                        s,
                        "<rect x=\"{bx:.2}\" y=\"{:.2}\" width=\"36\" height=\"{:.2}\" fill=\"{fill}\"/>",
                        y(m),
                        (PLOT_H - (y(m) - TOP)).max(0.0)
                    );
                    if let Some(sd) = sd.filter(|v| *v > 0.0) {
                        let _ = writeln!(
                            s,
                            "<line x1=\"{c:.2}\" y1=\"{:.2}\" x2=\"{c:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
                            y(m + sd),
                            y((m - sd).max(0.0)),
                            c = bx + 18.0
                        );
                    }
                }
                _ => {
                    let _ = writeln!(
                        s,
                        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" fill=\"#999\">absent</text>",
                        bx + 18.0,
                        TOP + PLOT_H - 4.0
                    );
                }
            }
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            gx + 38.0,
            TOP + PLOT_H + 16.0,
            escape(r.variant.display_name())
        );
    }
    let ly = height - 16.0;
    let _ = writeln!(
        s,
        "<rect x=\"{LEFT}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"#1f77b4\"/>\
         <text x=\"{:.2}\" y=\"{ly:.2}\">in-domain</text>\
         <rect x=\"{:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"#ff7f0e\"/>\
         <text x=\"{:.2}\" y=\"{ly:.2}\">OOD</text>",
        ly - 9.0,
        LEFT + 14.0,
        LEFT + 90.0,
        ly - 9.0,
        LEFT + 104.0
    );
    s.push_str("</svg>\n");
    s
}

/// Smallest of 1, 2, 2.5 or 5 times a power of ten that is at least `v`.
fn nice_ceiling(v: f64) -> f64 {
    let p = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * p)
        .find(|c| *c >= v)
        .unwrap_or(10.0 * p)
}
