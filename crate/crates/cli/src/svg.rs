//! Minimal SVG DET plot: log-log axes, one polyline per curve.

use dmad_core::metrics::DetPoint;

const W: f64 = 560.0;
const H: f64 = 560.0;
const MARGIN: f64 = 70.0;
/// Rates of exactly 0% cannot sit on a log axis; clamp to this floor.
const FLOOR: f64 = 0.05;
const CEIL: f64 = 100.0;

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn project(rate: f64) -> f64 {
    let r = rate.clamp(FLOOR, CEIL);
    (r / FLOOR).ln() / (CEIL / FLOOR).ln()
}

fn x_px(macer: f64) -> f64 {
    MARGIN + project(macer) * (W - 2.0 * MARGIN)
}

fn y_px(bscer: f64) -> f64 {
    H - MARGIN - project(bscer) * (H - 2.0 * MARGIN)
}

/// Renders one or more labelled DET curves (MACER on x, BSCER on y).
pub fn render_det_svg(curves: &[(String, Vec<DetPoint>)]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    // gridlines at decade ticks
    for tick in [0.1, 1.0, 10.0, 100.0] {
        let x = x_px(tick);
        let y = y_px(tick);
        s.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{m}\" x2=\"{x:.1}\" y2=\"{b}\" stroke=\"#ddd\"/>\n",
            m = MARGIN,
            b = H - MARGIN
        ));
        s.push_str(&format!(
            "<line x1=\"{m}\" y1=\"{y:.1}\" x2=\"{r}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n",
            m = MARGIN,
            r = W - MARGIN
        ));
        s.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{yy}\" font-size=\"11\" text-anchor=\"middle\">{tick}</text>\n",
            yy = H - MARGIN + 16.0
        ));
        s.push_str(&format!(
            "<text x=\"{xx}\" y=\"{y:.1}\" font-size=\"11\" text-anchor=\"end\">{tick}</text>\n",
            xx = MARGIN - 6.0
        ));
    }
    s.push_str(&format!(
        "<rect x=\"{m}\" y=\"{m}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#333\"/>\n",
        m = MARGIN,
        w = W - 2.0 * MARGIN,
        h = H - 2.0 * MARGIN
    ));
    s.push_str(&format!(
        "<text x=\"{cx}\" y=\"{yy}\" font-size=\"13\" text-anchor=\"middle\">MACER (%)</text>\n",
        cx = W / 2.0,
        yy = H - MARGIN + 40.0
    ));
    s.push_str(&format!(
        "<text x=\"18\" y=\"{cy}\" font-size=\"13\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {cy})\">BSCER (%)</text>\n",
        cy = H / 2.0
    ));

    for (i, (label, points)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_px(p.macer), y_px(p.bscer)))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            x = MARGIN + 10.0,
            y = MARGIN + 18.0 + 16.0 * i as f64
        ));
    }
    s.push_str("</svg>\n");
    s
}
