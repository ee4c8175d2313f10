//! Dependency-free SVG rendering of coefficient panels: estimate curve,
//! pointwise band, and joint band(s) over the sleep window in hours.
//! Output bytes are a pure function of the inputs.

use crate::artifacts::InferCurve;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

struct Scale {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Scale {
    fn x(&self, hours: f64) -> f64 {
        MARGIN_L + (hours - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_L - MARGIN_R)
    }
    fn y(&self, v: f64) -> f64 {
        let frac = (v - self.y0) / (self.y1 - self.y0);
        HEIGHT - MARGIN_B - frac * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn polyline(points: impl Iterator<Item = (f64, f64)>) -> String {
    points
        .map(|(x, y)| format!("{},{}", fmt(x), fmt(y)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Choose a round tick step covering `span` with roughly `target` ticks.
fn nice_step(span: f64, target: usize) -> f64 {
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.abs().log10().floor());
    for mult in [1.0, 2.0, 5.0, 10.0] {
        if mag * mult >= raw {
            return mag * mult;
        }
    }
    mag * 10.0
}

/// Render one covariate panel. The x axis spans the window in hours
/// (0 to 7 for the default grid).
pub fn render_panel(curve: &InferCurve) -> String {
    let hours: Vec<f64> = curve.t_min.iter().map(|t| t / 60.0).collect();
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    let mut track = |v: f64| {
        y_min = y_min.min(v);
        y_max = y_max.max(v);
    };
    for k in 0..hours.len() {
        track(curve.estimate_boot[k]);
        track(curve.pw_lower[k]);
        track(curve.pw_upper[k]);
        for (_, lo, hi) in &curve.joint {
            track(lo[k]);
            track(hi[k]);
        }
    }
    track(0.0); // always show the zero line
    let pad = 0.05 * (y_max - y_min).max(1e-12);
    let scale = Scale {
        x0: 0.0,
        x1: hours.last().copied().unwrap_or(7.0).max(1.0).ceil(),
        y0: y_min - pad,
        y1: y_max + pad,
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        fmt(WIDTH / 2.0),
        curve.covariate
    ));

    // Joint bands, widest level first so narrower ones stay visible.
    let mut joint: Vec<_> = curve.joint.iter().collect();
    joint.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (alpha, lo, hi) in joint {
        let mut pts: Vec<(f64, f64)> = hours
            .iter()
            .zip(hi)
            .map(|(&h, &v)| (scale.x(h), scale.y(v)))
            .collect();
        pts.extend(
            hours
                .iter()
                .zip(lo)
                .rev()
                .map(|(&h, &v)| (scale.x(h), scale.y(v))),
        );
        svg.push_str(&format!(
            "<polygon points=\"{}\" fill=\"#4477aa\" fill-opacity=\"0.18\" stroke=\"none\"><title>joint band, alpha={alpha}</title></polygon>\n",
            polyline(pts.into_iter())
        ));
    }

    // Pointwise band as dashed envelopes.
    for band in [&curve.pw_lower, &curve.pw_upper] {
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#4477aa\" stroke-width=\"1\" stroke-dasharray=\"5,4\"/>\n",
            polyline(hours.iter().zip(band.iter()).map(|(&h, &v)| (scale.x(h), scale.y(v))))
        ));
    }

    // Zero reference and the estimate itself.
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999999\" stroke-width=\"1\"/>\n",
        fmt(scale.x(scale.x0)),
        fmt(scale.y(0.0)),
        fmt(scale.x(scale.x1)),
        fmt(scale.y(0.0))
    ));
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#222222\" stroke-width=\"2\"/>\n",
        polyline(
            hours
                .iter()
                .zip(curve.estimate_boot.iter())
                .map(|(&h, &v)| (scale.x(h), scale.y(v)))
        )
    ));

    // Axes.
    let axis_y = HEIGHT - MARGIN_B;
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(axis_y),
        fmt(WIDTH - MARGIN_R),
        fmt(axis_y)
    ));
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(MARGIN_L),
        fmt(axis_y)
    ));
    let mut h = 0.0;
    while h <= scale.x1 + 1e-9 {
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n",
            fmt(scale.x(h)),
            fmt(axis_y),
            fmt(axis_y + 5.0)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            fmt(scale.x(h)),
            fmt(axis_y + 20.0),
            h as i64
        ));
        h += 1.0;
    }
    let step = nice_step(scale.y1 - scale.y0, 6);
    let mut v = (scale.y0 / step).ceil() * step;
    while v <= scale.y1 + 1e-9 * step {
        svg.push_str(&format!(
            "<line x1=\"{1}\" y1=\"{0}\" x2=\"{2}\" y2=\"{0}\" stroke=\"black\"/>\n",
            fmt(scale.y(v)),
            fmt(MARGIN_L - 5.0),
            fmt(MARGIN_L)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            fmt(MARGIN_L - 9.0),
            fmt(scale.y(v) + 4.0),
            format_tick(v)
        ));
        v += step;
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">hours from sleep onset</text>\n",
        fmt((MARGIN_L + WIDTH - MARGIN_R) / 2.0),
        fmt(HEIGHT - 12.0)
    ));
    svg.push_str("</svg>\n");
    svg
}

fn format_tick(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e6 {
        format!("{}", v as i64)
    } else {
        format!("{v:.3}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_curve() -> InferCurve {
        let k = 84;
        let t_min: Vec<f64> = (1..=k).map(|i| 5.0 * i as f64).collect();
        let est: Vec<f64> = t_min.iter().map(|t| (t / 100.0).sin()).collect();
        InferCurve {
            covariate: "osa".into(),
            t_min,
            estimate_boot: est.clone(),
            estimate_raw: est.clone(),
            se_model: vec![0.3; k],
            se_boot: vec![0.25; k],
            pw_lower: est.iter().map(|v| v - 0.6).collect(),
            pw_upper: est.iter().map(|v| v + 0.6).collect(),
            joint: vec![(
                0.05,
                est.iter().map(|v| v - 0.8).collect(),
                est.iter().map(|v| v + 0.8).collect(),
            )],
        }
    }

    #[test]
    fn panel_is_deterministic_and_spans_axis() {
        let curve = demo_curve();
        let a = render_panel(&curve);
        let b = render_panel(&curve);
        assert_eq!(a, b);
        assert!(a.contains("hours from sleep onset"));
        assert!(a.contains(">7<")); // final hour tick
        assert!(a.starts_with("<svg"));
    }
}
