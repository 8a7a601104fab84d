//! Minimal SVG charts for reports: metric-versus-coefficient lines with a
//! dashed reference at zero, accuracy-versus-iterations lines, and quadrant
//! bars. Hand-rolled so emitted bytes are deterministic and replays compare
//! bit-exactly.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 56.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn fmt(x: f64) -> String {
    format!("{x:.2}")
}

fn fmt_tick(x: f64) -> String {
    if (x - x.round()).abs() < 1e-9 {
        format!("{:.0}", x.round())
    } else {
        format!("{x:.2}")
    }
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(1e-12);
        MARGIN_LEFT + (v - self.x_min) / span * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(1e-12);
        HEIGHT - MARGIN_BOTTOM - (v - self.y_min) / span * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn svg_open(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, frame: &Frame, x_label: &str, y_label: &str, x_ticks: &[f64], y_ticks: &[f64]) {
    let x0 = MARGIN_LEFT;
    let x1 = WIDTH - MARGIN_RIGHT;
    let y0 = HEIGHT - MARGIN_BOTTOM;
    let y1 = MARGIN_TOP;
    let _ = write!(
        out,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    );
    for &t in x_ticks {
        let x = frame.x(t);
        let _ = write!(
            out,
            "<line x1=\"{}\" y1=\"{y0}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            fmt(x),
            fmt(x),
            fmt(y0 + 5.0),
            fmt(x),
            fmt(y0 + 18.0),
            fmt_tick(t)
        );
    }
    for &t in y_ticks {
        let y = frame.y(t);
        let _ = write!(
            out,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{x0}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            fmt(x0 - 5.0),
            fmt(y),
            fmt(y),
            fmt(x0 - 8.0),
            fmt(y + 4.0),
            fmt_tick(t)
        );
    }
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        fmt((x0 + x1) / 2.0),
        fmt(HEIGHT - 16.0),
        escape(x_label),
        fmt((y0 + y1) / 2.0),
        fmt((y0 + y1) / 2.0),
        escape(y_label)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A named series of (x, y) points.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn ticks(min: f64, max: f64, count: usize) -> Vec<f64> {
    let span = max - min;
    (0..=count)
        .map(|i| min + span * i as f64 / count as f64)
        .collect()
}

/// Line chart with an optional dashed vertical reference line.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    reference_x: Option<f64>,
) -> String {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let x_min = all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let (x_min, x_max) = if all.is_empty() { (0.0, 1.0) } else { (x_min, x_max) };
    let frame = Frame {
        x_min,
        x_max: if (x_max - x_min).abs() < 1e-12 { x_min + 1.0 } else { x_max },
        y_min: 0.0,
        y_max: 1.0,
    };

    let mut out = String::new();
    svg_open(&mut out, title);
    axes(
        &mut out,
        &frame,
        x_label,
        y_label,
        &ticks(frame.x_min, frame.x_max, 4),
        &ticks(0.0, 1.0, 5),
    );
    if let Some(rx) = reference_x {
        if rx >= frame.x_min && rx <= frame.x_max {
            let x = frame.x(rx);
            let _ = write!(
                out,
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"gray\" stroke-dasharray=\"6 4\"/>\n",
                fmt(x),
                fmt(HEIGHT - MARGIN_BOTTOM),
                fmt(x),
                fmt(MARGIN_TOP)
            );
        }
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut points = String::new();
        for &(x, y) in &s.points {
            let _ = write!(points, "{},{} ", fmt(frame.x(x)), fmt(frame.y(y)));
        }
        let _ = write!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.trim_end()
        );
        for &(x, y) in &s.points {
            let _ = write!(
                out,
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>\n",
                fmt(frame.x(x)),
                fmt(frame.y(y))
            );
        }
        let legend_y = MARGIN_TOP + 16.0 * i as f64;
        let _ = write!(
            out,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            fmt(WIDTH - MARGIN_RIGHT - 140.0),
            fmt(legend_y),
            fmt(WIDTH - MARGIN_RIGHT - 126.0),
            fmt(legend_y + 9.0),
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart over labeled categories; values are fractions of one.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let frame = Frame {
        x_min: 0.0,
        x_max: bars.len().max(1) as f64,
        y_min: 0.0,
        y_max: 1.0,
    };
    let mut out = String::new();
    svg_open(&mut out, title);
    axes(&mut out, &frame, "", y_label, &[], &ticks(0.0, 1.0, 5));
    let slot = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) / bars.len().max(1) as f64;
    for (i, (label, value)) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = MARGIN_LEFT + slot * i as f64 + slot * 0.15;
        let y = frame.y(*value);
        let h = (HEIGHT - MARGIN_BOTTOM) - y;
        let _ = write!(
            out,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            fmt(x),
            fmt(y),
            fmt(slot * 0.7),
            fmt(h),
            fmt(x + slot * 0.35),
            fmt(HEIGHT - MARGIN_BOTTOM + 18.0),
            escape(label),
            fmt(x + slot * 0.35),
            fmt(y - 6.0),
            format!("{:.1}%", value * 100.0)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_deterministic_and_marks_reference() {
        let series = vec![Series {
            name: "error accuracy".into(),
            points: vec![(-1.0, 0.3), (0.0, 0.5), (1.0, 0.62)],
        }];
        let a = line_chart("sweep", "alpha", "accuracy", &series, Some(0.0));
        let b = line_chart("sweep", "alpha", "accuracy", &series, Some(0.0));
        assert_eq!(a, b);
        assert!(a.contains("stroke-dasharray"));
        assert!(a.contains("<polyline"));
    }

    #[test]
    fn bar_chart_renders_all_bars() {
        let bars = vec![
            ("ok/ok".to_string(), 0.818),
            ("ok/bad".to_string(), 0.007),
            ("bad/ok".to_string(), 0.019),
            ("bad/bad".to_string(), 0.156),
        ];
        let svg = bar_chart("quadrants", "proportion", &bars);
        assert_eq!(svg.matches("<rect x=").count(), 4);
        assert!(svg.contains("81.8%"));
    }
}
