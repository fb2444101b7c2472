//! Minimal standalone SVG line charts.

use std::fmt::Write as _;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const WIDTH: f64 = 640.0;
const PANEL_HEIGHT: f64 = 260.0;
const MARGIN: f64 = 48.0;

pub struct Line {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Line {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

pub struct Panel {
    pub title: String,
    pub lines: Vec<Line>,
}

fn bounds(lines: &[Line]) -> (f64, f64, f64, f64) {
    let pts = lines.iter().flat_map(|l| l.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    (x0, x1, y0, y1)
}

fn panel(out: &mut String, p: &Panel, top: f64) {
    let (x0, x1, y0, y1) = bounds(&p.lines);
    let (left, right) = (MARGIN, WIDTH - MARGIN / 2.0);
    let (upper, lower) = (top + MARGIN / 2.0 + 8.0, top + PANEL_HEIGHT - MARGIN / 2.0);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (right - left);
    let sy = |y: f64| lower - (y - y0) / (y1 - y0) * (lower - upper);

    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#, WIDTH / 2.0, top + 18.0, escape(&p.title));
    let _ = writeln!(
        out,
        r##"<rect x="{left:.1}" y="{upper:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#888"/>"##,
        right - left,
        lower - upper
    );
    for (v, y) in [(y1, upper), (y0, lower)] {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#, left - 4.0, y + 4.0, tick(v));
    }
    for (v, x) in [(x0, left), (x1, right)] {
        let _ = writeln!(out, r#"<text x="{x:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#, lower + 14.0, tick(v));
    }
    for (i, line) in p.lines.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = line
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let dash = if line.dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5"{dash} points="{}"/>"#,
            pts.join(" ")
        );
        let ly = upper + 12.0 + 13.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{ly:.1}" font-size="10" fill="{colour}">{}</text>"#,
            left + 6.0,
            escape(&line.name)
        );
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders panels stacked vertically into one document.
pub fn render(panels: &[Panel]) -> String {
    let height = PANEL_HEIGHT * panels.len().max(1) as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height}\" viewBox=\"0 0 {WIDTH} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (i, p) in panels.iter().enumerate() {
        panel(&mut out, p, PANEL_HEIGHT * i as f64);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_one_polyline_per_line() {
        let p = Panel {
            title: "a <b>".into(),
            lines: vec![Line::new("x", vec![(0.0, 1.0), (1.0, 2.0)]), Line::new("y", vec![(0.0, 0.0)]).dashed()],
        };
        let svg = render(&[p]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a &lt;b&gt;"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn flat_and_empty_data_do_not_divide_by_zero() {
        let svg = render(&[Panel {
            title: String::new(),
            lines: vec![Line::new("c", vec![(2.0, 5.0); 3]), Line::new("e", vec![])],
        }]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
