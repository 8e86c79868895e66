//! Native SVG scatter plots for 2-D problems: sample clouds, plus an
//! optional line showing the set of points consistent with a linear
//! observation. No plotting dependency; output is deterministic text.

use std::fmt::Write as _;

use crate::error::{ensure, Result};

/// One labelled point cloud.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub color: String,
    pub points: Vec<(f64, f64)>,
}

/// One labelled line segment in data coordinates.
#[derive(Debug, Clone)]
pub struct Line {
    pub label: String,
    pub color: String,
    pub from: (f64, f64),
    pub to: (f64, f64),
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const PAD: f64 = 52.0;

#[derive(Debug, Clone, Copy)]
struct Bounds {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Bounds {
    fn of(series: &[Series], lines: &[Line]) -> Bounds {
        let mut b = Bounds {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        let mut grow = |x: f64, y: f64| {
            b.x0 = b.x0.min(x);
            b.x1 = b.x1.max(x);
            b.y0 = b.y0.min(y);
            b.y1 = b.y1.max(y);
        };
        for s in series {
            for &(x, y) in &s.points {
                grow(x, y);
            }
        }
        for l in lines {
            grow(l.from.0, l.from.1);
            grow(l.to.0, l.to.1);
        }
        // Pad 8% on each side; degenerate ranges get a unit of slack.
        let (dx, dy) = (b.x1 - b.x0, b.y1 - b.y0);
        let (mx, my) = (
            if dx > 0.0 { 0.08 * dx } else { 1.0 },
            if dy > 0.0 { 0.08 * dy } else { 1.0 },
        );
        Bounds {
            x0: b.x0 - mx,
            x1: b.x1 + mx,
            y0: b.y0 - my,
            y1: b.y1 + my,
        }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - PAD - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * PAD)
    }
}

/// Render a scatter plot of the given series and lines. All coordinates are
/// written with four decimals so identical inputs give identical bytes.
pub fn scatter_svg(title: &str, series: &[Series], lines: &[Line]) -> Result<String> {
    ensure!(
        series.iter().any(|s| !s.points.is_empty()) || !lines.is_empty(),
        "nothing to plot"
    );
    let b = Bounds::of(series, lines);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.4}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        xml_escape(title)
    );
    // Axis frame and corner labels.
    let _ = writeln!(
        svg,
        r##"<rect x="{PAD}" y="{PAD}" width="{:.4}" height="{:.4}" fill="none" stroke="#888"/>"##,
        WIDTH - 2.0 * PAD,
        HEIGHT - 2.0 * PAD
    );
    for (val, x, y, anchor) in [
        (b.x0, PAD, HEIGHT - PAD + 16.0, "middle"),
        (b.x1, WIDTH - PAD, HEIGHT - PAD + 16.0, "middle"),
        (b.y0, PAD - 6.0, HEIGHT - PAD, "end"),
        (b.y1, PAD - 6.0, PAD + 4.0, "end"),
    ] {
        let _ = writeln!(
            svg,
            r#"<text x="{x:.4}" y="{y:.4}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{val:.3}</text>"#
        );
    }
    for l in lines {
        let _ = writeln!(
            svg,
            r#"<line x1="{:.4}" y1="{:.4}" x2="{:.4}" y2="{:.4}" stroke="{}" stroke-width="1.5" stroke-dasharray="6 3"/>"#,
            b.px(l.from.0),
            b.py(l.from.1),
            b.px(l.to.0),
            b.py(l.to.1),
            l.color
        );
    }
    for s in series {
        for &(x, y) in &s.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.4}" cy="{:.4}" r="2.5" fill="{}" fill-opacity="0.55"/>"#,
                b.px(x),
                b.py(y),
                s.color
            );
        }
    }
    // Legend, top-right inside the frame.
    let mut row = 0usize;
    let mut legend = |label: &str, color: &str, svg: &mut String| {
        let y = PAD + 16.0 + 18.0 * row as f64;
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.4}" cy="{:.4}" r="4" fill="{color}"/>"#,
            WIDTH - PAD - 150.0,
            y - 4.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.4}" y="{y:.4}" font-family="sans-serif" font-size="12">{}</text>"#,
            WIDTH - PAD - 140.0,
            xml_escape(label)
        );
        row += 1;
    };
    for s in series {
        legend(&s.label, &s.color, &mut svg);
    }
    for l in lines {
        legend(&l.label, &l.color, &mut svg);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Clip the line a·x = c (with a = (a0, a1) in 2-D) to a bounding box;
/// returns the segment's endpoints, or None if the line misses the box.
pub fn clip_constraint(
    a: (f64, f64),
    c: f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
) -> Option<((f64, f64), (f64, f64))> {
    let mut hits: Vec<(f64, f64)> = Vec::new();
    let to_bits = |p: (f64, f64)| (p.0.to_bits(), p.1.to_bits());
    let mut push = |p: (f64, f64)| {
        if !hits.iter().any(|q| to_bits(*q) == to_bits(p)) {
            hits.push(p);
        }
    };
    let eps = 1e-12;
    if a.1.abs() > eps {
        for x in [x_range.0, x_range.1] {
            let y = (c - a.0 * x) / a.1;
            if y >= y_range.0 - eps && y <= y_range.1 + eps {
                push((x, y.clamp(y_range.0, y_range.1)));
            }
        }
    }
    if a.0.abs() > eps {
        for y in [y_range.0, y_range.1] {
            let x = (c - a.1 * y) / a.0;
            if x >= x_range.0 - eps && x <= x_range.1 + eps {
                push((x.clamp(x_range.0, x_range.1), y));
            }
        }
    }
    if hits.len() >= 2 {
        Some((hits[0], hits[1]))
    } else {
        None
    }
}
