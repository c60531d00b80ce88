//! Minimal SVG scatter plots of 2-D point clouds. A convenience view; the
//! CSV files are the record.

use std::fmt::Write;

/// Renders the first two coordinates of each point; the view box is the
/// bounding box padded by 5%.
pub fn scatter_svg(points: &[f64], d: usize, title: &str) -> String {
    const SIZE: f64 = 400.0;
    let pts: Vec<(f64, f64)> = points
        .chunks_exact(d)
        .map(|p| (p[0], if d > 1 { p[1] } else { 0.0 }))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if pts.is_empty() {
        (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9) * 1.1;
    let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let map = |x: f64, y: f64| ((x - cx) / span * SIZE + SIZE / 2.0, SIZE / 2.0 - (y - cy) / span * SIZE);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{}" viewBox="0 0 {SIZE} {}">"#,
        SIZE + 20.0,
        SIZE + 20.0
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="6" y="{}" font-size="12" font-family="monospace">{}</text>"#, SIZE + 14.0, escape(title));
    for (x, y) in pts {
        let (px, py) = map(x, y);
        let _ = writeln!(s, r##"<circle cx="{px:.2}" cy="{py:.2}" r="1.2" fill="#1f4e99" fill-opacity="0.5"/>"##);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
