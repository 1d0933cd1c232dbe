//! Minimal SVG emitters for precision–recall curves and the dense-caption cell heatmap.

use std::fmt::Write;

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Step-plot of named (recall, precision) curves on the unit square.
pub fn pr_curves_svg(title: &str, curves: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, pad) = (480.0, 400.0, 50.0);
    let x = |r: f64| pad + r * (w - 2.0 * pad);
    let y = |p: f64| h - pad - p * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{}" font-family="sans-serif" font-size="11">"#, h + 14.0 * curves.len() as f64);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, esc(title));
    let _ = writeln!(s, r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#, w - 2.0 * pad, h - 2.0 * pad);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{t:.2}</text>"#, x(t), h - pad + 15.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{t:.2}</text>"#, pad - 5.0, y(t) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">recall</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">precision</text>"#, h / 2.0, h / 2.0);
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = format!("M{:.2},{:.2}", x(0.0), y(pts.first().map_or(0.0, |p| p.1)));
        for &(r, p) in pts {
            let _ = write!(d, " V{:.2} H{:.2}", y(p), x(r));
        }
        let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#);
        let ly = h + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{pad}" y="{ly}" fill="{color}">{}</text>"#, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Grayscale grid of `values[row][col]` in [0, 1].
pub fn heatmap_svg(title: &str, values: &[Vec<f64>], row_labels: &[f64], col_labels: &[f64]) -> String {
    let (cell, left, top) = (60.0, 70.0, 50.0);
    let cols = col_labels.len() as f64;
    let rows = row_labels.len() as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#, left + cols * cell + 20.0, top + rows * cell + 40.0);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, left + cols * cell / 2.0, esc(title));
    for (r, row) in values.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let g = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            let (px, py) = (left + c as f64 * cell, top + r as f64 * cell);
            let ink = if g < 128 { "white" } else { "black" };
            let _ = writeln!(s, r#"<rect x="{px}" y="{py}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})" stroke="gray"/>"#);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{v:.3}</text>"#, px + cell / 2.0, py + cell / 2.0 + 4.0);
        }
    }
    for (r, l) in row_labels.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">IoU {l:.1}</text>"#, left - 6.0, top + r as f64 * cell + cell / 2.0 + 4.0);
    }
    for (c, l) in col_labels.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">M {l:.2}</text>"#, left + c as f64 * cell + cell / 2.0, top + rows * cell + 16.0);
    }
    s.push_str("</svg>\n");
    s
}
