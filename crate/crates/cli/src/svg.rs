use std::fmt::Write as _;

const PALETTE: [&str; 8] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666",
];
const SIZE: f64 = 480.0;
const MARGIN: f64 = 40.0;

/// Scatter plot of 2-D points colored by cluster.
pub fn scatter_svg(points: &[Vec<f64>], clusters: &[usize], k: usize) -> String {
    let xy: Vec<(f64, f64)> = points
        .iter()
        .map(|p| {
            (
                p.first().copied().unwrap_or(0.0),
                p.get(1).copied().unwrap_or(0.0),
            )
        })
        .collect();
    let range = |f: fn(&(f64, f64)) -> f64| {
        let lo = xy.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = xy.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() && hi > lo {
            (lo, hi)
        } else {
            (lo.min(0.0) - 1.0, lo.max(0.0) + 1.0)
        }
    };
    let (x0, x1) = range(|p| p.0);
    let (y0, y1) = range(|p| p.1);
    let inner = SIZE - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * inner;
    let sy = |y: f64| SIZE - MARGIN - (y - y0) / (y1 - y0) * inner;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{inner}" height="{inner}" fill="none" stroke="gray"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">pc1</text>"#,
        SIZE / 2.0,
        SIZE - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">pc2</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    for (&(x, y), &c) in xy.iter().zip(clusters) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
            sx(x),
            sy(y),
            PALETTE[c % PALETTE.len()]
        );
    }
    for c in 0..k {
        let y = MARGIN + 14.0 * c as f64 + 10.0;
        let _ = writeln!(
            s,
            r#"<circle cx="{}" cy="{y}" r="4" fill="{}"/><text x="{}" y="{}" font-size="11">stage {c}</text>"#,
            SIZE - MARGIN - 60.0,
            PALETTE[c % PALETTE.len()],
            SIZE - MARGIN - 52.0,
            y + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_circle_per_point_plus_legend() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![1.0, 0.0]];
        let svg = scatter_svg(&pts, &[0, 1, 1], 2);
        assert_eq!(svg.matches("<circle").count(), 3 + 2);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        let flat = scatter_svg(&[vec![1.0, 1.0], vec![1.0, 1.0]], &[0, 0], 1);
        assert!(!flat.contains("NaN"));
    }
}
