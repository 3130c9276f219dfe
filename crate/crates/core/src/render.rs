//! SVG drawing of a dendrogram with a horizontal threshold line.

use std::fmt::Write;

use crate::cluster::{cut_dendrogram, Dendrogram};
use crate::error::{Error, Result};

/// Vertical segment from a node at `bottom` up to its parent at `top`. The
/// root's segment ends at `+∞`; leaves start at `−∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stem {
    pub node: usize,
    pub x: f64,
    pub bottom: f64,
    pub top: f64,
}

/// Dendrogram geometry in data coordinates: leaves at integer x positions in
/// drawing order, nodes at their merge height.
#[derive(Debug, Clone, PartialEq)]
pub struct DendrogramLayout {
    pub leaf_order: Vec<usize>,
    pub node_x: Vec<f64>,
    pub node_y: Vec<f64>,
    pub stems: Vec<Stem>,
}

impl DendrogramLayout {
    pub fn new(dend: &Dendrogram) -> Result<Self> {
        dend.validate()?;
        let n = dend.n;
        let total = 2 * n - 1;
        let mut leaf_order = Vec::with_capacity(n);
        let root = total - 1;
        let mut stack = vec![root];
        while let Some(node) = stack.pop() {
            if node < n {
                leaf_order.push(node);
            } else {
                let m = dend.merges[node - n];
                stack.push(m.right);
                stack.push(m.left);
            }
        }
        let mut node_x = vec![0.0; total];
        let mut node_y = vec![f64::NEG_INFINITY; total];
        for (pos, &leaf) in leaf_order.iter().enumerate() {
            node_x[leaf] = pos as f64;
        }
        let mut parent_y = vec![f64::INFINITY; total];
        for m in &dend.merges {
            node_x[m.id] = 0.5 * (node_x[m.left] + node_x[m.right]);
            node_y[m.id] = m.height;
            parent_y[m.left] = m.height;
            parent_y[m.right] = m.height;
        }
        let stems = (0..total)
            .map(|node| Stem {
                node,
                x: node_x[node],
                bottom: node_y[node],
                top: parent_y[node],
            })
            .collect();
        Ok(Self {
            leaf_order,
            node_x,
            node_y,
            stems,
        })
    }

    /// Number of stems crossing the horizontal line at `threshold`.
    pub fn crossings(&self, threshold: f64) -> usize {
        self.stems
            .iter()
            .filter(|s| s.bottom <= threshold && threshold < s.top)
            .count()
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders `dend` with leaves along the x-axis, merge heights on the y-axis
/// and a red line at `threshold`.
pub fn render_svg(dend: &Dendrogram, threshold: f64) -> Result<String> {
    if !threshold.is_finite() {
        return Err(Error::Format(format!("threshold must be finite, got {threshold}")));
    }
    let layout = DendrogramLayout::new(dend)?;
    let k_hat = cut_dendrogram(dend, threshold).k();
    let n = dend.n;

    let heights = dend.heights();
    let hmax = heights.iter().copied().fold(threshold, f64::max);
    let hmin = heights.iter().copied().fold(threshold, f64::min).min(0.0);
    let span = (hmax - hmin).max(1e-9);
    let base = hmin - 0.08 * span;
    let top = hmax + 0.08 * span;

    let (width, height) = ((80.0 + 24.0 * n as f64).max(320.0), 420.0);
    let (left, right, upper, lower) = (60.0, 20.0, 40.0, 70.0);
    let px = |x: f64| left + (x + 0.5) / n as f64 * (width - left - right);
    let py = |y: f64| {
        let y = y.clamp(base, top);
        upper + (top - y) / (top - base) * (height - upper - lower)
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<title>Dendrogram, estimated number of groups K = {k_hat}</title>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">K̂₀ = {k_hat} (threshold {threshold:.4})</text>"#,
        width / 2.0
    );

    // y axis with a few ticks
    let _ = writeln!(
        svg,
        r#"<line class="axis" x1="{left}" y1="{}" x2="{left}" y2="{}" stroke="black"/>"#,
        py(base),
        py(top)
    );
    for k in 0..=4 {
        let v = base + (top - base) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#,
            left - 6.0,
            py(v) + 4.0
        );
    }

    let _ = writeln!(svg, r#"<g class="tree" stroke="black" stroke-width="1.2">"#);
    for s in &layout.stems {
        let (y1, y2) = (py(s.bottom), py(s.top));
        let _ = writeln!(
            svg,
            r#"<line class="stem" x1="{x:.3}" y1="{y1:.3}" x2="{x:.3}" y2="{y2:.3}"/>"#,
            x = px(s.x)
        );
    }
    for m in &dend.merges {
        let y = py(m.height);
        let _ = writeln!(
            svg,
            r#"<line class="bar" x1="{:.3}" y1="{y:.3}" x2="{:.3}" y2="{y:.3}"/>"#,
            px(layout.node_x[m.left]),
            px(layout.node_x[m.right])
        );
    }
    let _ = writeln!(svg, "</g>");

    let ty = py(threshold);
    let _ = writeln!(
        svg,
        r#"<line class="threshold" x1="{left}" y1="{ty:.3}" x2="{}" y2="{ty:.3}" stroke="red" stroke-width="1.5"/>"#,
        width - right
    );
    for (pos, &leaf) in layout.leaf_order.iter().enumerate() {
        let x = px(pos as f64);
        let y = py(base) + 8.0;
        let _ = writeln!(
            svg,
            r#"<text x="{x:.3}" y="{y:.3}" transform="rotate(90 {x:.3} {y:.3})">{}</text>"#,
            esc(&dend.leaves[leaf])
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::Merge;

    /// Twelve leaves: six tight pairs at height 0.5, then the pairs join at
    /// heights 3..=7.
    fn six_cluster() -> Dendrogram {
        let n = 12;
        let mut merges = Vec::new();
        for p in 0..6 {
            merges.push(Merge { left: 2 * p, right: 2 * p + 1, height: 0.5 + 0.01 * p as f64, id: n + p });
        }
        let mut acc = n;
        for (r, h) in (3..=7).enumerate() {
            let id = n + 6 + r;
            merges.push(Merge { left: acc, right: n + 1 + r, height: h as f64, id });
            acc = id;
        }
        Dendrogram { n, leaves: (0..n).map(|i| format!("s{i}")).collect(), merges }
    }

    /// Counts `stem` lines in the SVG whose y-range strictly contains the
    /// threshold line's y coordinate.
    fn svg_crossings(svg: &str) -> usize {
        let attr = |line: &str, name: &str| -> f64 {
            let key = format!(" {name}=\"");
            let start = line.find(&key).unwrap() + key.len();
            let end = start + line[start..].find('"').unwrap();
            line[start..end].parse().unwrap()
        };
        let ty = svg.lines().find(|l| l.contains("class=\"threshold\"")).map(|l| attr(l, "y1")).unwrap();
        svg.lines()
            .filter(|l| l.contains("class=\"stem\""))
            .filter(|l| {
                let (a, b) = (attr(l, "y1"), attr(l, "y2"));
                a.max(b) > ty && a.min(b) < ty
            })
            .count()
    }

    #[test]
    fn six_clusters_cross_the_line() {
        let d = six_cluster();
        let layout = DendrogramLayout::new(&d).unwrap();
        assert_eq!(layout.crossings(2.0), 6);
        let svg = render_svg(&d, 2.0).unwrap();
        assert!(svg.contains("K̂₀ = 6"));
        assert_eq!(svg_crossings(&svg), 6);
    }

    #[test]
    fn extreme_thresholds() {
        let d = six_cluster();
        let layout = DendrogramLayout::new(&d).unwrap();
        assert_eq!(layout.crossings(100.0), 1);
        assert_eq!(layout.crossings(0.1), 12);
        for t in [0.1, 0.505, 3.5, 6.0, 100.0] {
            assert_eq!(layout.crossings(t), cut_dendrogram(&d, t).k());
        }
        assert!(render_svg(&d, 100.0).unwrap().contains("K̂₀ = 1"));
        assert!(render_svg(&d, 0.1).unwrap().contains("K̂₀ = 12"));
    }

    #[test]
    fn leaves_follow_tree_order() {
        let d = six_cluster();
        let layout = DendrogramLayout::new(&d).unwrap();
        let mut sorted = layout.leaf_order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
        // Tree order never crosses bars: each merged pair is adjacent.
        for p in 0..6 {
            let a = layout.leaf_order.iter().position(|&l| l == 2 * p).unwrap();
            let b = layout.leaf_order.iter().position(|&l| l == 2 * p + 1).unwrap();
            assert_eq!(a + 1, b);
        }
    }

    #[test]
    fn malformed_input_is_rejected() {
        let mut d = six_cluster();
        d.merges.pop();
        assert!(matches!(render_svg(&d, 1.0), Err(Error::MalformedDendrogram(_))));
    }
}
