// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use super::RunReport;
use crate::error::{Result, SpectroError};

/// Viridis control points, low to high.
pub const VIRIDIS_STOPS: [[u8; 3]; 5] =
    [[0x44, 0x01, 0x54], [0x3b, 0x52, 0x8b], [0x21, 0x91, 0x8c], [0x5e, 0xc9, 0x62], [0xfd, 0xe7, 0x25]];

/// Piecewise-linear viridis at `t` in `[0, 1]` as `#rrggbb`.
pub fn viridis(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let seg = t * (VIRIDIS_STOPS.len() - 1) as f64;
    let i = (seg.floor() as usize).min(VIRIDIS_STOPS.len() - 2);
    let f = seg - i as f64;
    let (a, b) = (VIRIDIS_STOPS[i], VIRIDIS_STOPS[i + 1]);
    let mix = |c: usize| (f64::from(a[c]) + f * (f64::from(b[c]) - f64::from(a[c]))).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(0), mix(1), mix(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum XAxis {
    /// Sweep index `k`.
    #[default]
    K,
    KeptFraction,
}

#[derive(Debug, Clone, Default)]
pub struct HeatmapAxes {
    pub x: XAxis,
    /// Keep only rows of this family.
    pub family: Option<String>,
    pub title: Option<String>,
}

const CELL_W: f64 = 36.0;
const CELL_H: f64 = 22.0;
const LEFT: f64 = 90.0;
const TOP: f64 = 40.0;
const LEGEND_W: f64 = 140.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders hook sites (rows, ordered by layer) against the swept filter
/// (columns) with mean NLL as color. Diverged cells are white; absent
/// cells are left blank.
pub fn render_heatmap(rows: &[RunReport], axes: &HeatmapAxes) -> Result<String> {
    let cells: Vec<&RunReport> = rows
        .iter()
        .filter(|r| !r.is_baseline() && r.layer.is_some())
        .filter(|r| axes.family.as_ref().is_none_or(|f| &r.family == f))
        .collect();
    if cells.is_empty() {
        return Err(SpectroError::InvalidArgument("no cells to render".into()));
    }

    // x keys ordered numerically; kept fractions compared by millionths
    let x_key = |r: &RunReport| -> (u64, String) {
        match axes.x {
            XAxis::K => {
                let k = r.k.unwrap_or(0);
                (k as u64, k.to_string())
            }
            XAxis::KeptFraction => ((r.kept_fraction * 1e6).round() as u64, format!("{:.3}", r.kept_fraction)),
        }
    };
    let ys: BTreeSet<(usize, &str)> = cells.iter().map(|r| (r.layer.unwrap_or(0), r.site.as_str())).collect();
    let xs: BTreeSet<(u64, String)> = cells.iter().map(|r| x_key(r)).collect();
    let ys: Vec<_> = ys.into_iter().collect();
    let xs: Vec<_> = xs.into_iter().collect();

    let mut grid: BTreeMap<(usize, usize), &RunReport> = BTreeMap::new();
    for r in &cells {
        let yi = ys.iter().position(|y| *y == (r.layer.unwrap_or(0), r.site.as_str())).unwrap_or(0);
        let xi = xs.iter().position(|x| *x == x_key(r)).unwrap_or(0);
        if grid.insert((yi, xi), r).is_some() {
            return Err(SpectroError::InvalidArgument(format!(
                "two rows for site {} at x = {}; select one family",
                r.site,
                x_key(r).1
            )));
        }
    }

    let finite: Vec<f64> = cells.iter().filter_map(|r| r.nll_mean).collect();
    let (lo, hi) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let degenerate = finite.is_empty() || hi - lo <= 0.0;
    let color = |v: f64| {
        if degenerate {
            viridis(0.5)
        } else {
            viridis((v - lo) / (hi - lo))
        }
    };

    let width = LEFT + CELL_W * xs.len() as f64 + LEGEND_W;
    let height = TOP + CELL_H * ys.len() as f64 + 50.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#f4f4f4"/>"##);
    if let Some(t) = &axes.title {
        let _ = writeln!(s, r#"<text x="{LEFT}" y="18" font-size="13">{}</text>"#, escape(t));
    }

    for ((yi, xi), r) in &grid {
        let x = LEFT + CELL_W * *xi as f64;
        let y = TOP + CELL_H * *yi as f64;
        let (fill, state, title) = match r.nll_mean {
            Some(v) => (color(v), "ok", format!("{} {}: {v:.4}", r.site, r.filter)),
            None => ("#ffffff".to_owned(), "diverged", format!("{} {}: diverged", r.site, r.filter)),
        };
        let _ = writeln!(
            s,
            r##"<rect class="cell" data-state="{state}" x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{fill}" stroke="#cccccc" stroke-width="0.5"><title>{}</title></rect>"##,
            escape(&title)
        );
    }
    for (yi, (_, site)) in ys.iter().enumerate() {
        let y = TOP + CELL_H * (yi as f64 + 0.65);
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{}</text>"#, LEFT - 6.0, escape(site));
    }
    for (xi, (_, label)) in xs.iter().enumerate() {
        let x = LEFT + CELL_W * (xi as f64 + 0.5);
        let y = TOP + CELL_H * ys.len() as f64 + 14.0;
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="middle">{}</text>"#, escape(label));
    }
    let x_label = match axes.x {
        XAxis::K => "k (bands kept)",
        XAxis::KeptFraction => "kept fraction",
    };
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        LEFT + CELL_W * xs.len() as f64 / 2.0,
        TOP + CELL_H * ys.len() as f64 + 32.0
    );

    // legend
    let lx = LEFT + CELL_W * xs.len() as f64 + 24.0;
    let lh = (CELL_H * ys.len() as f64).max(60.0);
    let _ = writeln!(s, r#"<defs><linearGradient id="nll" x1="0" y1="1" x2="0" y2="0">"#);
    for (i, _) in VIRIDIS_STOPS.iter().enumerate() {
        let t = i as f64 / (VIRIDIS_STOPS.len() - 1) as f64;
        let c = if degenerate { viridis(0.5) } else { viridis(t) };
        let _ = writeln!(s, r#"<stop offset="{t}" stop-color="{c}"/>"#);
    }
    let _ = writeln!(s, "</linearGradient></defs>");
    let _ = writeln!(s, r#"<rect class="legend" x="{lx}" y="{TOP}" width="14" height="{lh}" fill="url(#nll)"/>"#);
    if degenerate {
        let label = finite.first().map_or("no finite NLL".to_owned(), |v| format!("{v:.4} (degenerate range)"));
        let _ = writeln!(s, r#"<text class="legend-range" x="{}" y="{}">{label}</text>"#, lx + 18.0, TOP + lh / 2.0);
    } else {
        let _ = writeln!(s, r#"<text class="legend-range" x="{}" y="{}">{hi:.4}</text>"#, lx + 18.0, TOP + 10.0);
        let _ = writeln!(s, r#"<text class="legend-range" x="{}" y="{}">{lo:.4}</text>"#, lx + 18.0, TOP + lh);
    }
    let _ = writeln!(s, r#"<text x="{lx}" y="{}">NLL, white = diverged</text>"#, TOP - 8.0);
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn viridis_endpoints() {
        assert_eq!(viridis(0.0), "#440154");
        assert_eq!(viridis(0.5), "#21918c");
        assert_eq!(viridis(1.0), "#fde725");
        assert_eq!(viridis(f64::NAN), "#440154");
    }
}
