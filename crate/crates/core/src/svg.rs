//! Deterministic SVG rendering of a Connect-S grid.

use std::fmt::Write as _;
use std::path::Path;

use crate::diagnostics::{ConnectSGrid, Metric};
use crate::error::{Error, Result};

const CELL: f64 = 22.0;
const RADIUS: f64 = 8.0;
const LEFT: f64 = 150.0;
const TOP: f64 = 120.0;
const VI_WIDTH: f64 = 90.0;
const LEGEND_HEIGHT: f64 = 70.0;

/// Fill colours from lightest (best balance) to darkest.
const SHADES: [&str; 6] = ["#f7fbff", "#c6dbef", "#6baed6", "#2171b5", "#08306b", "#000000"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn shade(bin: usize) -> &'static str {
    SHADES[(bin.max(1) - 1).min(SHADES.len() - 1)]
}

fn legend_labels(thresholds: &[f64]) -> Vec<String> {
    let mut out = Vec::with_capacity(thresholds.len() + 1);
    for k in 0..=thresholds.len() {
        out.push(match k {
            0 => format!("< {}", thresholds[0]),
            k if k == thresholds.len() => format!(">= {}", thresholds[k - 1]),
            k => format!("{} - {}", thresholds[k - 1], thresholds[k]),
        });
    }
    out
}

/// Renders the grid: one circle per (cell, covariate) shaded by ASMD bin,
/// the row's variance inflation at the right, and a bin legend underneath.
/// Output depends only on the grid contents.
pub fn render_svg(grid: &ConnectSGrid) -> String {
    let n_cols = grid.covariates.len() as f64;
    let n_rows = grid.rows.len() as f64;
    let width = LEFT + n_cols * CELL + VI_WIDTH;
    let height = TOP + n_rows * CELL + LEGEND_HEIGHT;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="10">"##
    );
    let thresholds: Vec<String> = grid.thresholds.iter().map(|t| t.to_string()).collect();
    let _ = writeln!(
        s,
        "<!-- config_hash={} thresholds={} sd={} -->",
        grid.config_hash.as_deref().unwrap_or("none"),
        thresholds.join(","),
        escape(&grid.sd_convention).replace("--", "- -")
    );
    let _ = writeln!(s, r##"<title>{}</title>"##, escape(&grid.title));
    let _ = writeln!(
        s,
        r##"<text x="4" y="14" font-size="12" font-weight="bold">{}</text>"##,
        escape(&grid.title)
    );

    for (j, name) in grid.covariates.iter().enumerate() {
        let x = LEFT + (j as f64 + 0.5) * CELL;
        let _ = writeln!(
            s,
            r##"<text class="covariate" x="{x:.1}" y="{y:.1}" transform="rotate(-60 {x:.1} {y:.1})">{}</text>"##,
            escape(name),
            y = TOP - 6.0
        );
    }
    let _ = writeln!(
        s,
        r##"<text x="{:.1}" y="{:.1}" font-weight="bold">VI</text>"##,
        LEFT + n_cols * CELL + 10.0,
        TOP - 6.0
    );

    for (i, row) in grid.rows.iter().enumerate() {
        let cy = TOP + (i as f64 + 0.5) * CELL;
        let _ = writeln!(
            s,
            r##"<text class="row" x="{:.1}" y="{:.1}" text-anchor="end">{} (n={})</text>"##,
            LEFT - 6.0,
            cy + 3.5,
            escape(&row.cell),
            row.n
        );
        for (j, c) in row.cells.iter().enumerate() {
            let cx = LEFT + (j as f64 + 0.5) * CELL;
            match (c.asmd, c.bin) {
                (Metric::Value(v), Some(bin)) => {
                    let _ = writeln!(
                        s,
                        r##"<circle class="cell" cx="{cx:.1}" cy="{cy:.1}" r="{RADIUS}" fill="{}" stroke="#555" stroke-width="0.5" data-row="{}" data-covariate="{}" data-asmd="{v:.6e}" data-bin="{bin}"/>"##,
                        shade(bin),
                        escape(&row.cell),
                        escape(&c.covariate_name)
                    );
                }
                _ => {
                    let _ = writeln!(
                        s,
                        r##"<circle class="cell" cx="{cx:.1}" cy="{cy:.1}" r="{RADIUS}" fill="none" stroke="#999" stroke-dasharray="2,2" data-row="{}" data-covariate="{}" data-degenerate="true"/>"##,
                        escape(&row.cell),
                        escape(&c.covariate_name)
                    );
                    let _ = writeln!(
                        s,
                        r##"<text class="degenerate" x="{cx:.1}" y="{:.1}" text-anchor="middle" fill="#999">×</text>"##,
                        cy + 3.5
                    );
                }
            }
        }
        let vi = match row.vi {
            Metric::Value(v) => format!("{v:.3}"),
            Metric::Degenerate(_) => "NA".to_string(),
        };
        let _ = writeln!(
            s,
            r##"<text class="vi" x="{:.1}" y="{:.1}">{vi}</text>"##,
            LEFT + n_cols * CELL + 10.0,
            cy + 3.5
        );
    }

    let ly = TOP + n_rows * CELL + 25.0;
    let _ = writeln!(s, r##"<text x="4" y="{:.1}">ASMD</text>"##, ly + 3.5);
    for (k, label) in legend_labels(&grid.thresholds).iter().enumerate() {
        let lx = 50.0 + k as f64 * 80.0;
        let _ = writeln!(
            s,
            r##"<circle class="legend" cx="{lx:.1}" cy="{ly:.1}" r="{RADIUS}" fill="{}" stroke="#555" stroke-width="0.5" data-bin="{}"/>"##,
            shade(k + 1),
            k + 1
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}">{}</text>"##,
            lx + 12.0,
            ly + 3.5,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_svg(grid: &ConnectSGrid, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), render_svg(grid)).map_err(|e| Error::io(path.as_ref(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{enumerate_cells, AnalysisDataset, SubgroupVariable};
    use crate::diagnostics::{build_connect_s, DEFAULT_THRESHOLDS};
    use crate::weighting::WeightSet;
    use nalgebra::DMatrix;

    fn grid() -> ConnectSGrid {
        let n = 30;
        let ds = AnalysisDataset::new(
            vec![0.0; n],
            (0..n).map(|i| i % 2 == 0).collect(),
            DMatrix::from_fn(n, 2, |i, p| ((i * (p + 3)) % 7) as f64),
            vec!["age<65".into(), "bmi".into()],
            vec![SubgroupVariable::from_binary(
                "S",
                &(0..n).map(|i| i < 4 || i % 3 == 0).collect::<Vec<_>>(),
            )],
        )
        .unwrap();
        build_connect_s(&ds, &WeightSet::unit(n), &enumerate_cells(&ds), &DEFAULT_THRESHOLDS)
            .with_config_hash("abc123")
    }

    #[test]
    fn element_counts() {
        let g = grid();
        let svg = render_svg(&g);
        assert_eq!(svg.matches(r#"class="cell""#).count(), g.entry_count());
        assert_eq!(svg.matches(r#"class="vi""#).count(), g.rows.len());
        assert_eq!(svg.matches(r#"class="legend""#).count(), 4);
        assert!(svg.contains("config_hash=abc123"));
        assert!(svg.contains("thresholds=0.05,0.1,0.2"));
        assert!(svg.contains("age&lt;65"));
    }

    #[test]
    fn byte_identical_across_calls() {
        let g = grid();
        assert_eq!(render_svg(&g), render_svg(&g.clone()));
    }

    #[test]
    fn legend_text() {
        assert_eq!(
            legend_labels(&DEFAULT_THRESHOLDS),
            vec!["< 0.05", "0.05 - 0.1", "0.1 - 0.2", ">= 0.2"]
        );
    }
}
