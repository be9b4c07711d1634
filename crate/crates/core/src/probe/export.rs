//! Heatmap files.
//!
//! CSV: `grid_h` lines of `grid_w` comma-separated decimals with nine
//! significant digits, no header. PGM: ASCII `P2`, `#` comment lines with
//! metadata, values scaled linearly so the minimum maps to 0 and the maximum
//! to 255 (a constant map is all 0).

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

/// Decimal rendering with nine significant digits.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0.000000000".into() } else { x.to_string() };
    }
    // The exponent after rounding to nine digits decides the decimals.
    let sci = format!("{x:.8e}");
    let exp: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    let decimals = (8 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

pub fn format_csv(values: &[f64], grid_h: usize, grid_w: usize) -> String {
    assert_eq!(values.len(), grid_h * grid_w, "heatmap size");
    let mut out = String::new();
    for r in 0..grid_h {
        let row: Vec<String> = values[r * grid_w..(r + 1) * grid_w].iter().map(|&v| sig9(v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<(Vec<f64>, usize, usize), String> {
    let mut values = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad value `{t}`: {e}")))
            .collect::<Result<_, _>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => return Err(format!("row {rows} has {} values, expected {c}", row.len())),
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    Ok((values, rows, cols.unwrap_or(0)))
}

pub fn format_pgm(values: &[f64], grid_h: usize, grid_w: usize, comments: &[String]) -> String {
    assert_eq!(values.len(), grid_h * grid_w, "heatmap size");
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = String::from("P2\n");
    for c in comments {
        for line in c.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    out.push_str(&format!("{grid_w} {grid_h}\n255\n"));
    for r in 0..grid_h {
        let row: Vec<String> = values[r * grid_w..(r + 1) * grid_w]
            .iter()
            .map(|&v| {
                let px = if max > min { ((v - min) / (max - min) * 255.0).round() as u8 } else { 0 };
                px.to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Writes one heatmap to `path`.
pub fn export_heatmap(
    values: &[f64],
    grid_h: usize,
    grid_w: usize,
    format: HeatmapFormat,
    comments: &[String],
    path: &Path,
) -> std::io::Result<()> {
    let text = match format {
        HeatmapFormat::Csv => format_csv(values, grid_h, grid_w),
        HeatmapFormat::Pgm => format_pgm(values, grid_h, grid_w, comments),
    };
    std::fs::write(path, text)
}
