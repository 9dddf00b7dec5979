// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write;

use anyhow::{bail, Result};
use tlens::lens::PredictionGrid;

const CELL_W: usize = 56;
const CELL_H: usize = 24;
const MARGIN_LEFT: usize = 72;
const MARGIN_BOTTOM: usize = 32;

/// Printable label for a byte token.
pub fn token_label(id: usize) -> String {
    match u8::try_from(id) {
        Ok(b' ') => "\u{2423}".to_string(),
        Ok(b'\n') => "\\n".to_string(),
        Ok(b) if b.is_ascii_graphic() => (b as char).to_string(),
        Ok(b) => format!("\\x{b:02x}"),
        Err(_) => "<pad>".to_string(),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One cell per (layer, position): the top-1 token, shaded by its
/// probability. The output layer is the top row; inputs label the columns.
pub fn render(grid: &PredictionGrid, inputs: &[usize]) -> Result<String> {
    let (rows, cols) = (grid.n_layers(), grid.n_positions());
    if rows == 0 || cols == 0 {
        bail!("empty prediction grid");
    }
    if inputs.len() != cols {
        bail!("{} input tokens for {cols} positions", inputs.len());
    }
    let width = MARGIN_LEFT + cols * CELL_W;
    let height = rows * CELL_H + MARGIN_BOTTOM;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="12">"#
    )?;
    for (layer, (tokens, probs)) in grid.tokens.iter().zip(&grid.probs).enumerate() {
        let y = (rows - 1 - layer) * CELL_H;
        let name = if layer + 1 == rows { "output".to_string() } else { format!("layer {layer}") };
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{name}</text>"#,
            MARGIN_LEFT - 6,
            y + CELL_H / 2 + 4
        )?;
        for (pos, (&tok, &p)) in tokens.iter().zip(probs).enumerate() {
            let x = MARGIN_LEFT + pos * CELL_W;
            writeln!(
                svg,
                r##"<rect class="cell" x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="#2b5d9c" fill-opacity="{p:.4}" stroke="#ffffff"/>"##
            )?;
            writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                x + CELL_W / 2,
                y + CELL_H / 2 + 4,
                escape(&token_label(tok))
            )?;
        }
    }
    for (pos, &tok) in inputs.iter().enumerate() {
        writeln!(
            svg,
            r##"<text x="{}" y="{}" text-anchor="middle" fill="#555555">{}</text>"##,
            MARGIN_LEFT + pos * CELL_W + CELL_W / 2,
            rows * CELL_H + 20,
            escape(&token_label(tok))
        )?;
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
