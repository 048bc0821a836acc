//! Minimal SVG line charts: hospitalizations on top, control below.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};

const W: f64 = 800.0;
const PANEL: f64 = 220.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn polyline(out: &mut String, xs: &[f64], ys: &[f64], x_max: f64, y_max: f64, top: f64, color: &str, dash: bool) {
    let pts: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let px = PAD + (W - 2.0 * PAD) * x / x_max;
            let py = top + PANEL * (1.0 - (y / y_max).clamp(0.0, 1.0));
            format!("{px:.1},{py:.1}")
        })
        .collect();
    let style = if dash { " stroke-dasharray=\"6 4\"" } else { "" };
    let _ = writeln!(out, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{style} points=\"{}\"/>", pts.join(" "));
}

/// `series` holds `(label, h per 100K, u)` per curve; `limits` are drawn as
/// dashed lines in the upper panel.
pub fn write_svg(path: &Path, days: &[f64], series: &[(String, Vec<f64>, Vec<f64>)], limits: &[f64]) -> Result<()> {
    let x_max = days.last().copied().unwrap_or(1.0).max(1.0);
    let h_max = series
        .iter()
        .flat_map(|s| s.1.iter())
        .chain(limits)
        .copied()
        .filter(|v| v.is_finite())
        .fold(1e-9, f64::max)
        * 1.1;
    let height = 2.0 * PANEL + 3.0 * PAD;
    let mut out = String::new();
    let _ = writeln!(out, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height}\">");
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let top_u = 2.0 * PAD + PANEL;
    for (top, label) in [(PAD, format!("h per 100K (max {h_max:.2})")), (top_u, "u".to_string())] {
        let _ = writeln!(
            out,
            "<rect x=\"{PAD}\" y=\"{top}\" width=\"{}\" height=\"{PANEL}\" fill=\"none\" stroke=\"#888\"/>",
            W - 2.0 * PAD
        );
        let _ = writeln!(out, "<text x=\"{PAD}\" y=\"{}\" font-size=\"12\">{label}</text>", top - 6.0);
    }
    for &l in limits.iter().filter(|l| l.is_finite()) {
        polyline(&mut out, &[0.0, x_max], &[l, l], x_max, h_max, PAD, "#555", true);
    }
    for (k, (name, h, u)) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        polyline(&mut out, days, h, x_max, h_max, PAD, c, false);
        polyline(&mut out, days, u, x_max, 1.0, top_u, c, false);
        if series.len() <= 12 {
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{c}\">{name}</text>",
                W - PAD - 170.0,
                PAD + 14.0 * (k as f64 + 1.0)
            );
        }
    }
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" font-size=\"12\">day</text>", W / 2.0, height - 8.0);
    out.push_str("</svg>\n");
    std::fs::write(path, out).with_context(|| format!("cannot write `{}`", path.display()))
}
