//! SVG line charts of forgetting and gain along one ablation axis.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::eval::ablation::{AblationResult, AblationRow};

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 60.0;

/// Numeric position of an axis value; data ratios map to the original share.
fn x_of(axis: &str, value: &str, ordinal: usize) -> f64 {
    if axis == "data_ratio" {
        if let Some((o, n)) = value.split_once(':') {
            if let (Ok(o), Ok(n)) = (o.parse::<f64>(), n.parse::<f64>()) {
                return o / (o + n);
            }
        }
    }
    value.parse().unwrap_or(ordinal as f64)
}

fn value_of<'a>(row: &'a AblationRow, axis: &str) -> Option<&'a str> {
    row.axis_values.iter().find(|(a, _)| a == axis).map(|(_, v)| v.as_str())
}

/// Original forgetting (mean log-ppl increase) and expanded gain (mean
/// log-ppl decrease) against `axis`, with one dot per run.
pub fn forgetting_svg(result: &AblationResult, axis: &str) -> Result<String> {
    let trends: Vec<_> = result.trends.iter().filter(|t| t.axis == axis).collect();
    if trends.is_empty() {
        return Err(Error::config(format!("result has no axis {axis:?}")));
    }
    let xs: Vec<f64> = trends.iter().enumerate().map(|(i, t)| x_of(axis, &t.value, i)).collect();
    let ordinal = |v: &str| trends.iter().position(|t| t.value == v).unwrap_or(0);
    let mut dots: Vec<(f64, f64, f64)> = Vec::new();
    for r in &result.rows {
        if let Some(v) = value_of(r, axis) {
            dots.push((x_of(axis, v, ordinal(v)), r.delta.original_delta, -r.delta.expanded_delta));
        }
    }
    let ys = dots.iter().flat_map(|d| [d.1, d.2]).chain([0.0]);
    let (ymin, ymax) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    let (xmin, xmax) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let sx = |x: f64| PAD + (x - xmin) / span(xmin, xmax) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - ymin) / span(ymin, ymax) * (H - 2.0 * PAD);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, H - PAD, W - PAD);
    let _ = writeln!(svg, r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#, H - PAD);
    let _ = writeln!(svg, r##"<line x1="{PAD}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="#bbb" stroke-dasharray="4"/>"##, sy(0.0), W - PAD);
    for (t, &x) in trends.iter().zip(&xs) {
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, sx(x), H - PAD + 18.0, t.value);
    }
    for y in [ymin, ymax] {
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" text-anchor="end">{y:.3}</text>"#, PAD - 6.0, sy(y) + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{axis}</text>"#, W / 2.0, H - 15.0);
    let series = [
        ("original forgetting", "#c0392b", trends.iter().map(|t| t.original_delta).collect::<Vec<_>>()),
        ("expanded gain", "#2471a3", trends.iter().map(|t| -t.expanded_delta).collect()),
    ];
    for (i, (label, colour, ys)) in series.iter().enumerate() {
        let pts: Vec<String> = xs.iter().zip(ys).map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for d in &dots {
            let y = if i == 0 { d.1 } else { d.2 };
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{colour}" fill-opacity="0.5"/>"#, sx(d.0), sy(y));
        }
        let ly = PAD - 30.0 + 16.0 * i as f64;
        let _ = writeln!(svg, r#"<rect x="{}" y="{}" width="12" height="4" fill="{colour}"/>"#, W - PAD - 150.0, ly - 4.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{ly}">{label}</text>"#, W - PAD - 132.0);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
