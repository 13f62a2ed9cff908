//! Static SVG drawings of morphologies in their spawn pose.

use std::fmt::Write;

use crate::envsim::{PhysicsConfig, PlanarSim};
use crate::error::{Error, Result};
use crate::morphology::MorphologyGraph;
use crate::numcore::Tensor;

/// Pixels per metre.
pub const SCALE: f64 = 200.0;
const MARGIN: f64 = 20.0;
const CELL: f64 = 14.0;

/// Per-limb shading from a head-averaged attention map `[L × L]`: the mean
/// weight each limb receives as a key, divided by the largest such mean.
pub fn attention_shading(map: &Tensor) -> Result<Vec<f64>> {
    let l = map.rows();
    if map.shape() != [l, l] || l == 0 {
        return Err(Error::Dimension(format!("attention map of shape {:?}", map.shape())));
    }
    let received: Vec<f64> = (0..l).map(|j| (0..l).map(|i| map.row(i)[j]).sum::<f64>() / l as f64).collect();
    let top = received.iter().copied().fold(0.0, f64::max);
    Ok(received.iter().map(|r| if top > 0.0 { r / top } else { 0.0 }).collect())
}

fn shade(w: f64) -> String {
    // white-ish blue to saturated red
    let w = w.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * w).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(120.0, 214.0), lerp(150.0, 39.0), lerp(200.0, 40.0))
}

/// Draws every limb as a round-capped stroke and every joint as a circle.
/// With `attention`, limbs are tinted by their shading and an `L × L` heat
/// strip of the map is appended below the body.
pub fn render_svg(graph: &MorphologyGraph, physics: &PhysicsConfig, attention: Option<&Tensor>) -> Result<String> {
    let sim = PlanarSim::new(graph, physics, 0.0)?;
    let segs = sim.segments();
    let shading = attention.map(attention_shading).transpose()?;
    if let Some(s) = &shading {
        if s.len() != segs.len() {
            return Err(Error::Dimension(format!("{} shading values for {} limbs", s.len(), segs.len())));
        }
    }
    let (mut x0, mut x1, mut z1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for (p, d, r) in &segs {
        x0 = x0.min(p[0] - r).min(d[0] - r);
        x1 = x1.max(p[0] + r).max(d[0] + r);
        z1 = z1.max(p[1] + r).max(d[1] + r);
    }
    let body_w = (x1 - x0) * SCALE + 2.0 * MARGIN;
    let body_h = z1 * SCALE + 2.0 * MARGIN;
    let strip = if shading.is_some() { segs.len() as f64 * CELL + MARGIN } else { 0.0 };
    let width = body_w.max(strip + MARGIN);
    let height = body_h + strip;
    let px = |x: f64| (x - x0) * SCALE + MARGIN;
    let py = |z: f64| body_h - MARGIN - z * SCALE;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}">"#
    );
    let _ = writeln!(
        s,
        r##"<line class="ground" x1="0" y1="{g:.2}" x2="{width:.1}" y2="{g:.2}" stroke="#888888" stroke-width="1"/>"##,
        g = py(0.0)
    );
    for (i, (p, d, r)) in segs.iter().enumerate() {
        let color = shading.as_ref().map_or_else(|| "#4a6fa5".to_string(), |w| shade(w[i]));
        let weight = shading.as_ref().map_or(String::new(), |w| format!(r#" data-attention="{:.4}""#, w[i]));
        let _ = writeln!(
            s,
            r#"<line class="capsule" data-limb="{i}"{weight} x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="{:.2}" stroke-linecap="round"/>"#,
            px(p[0]),
            py(p[1]),
            px(d[0]),
            py(d[1]),
            2.0 * r * SCALE
        );
    }
    for (i, (p, _, r)) in segs.iter().enumerate().skip(1) {
        let _ = writeln!(
            s,
            r##"<circle class="joint" data-limb="{i}" cx="{:.2}" cy="{:.2}" r="{:.2}" fill="#222222"/>"##,
            px(p[0]),
            py(p[1]),
            (0.6 * r * SCALE).max(2.0)
        );
    }
    if let Some(map) = attention {
        let l = map.rows();
        let top = map.data().iter().copied().fold(0.0, f64::max);
        let _ = writeln!(s, r#"<g class="heat">"#);
        for i in 0..l {
            for j in 0..l {
                let w = if top > 0.0 { map.row(i)[j] / top } else { 0.0 };
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{CELL}" height="{CELL}" fill="{}"/>"#,
                    MARGIN + j as f64 * CELL,
                    body_h + i as f64 * CELL,
                    shade(w)
                );
            }
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    Ok(s)
}
