//! Files written next to results: grayscale grids, line charts, run manifests.

use std::fmt::Write as _;
use std::path::Path;

use gridcast::dst::episode::EPISODE_VERSION;
use gridcast::dst::{BeliefGrid, GridSpec};
use gridcast::checkpoint::CHECKPOINT_VERSION;
use gridcast::tensor::Tensor;

use crate::config::{Command, Config};
use crate::error::Result;

/// Binary 8-bit PGM of row-major values in `[0, 1]`; values outside are clamped.
pub fn pgm(h: usize, w: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), h * w, "pgm needs {h}×{w} values");
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Pignistic occupancy probability of a `[2, H, W]` mass frame as a PGM.
pub fn pignistic_pgm(frame: &Tensor<f32>, grid: &GridSpec) -> Result<Vec<u8>> {
    let belief = BeliefGrid::from_tensor(frame, grid.resolution)?;
    Ok(pgm(grid.h, grid.w, &belief.pignistic()))
}

pub struct Series<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 || (1e-3..1e4).contains(&v.abs()) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

/// SVG line chart of series indexed by horizon `1..=len`. NaN values
/// leave gaps.
pub fn line_chart(title: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let len = series.iter().map(|s| s.values.len()).max().unwrap_or(0).max(1);
    let finite: Vec<f64> = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    let (mut lo, mut hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if finite.is_empty() {
        (lo, hi) = (0.0, 1.0);
    } else if hi - lo < 1e-12 * hi.abs().max(1.0) {
        let pad = 0.5 * hi.abs().max(1e-3);
        (lo, hi) = (lo - pad, hi + pad);
    } else {
        let pad = 0.05 * (hi - lo);
        (lo, hi) = (lo - pad, hi + pad);
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |i: usize| {
        if len == 1 {
            LEFT + plot_w / 2.0
        } else {
            LEFT + plot_w * i as f64 / (len - 1) as f64
        }
    };
    let y = |v: f64| TOP + plot_h * (hi - v) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let py = y(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + plot_w,
            LEFT - 6.0,
            py + 4.0,
            tick_label(v)
        );
    }
    let stride = len.div_ceil(10).max(1);
    for i in (0..len).step_by(stride) {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x(i),
            TOP + plot_h + 18.0,
            i + 1
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">prediction horizon</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(y_label)
    );
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut run: Vec<String> = Vec::new();
        let flush = |run: &mut Vec<String>, svg: &mut String| {
            if run.len() > 1 {
                let _ = writeln!(
                    svg,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                    run.join(" ")
                );
            }
            run.clear();
        };
        for (i, &v) in s.values.iter().enumerate() {
            if v.is_finite() {
                run.push(format!("{:.2},{:.2}", x(i), y(v)));
                let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, x(i), y(v));
            } else {
                flush(&mut run, &mut svg);
            }
        }
        flush(&mut run, &mut svg);
        let ly = TOP + 10.0 + 20.0 * si as f64;
        let lx = LEFT + plot_w + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `config.txt` and `manifest.json` into `dir`.
pub fn write_manifest(dir: &Path, cmd: Command, cfg: &Config, outputs: &[String]) -> Result<()> {
    std::fs::write(dir.join("config.txt"), cfg.canonical())?;
    let config: serde_json::Map<String, serde_json::Value> =
        cfg.values().map(|(k, v)| (k.to_string(), v.into())).collect();
    let manifest = serde_json::json!({
        "command": cmd.name(),
        "config": config,
        "config_sha256": cfg.hash(),
        "seed": cfg.get::<u64>("seed")?,
        "versions": {
            "gridcast": env!("CARGO_PKG_VERSION"),
            "episode_format": EPISODE_VERSION,
            "checkpoint_format": CHECKPOINT_VERSION,
        },
        "outputs": outputs,
    });
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}
