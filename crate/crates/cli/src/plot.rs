//! SVG figures for evaluation outputs.

use std::path::Path;

use anyhow::{anyhow, Result};
use augwm_core::eval::{EvalGridResult, GridSummary, SwitchTrace};
use plotters::prelude::*;

const SIZE: (u32, u32) = (720, 540);

fn err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e}")
}

/// Linear blue (low) to red (high) ramp; `t` in [0, 1].
fn ramp(t: f64) -> RGBColor {
    let t = t.clamp(0.0, 1.0);
    let mix = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    RGBColor(mix(49.0, 215.0), mix(104.0, 48.0), mix(200.0, 39.0))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo == hi {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

/// Grid means as a heatmap: damping multipliers across, mass down.
pub fn grid_heatmap(path: &Path, title: &str, r: &EvalGridResult) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let (nm, nd) = (r.masses.len(), r.dampings.len());
    let (lo, hi) = bounds(r.means.iter().flatten().copied());
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{title}: mean return"), ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(45)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..nd as f64, 0f64..nm as f64)
        .map_err(err)?;
    let dampings = r.dampings.clone();
    let masses = r.masses.clone();
    let label = |values: &[f64], x: f64| -> String {
        let i = x.floor() as usize;
        if (x - i as f64 - 0.5).abs() < 1e-9 && i < values.len() {
            format!("{}", values[i])
        } else {
            String::new()
        }
    };
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("damping multiplier")
        .y_desc("mass multiplier")
        .x_labels(2 * nd + 1)
        .y_labels(2 * nm + 1)
        .x_label_formatter(&|x| label(&dampings, *x))
        .y_label_formatter(&|y| label(&masses, *y))
        .draw()
        .map_err(err)?;
    let mut cells = Vec::with_capacity(nm * nd);
    for i in 0..nm {
        for j in 0..nd {
            cells.push((i, j, r.means[i][j]));
        }
    }
    chart
        .draw_series(cells.iter().map(|&(i, j, v)| {
            let c = ramp((v - lo) / (hi - lo));
            Rectangle::new([(j as f64, i as f64), (j as f64 + 1.0, i as f64 + 1.0)], c.filled())
        }))
        .map_err(err)?;
    chart
        .draw_series(cells.iter().map(|&(i, j, v)| {
            Text::new(format!("{v:.1}"), (j as f64 + 0.35, i as f64 + 0.55), ("sans-serif", 14).into_font().color(&WHITE))
        }))
        .map_err(err)?;
    root.present().map_err(err)
}

/// Mean return per mass and per damping multiplier, side by side.
pub fn marginals(path: &Path, title: &str, r: &EvalGridResult, s: &GridSummary) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let panels = root.split_evenly((1, 2));
    for (area, (name, keys, values)) in panels.iter().zip([
        ("mass", &r.masses, &s.mass_means),
        ("damping", &r.dampings, &s.damping_means),
    ]) {
        let (lo, hi) = bounds(values.iter().copied().chain([0.0]));
        let pad = 0.05 * (hi - lo);
        let mut chart = ChartBuilder::on(area)
            .caption(format!("{title}: by {name}"), ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(55)
            .build_cartesian_2d(0f64..keys.len() as f64, (lo - pad)..(hi + pad))
            .map_err(err)?;
        let ks = keys.clone();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_desc(format!("{name} multiplier"))
            .y_desc("mean return")
            .x_labels(2 * keys.len() + 1)
            .x_label_formatter(&|x| {
                let i = x.floor() as usize;
                if (x - i as f64 - 0.5).abs() < 1e-9 && i < ks.len() {
                    format!("{}", ks[i])
                } else {
                    String::new()
                }
            })
            .draw()
            .map_err(err)?;
        chart
            .draw_series(values.iter().enumerate().map(|(i, &v)| {
                Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, v)], ramp(0.2).filled())
            }))
            .map_err(err)?;
    }
    root.present().map_err(err)
}

/// Rolling reward of each mode over an episode with a dynamics switch.
pub fn switch_traces(path: &Path, t_switch: usize, traces: &[(String, SwitchTrace)]) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let len = traces.iter().map(|(_, t)| t.rolling.len()).max().unwrap_or(1);
    let (lo, hi) = bounds(traces.iter().flat_map(|(_, t)| t.rolling.iter().copied()));
    let pad = 0.05 * (hi - lo);
    let mut chart = ChartBuilder::on(&root)
        .caption("reward across a dynamics switch", ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(45)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..len as f64, (lo - pad)..(hi + pad))
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("rolling mean reward")
        .draw()
        .map_err(err)?;
    let t = t_switch as f64;
    chart
        .draw_series(std::iter::once(PathElement::new(vec![(t, lo - pad), (t, hi + pad)], BLACK.mix(0.5))))
        .map_err(err)?;
    for (i, (name, trace)) in traces.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                trace.rolling.iter().enumerate().map(|(t, v)| (t as f64, *v)),
                color.stroke_width(2),
            ))
            .map_err(err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)
}
