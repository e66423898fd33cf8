use std::fs::File;
use std::path::Path;

use plotters::coord::Shift;
use plotters::prelude::*;
use treeclust_core::checkpoint::write_atomic;
use treeclust_core::training::{read_epoch_log, EpochRecord, Phase};
use treeclust_core::{ClassDistanceMatrix, Error, Result};

use crate::PlotKind;

fn draw_err<E: std::error::Error + Send + Sync>(e: DrawingAreaErrorKind<E>) -> Error {
    Error::Internal(format!("drawing failed: {e}"))
}

pub fn plot(input: &Path, kind: PlotKind, out: &Path) -> Result<()> {
    let svg = match kind {
        PlotKind::Curves => {
            let log = read_epoch_log(input)?;
            if log.is_empty() {
                return Err(Error::invalid(format!("{} has no epoch records", input.display())));
            }
            curves_svg(&log)?
        }
        PlotKind::Heatmap => {
            let file = File::open(input).map_err(|e| Error::io(input, e))?;
            heatmap_svg(&ClassDistanceMatrix::read_csv(file)?)?
        }
    };
    write_atomic(out, svg.as_bytes())
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

/// Vertical markers: the pretrain/tree boundary in red, prunes in grey.
fn markers(log: &[EpochRecord]) -> (Option<f64>, Vec<f64>) {
    let boundary = log
        .iter()
        .find(|r| r.phase == Phase::Tree)
        .filter(|_| log.iter().any(|r| r.phase == Phase::Pretrain))
        .map(|r| r.epoch as f64);
    let prunes = log.iter().filter(|r| r.pruned.is_some()).map(|r| r.epoch as f64).collect();
    (boundary, prunes)
}

fn panel(
    area: &DrawingArea<SVGBackend<'_>, Shift>,
    title: &str,
    series: &[(&str, Vec<(f64, f64)>, RGBColor)],
    x_range: (f64, f64),
    log: &[EpochRecord],
) -> Result<()> {
    let (y0, y1) = padded_range(series.iter().flat_map(|(_, pts, _)| pts.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(56)
        .build_cartesian_2d(x_range.0..x_range.1, y0..y1)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .disable_x_mesh()
        .draw()
        .map_err(draw_err)?;
    let (boundary, prunes) = markers(log);
    for x in prunes {
        chart
            .draw_series(std::iter::once(PathElement::new(vec![(x, y0), (x, y1)], RGBColor(190, 190, 190))))
            .map_err(draw_err)?;
    }
    if let Some(x) = boundary {
        chart
            .draw_series(std::iter::once(PathElement::new(vec![(x, y0), (x, y1)], RED.stroke_width(2))))
            .map_err(draw_err)?
            .label("pretrain | tree")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], RED.stroke_width(2)));
    }
    for (name, pts, color) in series {
        let color = *color;
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    Ok(())
}

/// Loss (and NMI when logged) against epoch, with the phase boundary and
/// prune epochs marked.
pub fn curves_svg(log: &[EpochRecord]) -> Result<String> {
    let x_range = (0.0, log.iter().map(|r| r.epoch).max().unwrap_or(0) as f64 + 1.0);
    let loss: Vec<(f64, f64)> = log.iter().map(|r| (r.epoch as f64, r.loss.total)).collect();
    let nmi: Vec<(f64, f64)> = log
        .iter()
        .filter_map(|r| r.metrics.map(|m| (r.epoch as f64, m.nmi)))
        .collect();
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (900, if nmi.is_empty() { 360 } else { 680 })).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let loss_series = [("total loss", loss, BLUE)];
        if nmi.is_empty() {
            panel(&root, "training loss", &loss_series, x_range, log)?;
        } else {
            let (top, bottom) = root.split_vertically(340);
            panel(&top, "training loss", &loss_series, x_range, log)?;
            panel(&bottom, "NMI", &[("nmi", nmi, RGBColor(0, 130, 60))], x_range, log)?;
        }
        root.present().map_err(draw_err)?;
    }
    Ok(svg)
}

fn ramp(t: f64) -> RGBColor {
    // dark blue to pale yellow
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    RGBColor(lerp(20.0, 250.0), lerp(40.0, 230.0), lerp(110.0, 120.0))
}

/// Class-by-class distance matrix with class names on both axes.
pub fn heatmap_svg(m: &ClassDistanceMatrix) -> Result<String> {
    let k = m.class_names.len();
    let cell = (480 / k.max(1)).clamp(12, 60) as i32;
    let margin = 140;
    let side = cell * k as i32;
    let (lo, hi) = m.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut svg = String::new();
    {
        let size = ((margin + side + 30) as u32, (margin + side + 30) as u32);
        let root = SVGBackend::with_string(&mut svg, size).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let font = ("sans-serif", 13).into_font();
        let vertical = ("sans-serif", 13).into_font().transform(FontTransform::Rotate270);
        for (i, name) in m.class_names.iter().enumerate() {
            let y = margin + i as i32 * cell + cell / 2 + 4;
            root.draw(&Text::new(name.clone(), (8, y), font.clone())).map_err(draw_err)?;
            let x = margin + i as i32 * cell + cell / 2 + 4;
            root.draw(&Text::new(name.clone(), (x, margin - 8), vertical.clone()))
                .map_err(draw_err)?;
            for j in 0..k {
                let v = m.values[[i, j]];
                let (x0, y0) = (margin + j as i32 * cell, margin + i as i32 * cell);
                root.draw(&Rectangle::new([(x0, y0), (x0 + cell, y0 + cell)], ramp((v - lo) / span).filled()))
                    .map_err(draw_err)?;
                if cell >= 36 {
                    let ink = if (v - lo) / span > 0.6 { BLACK } else { WHITE };
                    root.draw(&Text::new(
                        format!("{v:.2}"),
                        (x0 + 4, y0 + cell / 2 + 4),
                        ("sans-serif", 11).into_font().color(&ink),
                    ))
                    .map_err(draw_err)?;
                }
            }
        }
        root.present().map_err(draw_err)?;
    }
    Ok(svg)
}
