//! SVG plots of training curves and accuracy-versus-cost clouds.

use std::path::Path;

use plotters::prelude::*;
use robustnet_core::evaluation::ParetoLabel;
use robustnet_core::training::EpochMetrics;

use crate::error::{IoError, Result};
use crate::fsutil::write_atomic;

const SIZE: (u32, u32) = (720, 480);

fn plot_err<E: std::fmt::Display>(e: E) -> IoError {
    IoError::Format(format!("plot: {e}"))
}

/// Writes the SVG with a `config_hash` comment after the XML prolog.
fn save(path: &Path, svg: String, config_hash: &str) -> Result<()> {
    let comment = format!("<!-- config_hash: {config_hash} -->\n");
    let body = match svg.find("?>") {
        Some(i) => format!("{}\n{comment}{}", &svg[..i + 2], svg[i + 2..].trim_start()),
        None => format!("{comment}{svg}"),
    };
    write_atomic(path, body.as_bytes())
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Clean and robust training accuracy per epoch.
pub fn plot_metrics(path: &Path, metrics: &[EpochMetrics], title: &str, config_hash: &str) -> Result<()> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let last = metrics.len().max(1) as f64;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(0f64..last, 0f64..100f64)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("epoch").y_desc("train accuracy (%)").draw().map_err(plot_err)?;
        let clean: Vec<(f64, f64)> = metrics.iter().map(|m| (m.epoch as f64 + 1.0, m.clean_acc)).collect();
        let robust: Vec<(f64, f64)> = metrics.iter().map(|m| (m.epoch as f64 + 1.0, m.robust_acc)).collect();
        chart
            .draw_series(LineSeries::new(clean, &BLUE))
            .map_err(plot_err)?
            .label("clean")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLUE));
        chart
            .draw_series(LineSeries::new(robust, &RED))
            .map_err(plot_err)?
            .label("robust")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], RED));
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    save(path, svg, config_hash)
}

/// One point of an accuracy-versus-cost scatter.
#[derive(Clone, Debug)]
pub struct CostPoint {
    pub cost: f64,
    pub accuracy: f64,
    pub label: ParetoLabel,
}

/// Scatter of accuracy against cost; efficient points red, anti-efficient
/// violet, the rest grey. The efficient front is joined by a line.
pub fn plot_accuracy_vs_cost(path: &Path, points: &[CostPoint], title: &str, x_desc: &str, y_desc: &str, config_hash: &str) -> Result<()> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let (x0, x1) = span(points.iter().map(|p| p.cost));
        let (y0, y1) = span(points.iter().map(|p| p.accuracy));
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(plot_err)?;
        let violet = RGBColor(143, 0, 255);
        chart
            .draw_series(points.iter().map(|p| {
                let c = match p.label {
                    ParetoLabel::Efficient => RED.filled(),
                    ParetoLabel::AntiEfficient => violet.filled(),
                    ParetoLabel::Dominated => RGBColor(150, 150, 150).filled(),
                };
                Circle::new((p.cost, p.accuracy), 4, c)
            }))
            .map_err(plot_err)?;
        let mut front: Vec<(f64, f64)> = points.iter().filter(|p| p.label == ParetoLabel::Efficient).map(|p| (p.cost, p.accuracy)).collect();
        front.sort_by(|a, b| a.0.total_cmp(&b.0));
        chart.draw_series(LineSeries::new(front, &RED)).map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    save(path, svg, config_hash)
}
