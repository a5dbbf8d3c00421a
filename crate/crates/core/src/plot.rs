//! Static SVG figures: the FROC curve and the Bland-Altman scatter.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::growth::BlandAltman;
use crate::metrics::FrocCurve;

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Sensitivity against FP per scan on a log2 axis, with the bootstrap band.
pub fn froc_svg(curve: &FrocCurve, path: impl AsRef<Path>) -> Result<()> {
    let root = SVGBackend::new(path.as_ref(), (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let lx: Vec<f64> = curve.points.iter().map(|p| p.fp_rate.log2()).collect();
    let (x0, x1) = lx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (x0, x1) = if x0 < x1 { (x0, x1) } else { (x0 - 1.0, x0 + 1.0) };
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, 0.0..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("average FP per scan (log2)")
        .y_desc("sensitivity")
        .x_label_formatter(&|v| format!("{}", 2f64.powf(*v)))
        .draw()
        .map_err(plot_err)?;
    let band = |f: fn(&crate::metrics::FrocPoint) -> f64| lx.iter().zip(&curve.points).map(move |(&x, p)| (x, f(p)));
    chart.draw_series(LineSeries::new(band(|p| p.lower), BLUE.mix(0.4))).map_err(plot_err)?;
    chart.draw_series(LineSeries::new(band(|p| p.upper), BLUE.mix(0.4))).map_err(plot_err)?;
    chart.draw_series(LineSeries::new(band(|p| p.mean), BLUE.stroke_width(2))).map_err(plot_err)?;
    chart.draw_series(band(|p| p.mean).map(|(x, y)| Circle::new((x, y), 3, BLUE.filled()))).map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Difference against mean of each pair, with the mean and limit lines.
pub fn bland_altman_svg(pred: &[f64], truth: &[f64], stats: &BlandAltman, path: impl AsRef<Path>) -> Result<()> {
    let pts: Vec<(f64, f64)> = pred.iter().zip(truth).map(|(p, t)| ((p + t) / 2.0, p - t)).collect();
    let pad = |lo: f64, hi: f64| {
        let m = ((hi - lo) * 0.1).max(0.5);
        (lo - m)..(hi + m)
    };
    let (xmin, xmax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (ymin, ymax) = pts.iter().map(|p| p.1).chain([stats.loa_low, stats.loa_high]).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !xmin.is_finite() {
        return Err(Error::Empty("no points to plot".into()));
    }
    let root = SVGBackend::new(path.as_ref(), (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let xr = pad(xmin, xmax);
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(xr.clone(), pad(ymin, ymax))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("mean growth (mm)").y_desc("predicted - true (mm)").draw().map_err(plot_err)?;
    for (y, style) in [(stats.mean_diff, BLACK.stroke_width(2)), (stats.loa_low, RED.stroke_width(1)), (stats.loa_high, RED.stroke_width(1))] {
        chart.draw_series(LineSeries::new([(xr.start, y), (xr.end, y)], style)).map_err(plot_err)?;
    }
    chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, BLUE.filled()))).map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::FrocPoint;

    #[test]
    fn figures_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let curve = FrocCurve {
            points: [0.125, 1.0, 8.0].iter().enumerate().map(|(i, &r)| FrocPoint { fp_rate: r, mean: 0.5 + 0.2 * i as f64, lower: 0.4, upper: 0.95 }).collect(),
        };
        froc_svg(&curve, dir.path().join("froc.svg")).unwrap();
        let pred = [1.0, 2.0, -0.5];
        let truth = [1.5, 1.0, 0.0];
        let ba = crate::growth::bland_altman(&pred, &truth).unwrap();
        bland_altman_svg(&pred, &truth, &ba, dir.path().join("ba.svg")).unwrap();
        for f in ["froc.svg", "ba.svg"] {
            let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
            assert!(text.starts_with("<svg") && text.contains("circle"), "{f}");
        }
    }
}
