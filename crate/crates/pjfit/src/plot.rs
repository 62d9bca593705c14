//! Metric-versus-hyperparameter curves from evaluation reports, written as
//! an SVG chart and the CSV table behind it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::manifest::write_atomic;

#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    /// Series label, normally the model variant.
    pub series: String,
    pub x: f64,
    pub y: f64,
}

/// Points grouped by series, each sorted by `x`.
pub fn series(points: &[PlotPoint]) -> BTreeMap<&str, Vec<(f64, f64)>> {
    let mut out: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for p in points {
        out.entry(&p.series).or_default().push((p.x, p.y));
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    }
    out
}

pub fn to_csv(points: &[PlotPoint], x_name: &str, metric: &str) -> String {
    let mut out = format!("series,{x_name},{metric}\n");
    for (name, xy) in series(points) {
        for (x, y) in xy {
            let _ = writeln!(out, "{name},{x},{y}");
        }
    }
    out
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let pad = if hi > lo { (hi - lo) * 0.05 } else { 0.5 };
    (lo - pad, hi + pad)
}

/// Renders the chart to an SVG string.
pub fn to_svg(points: &[PlotPoint], x_name: &str, metric: &str) -> Result<String> {
    if points.is_empty() {
        return Err(pjfit_core::Error::Validation("nothing to plot".into()).into());
    }
    let fold = |f: fn(&PlotPoint) -> f64| {
        points.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (x0, x1) = fold(|p| p.x);
    let (y0, y1) = fold(|p| p.y);
    let (x0, x1) = padded(x0, x1);
    let (y0, y1) = padded(y0, y1);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 480)).into_drawing_area();
        let draw_err = |e: &dyn std::fmt::Display| Error::from(pjfit_core::Error::Evaluation(format!("plot rendering failed: {e}")));
        root.fill(&WHITE).map_err(|e| draw_err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{metric} vs {x_name}"), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| draw_err(&e))?;
        chart
            .configure_mesh()
            .x_desc(x_name)
            .y_desc(metric)
            .draw()
            .map_err(|e| draw_err(&e))?;
        for (i, (name, xy)) in series(points).into_iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(xy.clone(), color.stroke_width(2)))
                .map_err(|e| draw_err(&e))?
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
            chart
                .draw_series(xy.into_iter().map(|p| Circle::new(p, 3, color.filled())))
                .map_err(|e| draw_err(&e))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| draw_err(&e))?;
        root.present().map_err(|e| draw_err(&e))?;
    }
    Ok(svg)
}

/// Writes `plot.svg` and `plot.csv` into `dir` and returns their paths.
pub fn write_plot(dir: &Path, points: &[PlotPoint], x_name: &str, metric: &str) -> Result<[std::path::PathBuf; 2]> {
    let svg = dir.join("plot.svg");
    let csv = dir.join("plot.csv");
    write_atomic(&svg, to_svg(points, x_name, metric)?.as_bytes())?;
    write_atomic(&csv, to_csv(points, x_name, metric).as_bytes())?;
    Ok([svg, csv])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts() -> Vec<PlotPoint> {
        [("full", 0.6, 0.7), ("full", 0.2, 0.65), ("text_only", 0.6, 0.55)]
            .into_iter()
            .map(|(s, x, y)| PlotPoint { series: s.into(), x, y })
            .collect()
    }

    #[test]
    fn csv_is_sorted_by_series_then_x() {
        assert_eq!(to_csv(&pts(), "lambda", "gauc"), "series,lambda,gauc\nfull,0.2,0.65\nfull,0.6,0.7\ntext_only,0.6,0.55\n");
    }

    #[test]
    fn svg_renders_deterministically() {
        let a = to_svg(&pts(), "lambda", "gauc").unwrap();
        assert!(a.starts_with("<svg"));
        assert!(a.contains("text_only"));
        assert_eq!(a, to_svg(&pts(), "lambda", "gauc").unwrap());
        assert!(to_svg(&[], "lambda", "gauc").is_err());
    }
}
