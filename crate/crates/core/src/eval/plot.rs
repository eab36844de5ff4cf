use std::path::Path;

use plotters::prelude::*;

use super::ablation::SweepReport;
use super::report::MetricReport;
use crate::error::{Error, Result};

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Serde(format!("plot: {e}"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Grouped bars of the per-variant means of `metrics`.
pub fn plot_variant_bars(report: &MetricReport, metrics: &[&str], path: &Path) -> Result<()> {
    if report.summary.is_empty() || metrics.is_empty() {
        return Err(Error::Precondition("nothing to plot".into()));
    }
    ensure_parent(path)?;
    let n = report.summary.len();
    let top = report
        .summary
        .iter()
        .flat_map(|s| metrics.iter().filter_map(|m| s.mean.get(*m).copied()))
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.15;
    let root = SVGBackend::new(path, (160 + 90 * n as u32, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Ablation variants", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..n as f64, 0f64..top)
        .map_err(plot_err)?;
    let names: Vec<String> = report.summary.iter().map(|s| s.variant.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = (x - 0.5).round();
            if (x - 0.5 - i).abs() < 1e-6 && i >= 0.0 {
                names.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("mean over seeds")
        .draw()
        .map_err(plot_err)?;
    let width = 0.8 / metrics.len() as f64;
    for (mi, m) in metrics.iter().enumerate() {
        let color = PALETTE[mi % PALETTE.len()];
        let bars: Vec<Rectangle<(f64, f64)>> = report
            .summary
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let x0 = i as f64 + 0.1 + mi as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width, s.mean.get(*m).copied().unwrap_or(0.0))], color.filled())
            })
            .collect();
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(*m)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Line plot of named series over a shared x axis.
pub fn plot_lines(title: &str, x_desc: &str, series: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).collect();
    if pts.is_empty() {
        return Err(Error::Precondition("nothing to plot".into()));
    }
    ensure_parent(path)?;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let pad = ((y1 - y0) * 0.1).max(1e-3);
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_desc).draw().map_err(plot_err)?;
    for (i, (name, s)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(s.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Metric means against the swept value, one series per metric.
pub fn plot_sweep(sweep: &SweepReport, metrics: &[&str], path: &Path) -> Result<()> {
    let series: Vec<(String, Vec<(f64, f64)>)> = metrics
        .iter()
        .map(|m| {
            let pts = sweep
                .points
                .iter()
                .filter_map(|p| p.report.summary.first().and_then(|s| s.mean.get(*m)).map(|&v| (p.value as f64, v)))
                .collect();
            (m.to_string(), pts)
        })
        .collect();
    plot_lines(&format!("Sweep over {}", sweep.param.name()), sweep.param.name(), &series, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::metrics::RankedLists;
    use crate::eval::report::RunMetrics;

    #[test]
    fn writes_svg_files() {
        let lists = RankedLists::full(vec![vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10]; 3]).unwrap();
        let runs = vec![
            RunMetrics::compute("full", 1, &lists, &[1, 2, 11], &[5, 10]).unwrap(),
            RunMetrics::compute("s", 1, &lists, &[1, 12, 11], &[5, 10]).unwrap(),
        ];
        let rep = MetricReport::from_runs(runs, "full").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bars = dir.path().join("reports/bars.svg");
        plot_variant_bars(&rep, &["R@10", "N@10"], &bars).unwrap();
        let svg = std::fs::read_to_string(&bars).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("<rect"));
        let line = dir.path().join("line.svg");
        plot_lines("loss", "epoch", &[("total".into(), vec![(1.0, 3.0), (2.0, 1.0)])], &line).unwrap();
        assert!(std::fs::read_to_string(&line).unwrap().contains("<polyline"));
    }
}
