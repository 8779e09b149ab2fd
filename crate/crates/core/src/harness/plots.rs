//! SVG plots, each mirrored by a CSV holding the plotted numbers.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::harness::metrics::SkillEntry;
use crate::harness::scaling::ScalingFit;

const COLORS: [RGBColor; 6] = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

fn bounds(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) =
        vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return None;
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5_f64.max(lo.abs() * 0.05) };
    Some((lo - pad, hi + pad))
}

/// Line plot of `columns[1..]` against `columns[0]`. Writes `<stem>.svg` and
/// `<stem>.csv`; empty input writes nothing and is an error.
pub fn plot_lines(
    out_dir: &Path,
    stem: &str,
    title: &str,
    columns: &[&str],
    rows: &[Vec<f64>],
) -> Result<Vec<PathBuf>> {
    if rows.is_empty() || columns.len() < 2 {
        return Err(invalid(format!("nothing to plot for '{stem}'")));
    }
    if rows.iter().any(|r| r.len() != columns.len()) {
        return Err(invalid("plot rows must match the column count"));
    }
    let (x0, x1) = bounds(rows.iter().map(|r| r[0])).ok_or_else(|| invalid("no finite x values"))?;
    let (y0, y1) =
        bounds(rows.iter().flat_map(|r| r[1..].iter().copied())).ok_or_else(|| invalid("no finite y values"))?;
    std::fs::create_dir_all(out_dir)?;
    let svg = out_dir.join(format!("{stem}.svg"));
    let csv_path = out_dir.join(format!("{stem}.csv"));
    {
        let root = SVGBackend::new(&svg, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(56)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc(columns[0]).draw().map_err(plot_err)?;
        for (k, name) in columns.iter().enumerate().skip(1) {
            let color = COLORS[(k - 1) % COLORS.len()];
            let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[k])).filter(|p| p.1.is_finite()).collect();
            chart
                .draw_series(LineSeries::new(pts, &color))
                .map_err(plot_err)?
                .label(*name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    write_csv(&csv_path, columns, rows)?;
    Ok(vec![svg, csv_path])
}

/// Loss trace: one CSV row per step.
pub fn plot_trace(out_dir: &Path, stem: &str, names: &[&str], trace: &[Vec<f64>]) -> Result<Vec<PathBuf>> {
    let mut columns = vec!["step"];
    columns.extend_from_slice(names);
    let rows: Vec<Vec<f64>> =
        trace.iter().enumerate().map(|(i, r)| std::iter::once(i as f64).chain(r.iter().copied()).collect()).collect();
    plot_lines(out_dir, stem, &format!("{stem} loss"), &columns, &rows)
}

/// Log-log scatter of the sweep points with the fitted power law.
pub fn plot_scaling(out_dir: &Path, stem: &str, fit: &ScalingFit, size_label: &str) -> Result<Vec<PathBuf>> {
    if fit.points.is_empty() {
        return Err(invalid("scaling fit has no points"));
    }
    let rows: Vec<Vec<f64>> = fit.points.iter().map(|&(s, l)| vec![s, l, fit.predict(s)]).collect();
    let (x0, x1) = bounds(rows.iter().map(|r| r[0])).expect("positive sizes");
    let (y0, y1) = bounds(rows.iter().flat_map(|r| [r[1], r[2]])).expect("positive losses");
    let (x0, y0) = (x0.max(x1 * 1e-3), y0.max(y1 * 1e-3));
    std::fs::create_dir_all(out_dir)?;
    let svg = out_dir.join(format!("{stem}.svg"));
    let csv_path = out_dir.join(format!("{stem}.csv"));
    {
        let root = SVGBackend::new(&svg, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let caption = format!("L = {:.4} x {size_label}^{:.4} (r2 {:.3})", fit.a, fit.b, fit.r2);
        let mut chart = ChartBuilder::on(&root)
            .caption(caption, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(56)
            .build_cartesian_2d((x0..x1).log_scale(), (y0..y1).log_scale())
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc(size_label).y_desc("validation loss").draw().map_err(plot_err)?;
        chart.draw_series(rows.iter().map(|r| Circle::new((r[0], r[1]), 4, BLUE.filled()))).map_err(plot_err)?;
        let n = 50;
        let line: Vec<(f64, f64)> = (0..=n)
            .map(|i| {
                let s = (x0.ln() + (x1.ln() - x0.ln()) * i as f64 / n as f64).exp();
                (s, fit.predict(s))
            })
            .collect();
        chart.draw_series(LineSeries::new(line, &RED)).map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    write_csv(&csv_path, &["size", "loss", "fitted"], &rows)?;
    Ok(vec![svg, csv_path])
}

/// Miss and false-alarm rates against lead time, one line pair per percentile.
pub fn plot_skill(out_dir: &Path, stem: &str, entries: &[SkillEntry]) -> Result<Vec<PathBuf>> {
    if entries.is_empty() {
        return Err(invalid("no skill entries to plot"));
    }
    let mut pcts: Vec<f64> = entries.iter().map(|e| e.percentile).collect();
    pcts.sort_by(f64::total_cmp);
    pcts.dedup();
    let mut leads: Vec<f64> = entries.iter().map(|e| e.lead_hours).collect();
    leads.sort_by(f64::total_cmp);
    leads.dedup();
    let names: Vec<String> = pcts.iter().flat_map(|p| [format!("miss_p{p}"), format!("false_alarm_p{p}")]).collect();
    let mut columns = vec!["lead_hours"];
    columns.extend(names.iter().map(String::as_str));
    let rows: Vec<Vec<f64>> = leads
        .iter()
        .map(|&l| {
            let mut r = vec![l];
            for &p in &pcts {
                let e = entries.iter().find(|e| e.lead_hours == l && e.percentile == p);
                r.push(e.and_then(|e| e.miss).unwrap_or(f64::NAN));
                r.push(e.and_then(|e| e.false_alarm).unwrap_or(f64::NAN));
            }
            r
        })
        .collect();
    plot_lines(out_dir, stem, "event skill", &columns, &rows)
}
