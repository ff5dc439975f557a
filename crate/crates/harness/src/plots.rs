//! SVG figures. The data behind every figure is written next to it as CSV
//! so it can be re-rendered elsewhere.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use plotters::prelude::*;

use diffguard::metrics::{histogram, value_range};

use crate::ablation::{KeepGenerating, ScanRow, SweepCell};

const SIZE: (u32, u32) = (640, 480);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
];

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn plot_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow::anyhow!("plotting failed: {e:?}")
}

/// Member vs non-member logit histograms on shared bins.
pub fn logit_histograms(dir: &Path, name: &str, members: &[f64], nonmembers: &[f64], bins: usize) -> Result<PathBuf> {
    if members.is_empty() || nonmembers.is_empty() {
        bail!("histogram plot needs member and non-member values");
    }
    let all: Vec<f64> = members.iter().chain(nonmembers).copied().collect();
    let range = value_range(&all);
    let hm = histogram(members, bins, Some(range))?;
    let hn = histogram(nonmembers, bins, Some(range))?;
    let edges = hm.bin_edges();
    let rows: Vec<Vec<String>> = (0..bins)
        .map(|i| {
            vec![edges[i].to_string(), edges[i + 1].to_string(), hm.mass()[i].to_string(), hn.mass()[i].to_string()]
        })
        .collect();
    write_csv(&dir.join(format!("{name}.csv")), &["bin_lo", "bin_hi", "member_mass", "nonmember_mass"], &rows)?;

    let path = dir.join(format!("{name}.svg"));
    let ymax = hm.mass().iter().chain(hn.mass()).copied().fold(0.0, f64::max).max(1e-9) * 1.1;
    let svg = path.clone();
    let root = SVGBackend::new(&svg, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(name, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(edges[0]..edges[bins], 0.0..ymax)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("logit score").y_desc("fraction").draw().map_err(plot_err)?;
    for (i, (h, label)) in [(&hm, "member"), (&hn, "non-member")].into_iter().enumerate() {
        let color = PALETTE[i];
        let steps: Vec<(f64, f64)> =
            (0..bins).flat_map(|b| [(edges[b], h.mass()[b]), (edges[b + 1], h.mass()[b])]).collect();
        chart
            .draw_series(LineSeries::new(steps, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(path)
}

/// ROC curves on log-log axes, down to an FPR of `1 / n_nonmembers`.
pub fn roc_loglog(dir: &Path, name: &str, curves: &[(String, Vec<(f64, f64)>)], n_nonmembers: usize) -> Result<PathBuf> {
    if curves.is_empty() || curves.iter().any(|(_, c)| c.is_empty()) || n_nonmembers == 0 {
        bail!("ROC plot needs non-empty curves");
    }
    let rows: Vec<Vec<String>> = curves
        .iter()
        .flat_map(|(label, c)| c.iter().map(move |(f, t)| vec![label.clone(), f.to_string(), t.to_string()]))
        .collect();
    write_csv(&dir.join(format!("{name}.csv")), &["curve", "fpr", "tpr"], &rows)?;

    let floor = 1.0 / n_nonmembers as f64;
    let path = dir.join(format!("{name}.svg"));
    let svg = path.clone();
    let root = SVGBackend::new(&svg, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(name, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((floor..1.0).log_scale(), (floor..1.0).log_scale())
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("false positive rate").y_desc("true positive rate").draw().map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new([(floor, floor), (1.0, 1.0)], BLACK.mix(0.4)))
        .map_err(plot_err)?;
    for (i, (label, c)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = c.iter().map(|&(f, t)| (f.max(floor), t.max(floor))).collect();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(path)
}

/// Keep-generating CDFs over generations `1..=max_iters`.
pub fn keep_generating_cdf(dir: &Path, name: &str, kg: &KeepGenerating) -> Result<PathBuf> {
    if kg.cdf.is_empty() {
        bail!("CDF plot needs at least one generation");
    }
    let rows: Vec<Vec<String>> = (0..kg.max_iters)
        .map(|i| vec![(i + 1).to_string(), kg.cdf[i].to_string(), kg.missing_cdf[i].to_string()])
        .collect();
    write_csv(&dir.join(format!("{name}.csv")), &["generations", "all_samples", "initially_missing"], &rows)?;

    let path = dir.join(format!("{name}.svg"));
    let svg = path.clone();
    let root = SVGBackend::new(&svg, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{name} [{:.3}, {:.3}]", kg.lo, kg.hi), ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(1usize..kg.max_iters, 0.0..1.0)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("generations").y_desc("fraction in interval").draw().map_err(plot_err)?;
    for (i, (series, label)) in [(&kg.cdf, "all samples"), (&kg.missing_cdf, "initially missing")].into_iter().enumerate() {
        let color = PALETTE[i];
        chart
            .draw_series(LineSeries::new(series.iter().enumerate().map(|(g, &v)| (g + 1, v)), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(path)
}

/// Best-attack AUC heatmap over the N x T grid.
pub fn nt_heatmap(dir: &Path, name: &str, cells: &[SweepCell]) -> Result<PathBuf> {
    if cells.is_empty() {
        bail!("heatmap needs at least one cell");
    }
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| vec![c.n.to_string(), c.t.to_string(), c.best_auc.to_string(), c.best_accuracy.to_string()])
        .collect();
    write_csv(&dir.join(format!("{name}.csv")), &["N", "T", "best_auc", "best_accuracy"], &rows)?;

    let mut ns: Vec<usize> = cells.iter().map(|c| c.n).collect();
    let mut ts: Vec<usize> = cells.iter().map(|c| c.t).collect();
    ns.sort_unstable();
    ns.dedup();
    ts.sort_unstable();
    ts.dedup();
    let (lo, hi) = cells.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), c| (a.min(c.best_auc), b.max(c.best_auc)));
    let path = dir.join(format!("{name}.svg"));
    let svg = path.clone();
    let root = SVGBackend::new(&svg, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{name}: best AUC {lo:.3} to {hi:.3}"), ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0..ts.len(), 0..ns.len())
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("T")
        .y_desc("N")
        .x_label_formatter(&|i| ts.get(*i).map(|t| t.to_string()).unwrap_or_default())
        .y_label_formatter(&|i| ns.get(*i).map(|n| n.to_string()).unwrap_or_default())
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(cells.iter().map(|c| {
            let x = ts.iter().position(|&t| t == c.t).unwrap_or(0);
            let y = ns.iter().position(|&n| n == c.n).unwrap_or(0);
            let v = if hi > lo { (c.best_auc - lo) / (hi - lo) } else { 0.5 };
            let shade = RGBColor(255, (230.0 * (1.0 - v)) as u8 + 25, (230.0 * (1.0 - v)) as u8 + 25);
            Rectangle::new([(x, y), (x + 1, y + 1)], shade.filled())
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(path)
}

/// Best-attack AUC against JS for each scanned interval.
pub fn js_scatter(dir: &Path, name: &str, rows: &[ScanRow]) -> Result<PathBuf> {
    if rows.is_empty() {
        bail!("scatter needs at least one interval");
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.lo.to_string(),
                r.hi.to_string(),
                r.calibration_js.to_string(),
                r.eval_js.to_string(),
                r.best_auc.to_string(),
                r.best_accuracy.to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir.join(format!("{name}.csv")),
        &["lo", "hi", "calibration_js", "eval_js", "best_auc", "best_accuracy"],
        &table,
    )?;

    let pad = |(a, b): (f64, f64)| {
        let m = ((b - a) * 0.05).max(1e-4);
        (a - m)..(b + m)
    };
    let xr = pad(value_range(&rows.iter().map(|r| r.eval_js).collect::<Vec<_>>()));
    let yr = pad(value_range(&rows.iter().map(|r| r.best_auc).collect::<Vec<_>>()));
    let path = dir.join(format!("{name}.svg"));
    let svg = path.clone();
    let root = SVGBackend::new(&svg, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(name, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(xr, yr)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("JS divergence").y_desc("best attack AUC").draw().map_err(plot_err)?;
    chart
        .draw_series(rows.iter().map(|r| Circle::new((r.eval_js, r.best_auc), 4, PALETTE[0].filled())))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(path)
}
