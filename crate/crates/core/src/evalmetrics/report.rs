//! Text and CSV renderings of evaluation results.

use std::fmt::Write as _;
use std::path::Path;

use super::{ChangeScatter, GrowthBin, HeightBin, LagBin, MetricReport};
use crate::error::Result;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Aligned `metric  value [IQR]` table.
pub fn metric_table(r: &MetricReport) -> String {
    let rows: [(&str, Option<f64>, Option<f64>); 7] = [
        ("MAE (m)", Some(r.mae), Some(r.iqr_mae)),
        ("MSE (m²)", Some(r.mse), Some(r.iqr_mse)),
        ("RMSE (m)", Some(r.rmse), Some(r.iqr_rmse)),
        ("MAPE (%)", Some(r.mape), Some(r.iqr_mape)),
        ("R²", r.r2, None),
        ("R²_all", r.r2_all, None),
        ("R² (determination)", r.r2_determination, None),
    ];
    let mut out = String::new();
    writeln!(out, "{:<20} {:>10} {:>12}", "metric", "value", "IQR").unwrap();
    for (name, v, iqr) in rows {
        let v = v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        let iqr = iqr.map_or(String::new(), |x| format!("[{x:.3}]"));
        writeln!(out, "{name:<20} {v:>10} {iqr:>12}").unwrap();
    }
    writeln!(out, "{:<20} {:>10}", "n (≥ floor)", r.n).unwrap();
    writeln!(out, "{:<20} {:>10}", "n (all)", r.n_all).unwrap();
    out
}

pub fn write_metric_csv(path: impl AsRef<Path>, r: &MetricReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value", "iqr"])?;
    let rows = [
        ("mae", Some(r.mae), Some(r.iqr_mae)),
        ("mse", Some(r.mse), Some(r.iqr_mse)),
        ("rmse", Some(r.rmse), Some(r.iqr_rmse)),
        ("mape", Some(r.mape), Some(r.iqr_mape)),
        ("r2", r.r2, None),
        ("r2_all", r.r2_all, None),
        ("r2_determination", r.r2_determination, None),
        ("n", Some(r.n as f64), None),
        ("n_all", Some(r.n_all as f64), None),
    ];
    for (name, v, iqr) in rows {
        w.write_record([name.to_string(), opt(v), opt(iqr)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_height_bins_csv(path: impl AsRef<Path>, bins: &[HeightBin]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_lo", "bin_hi", "count", "q1", "median", "q3"])?;
    for b in bins {
        let q = b.abs_error;
        w.write_record([
            b.lo.to_string(),
            b.hi.to_string(),
            b.count.to_string(),
            opt(q.map(|q| q.q1)),
            opt(q.map(|q| q.median)),
            opt(q.map(|q| q.q3)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_change_scatter_csv(path: impl AsRef<Path>, c: &ChangeScatter) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_lo", "bin_hi", "count", "median_end"])?;
    for b in &c.bins {
        w.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string(), opt(b.median_end)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_growth_curves_csv(path: impl AsRef<Path>, bins: &[GrowthBin]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_lo", "bin_hi", "count", "area_m2", "year", "q1", "median", "q3"])?;
    for b in bins {
        if b.change.is_empty() {
            w.write_record([
                b.lo.to_string(),
                b.hi.to_string(),
                b.count.to_string(),
                b.area_m2.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        for (k, q) in b.change.iter().enumerate() {
            w.write_record([
                b.lo.to_string(),
                b.hi.to_string(),
                b.count.to_string(),
                b.area_m2.to_string(),
                (k + 2).to_string(),
                q.q1.to_string(),
                q.median.to_string(),
                q.q3.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_autocorrelation_csv(path: impl AsRef<Path>, bins: &[LagBin]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lag_lo", "lag_hi", "pairs", "correlation"])?;
    for b in bins {
        w.write_record([b.lo.to_string(), b.hi.to_string(), b.pairs.to_string(), opt(b.correlation)])?;
    }
    w.flush()?;
    Ok(())
}
