//! Error metrics and temporal/spatial analyses of height maps.
//!
//! Quantiles use linear interpolation between order statistics: for sorted
//! values `x[0..n]` and probability `p`, `h = (n−1)·p` and
//! `Q(p) = x[⌊h⌋] + (h − ⌊h⌋)·(x[⌊h⌋+1] − x[⌊h⌋])`.

pub mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Cube;

/// Trees are vegetation taller than this (m); shorter labels are excluded
/// from the headline metrics.
pub const TREE_HEIGHT_FLOOR: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub predicted: f64,
    pub label: f64,
    pub x: f64,
    pub y: f64,
    pub year: i32,
}

impl PairedSample {
    pub fn new(predicted: f64, label: f64) -> Self {
        PairedSample {
            predicted,
            label,
            x: 0.0,
            y: 0.0,
            year: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub n_all: usize,
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    /// Squared Pearson correlation over labels at or above the floor.
    pub r2: Option<f64>,
    /// Squared Pearson correlation over all samples.
    pub r2_all: Option<f64>,
    /// Coefficient of determination over labels at or above the floor.
    pub r2_determination: Option<f64>,
    pub iqr_mae: f64,
    pub iqr_mse: f64,
    /// `√Q₇₅(e²) − √Q₂₅(e²)`: the squared-error IQR on the RMSE scale.
    pub iqr_rmse: f64,
    pub iqr_mape: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

fn iqr(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// `1 − SS_res / SS_tot` of predictions against labels.
pub fn coefficient_of_determination(pred: &[f64], label: &[f64]) -> Option<f64> {
    let m = mean(label);
    let ss_tot: f64 = label.iter().map(|l| (l - m) * (l - m)).sum();
    if ss_tot == 0.0 {
        return None;
    }
    let ss_res: f64 = pred.iter().zip(label).map(|(p, l)| (p - l) * (p - l)).sum();
    Some(1.0 - ss_res / ss_tot)
}

fn validate(samples: &[PairedSample]) -> Result<()> {
    for s in samples {
        if !(s.predicted.is_finite() && s.label.is_finite() && s.label >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sample ({}, {}) must be finite with a non-negative label",
                s.predicted, s.label
            )));
        }
    }
    Ok(())
}

/// Headline metrics over labels ≥ `height_floor`; `r2_all` uses every sample.
pub fn metric_report(samples: &[PairedSample], height_floor: f64) -> Result<MetricReport> {
    validate(samples)?;
    let kept: Vec<&PairedSample> = samples.iter().filter(|s| s.label >= height_floor).collect();
    if kept.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{} samples at or above the {height_floor} m floor; need at least 2",
            kept.len()
        )));
    }
    if kept.iter().any(|s| s.label == 0.0) {
        return Err(Error::InvalidArgument("percentage error undefined for zero labels".into()));
    }
    let abs: Vec<f64> = kept.iter().map(|s| (s.predicted - s.label).abs()).collect();
    let sq: Vec<f64> = abs.iter().map(|e| e * e).collect();
    let pct: Vec<f64> = kept.iter().zip(&abs).map(|(s, e)| 100.0 * e / s.label).collect();
    let mse = mean(&sq);
    let mut sq_sorted = sq.clone();
    sq_sorted.sort_by(f64::total_cmp);
    let pred: Vec<f64> = kept.iter().map(|s| s.predicted).collect();
    let label: Vec<f64> = kept.iter().map(|s| s.label).collect();
    let pred_all: Vec<f64> = samples.iter().map(|s| s.predicted).collect();
    let label_all: Vec<f64> = samples.iter().map(|s| s.label).collect();
    Ok(MetricReport {
        n: kept.len(),
        n_all: samples.len(),
        mae: mean(&abs),
        mse,
        rmse: mse.sqrt(),
        mape: mean(&pct),
        r2: pearson(&pred, &label).map(|r| r * r),
        r2_all: pearson(&pred_all, &label_all).map(|r| r * r),
        r2_determination: coefficient_of_determination(&pred, &label),
        iqr_mae: iqr(&abs),
        iqr_mse: iqr(&sq),
        iqr_rmse: quantile_sorted(&sq_sorted, 0.75).sqrt() - quantile_sorted(&sq_sorted, 0.25).sqrt(),
        iqr_mape: iqr(&pct),
    })
}

/// Median and quartiles of a non-empty set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Quartiles {
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
        })
    }
}

/// Half-open bin `[lo, lo + width)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Absolute-error quartiles; `None` for empty bins.
    pub abs_error: Option<Quartiles>,
}

fn bin_of(value: f64, width: f64) -> usize {
    (value / width).floor().max(0.0) as usize
}

fn check_width(width: f64) -> Result<()> {
    if width > 0.0 && width.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("bin width must be positive, got {width}")))
    }
}

/// Absolute-error quartiles per label-height bin `[0, w), [w, 2w), …` up to
/// the tallest label.
pub fn height_binned_errors(samples: &[PairedSample], bin_width: f64) -> Result<Vec<HeightBin>> {
    validate(samples)?;
    check_width(bin_width)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let nbins = samples.iter().map(|s| bin_of(s.label, bin_width)).max().unwrap_or(0) + 1;
    let mut errs = vec![Vec::new(); nbins];
    for s in samples {
        errs[bin_of(s.label, bin_width)].push((s.predicted - s.label).abs());
    }
    Ok(errs
        .iter()
        .enumerate()
        .map(|(i, e)| HeightBin {
            lo: i as f64 * bin_width,
            hi: (i + 1) as f64 * bin_width,
            count: e.len(),
            abs_error: Quartiles::of(e),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub median_end: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeScatter {
    /// Pixels losing more than the threshold.
    pub disturbed: Vec<bool>,
    /// Median end height per start-height bin over undisturbed pixels.
    pub bins: Vec<ChangeBin>,
}

/// Start-vs-end height comparison: pixels with `end < start − threshold` are
/// flagged; the rest are binned by start height.
pub fn change_scatter(start: &[f64], end: &[f64], disturb_threshold: f64, bin_width: f64) -> Result<ChangeScatter> {
    if start.len() != end.len() {
        return Err(Error::shape(
            "change_scatter",
            format!("{} start heights vs {} end heights", start.len(), end.len()),
        ));
    }
    check_width(bin_width)?;
    let disturbed: Vec<bool> = start.iter().zip(end).map(|(s, e)| *e < s - disturb_threshold).collect();
    let nbins = start.iter().map(|s| bin_of(*s, bin_width)).max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); nbins];
    for ((s, e), d) in start.iter().zip(end).zip(&disturbed) {
        if !d {
            groups[bin_of(*s, bin_width)].push(*e);
        }
    }
    let bins = groups
        .iter()
        .enumerate()
        .map(|(i, g)| ChangeBin {
            lo: i as f64 * bin_width,
            hi: (i + 1) as f64 * bin_width,
            count: g.len(),
            median_end: Quartiles::of(g).map(|q| q.median),
        })
        .collect();
    Ok(ChangeScatter { disturbed, bins })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub area_m2: f64,
    /// Entry `k` summarizes `height[k+1] − height[0]`; empty for empty bins.
    pub change: Vec<Quartiles>,
}

/// Height change since the first year, per first-year height bin.
pub fn growth_curves(series: &Cube, bin_width: f64, pixel_size: f64) -> Result<Vec<GrowthBin>> {
    check_width(bin_width)?;
    if series.years < 2 {
        return Err(Error::InvalidArgument("growth curves need at least two years".into()));
    }
    let px = series.rows * series.cols;
    let first = series.year_slice(0);
    let nbins = first.iter().map(|h| bin_of(*h, bin_width)).max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); nbins];
    for (p, h) in first.iter().enumerate() {
        members[bin_of(*h, bin_width)].push(p);
    }
    Ok(members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let change = if m.is_empty() {
                Vec::new()
            } else {
                (1..series.years)
                    .map(|y| {
                        let d: Vec<f64> = m.iter().map(|&p| series.data[y * px + p] - first[p]).collect();
                        Quartiles::of(&d).expect("non-empty bin")
                    })
                    .collect()
            };
            GrowthBin {
                lo: i as f64 * bin_width,
                hi: (i + 1) as f64 * bin_width,
                count: m.len(),
                area_m2: m.len() as f64 * pixel_size * pixel_size,
                change,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagBin {
    pub lo: f64,
    pub hi: f64,
    /// Unordered point pairs whose distance falls in the bin.
    pub pairs: usize,
    /// `None` when fewer than two pairs fall in the bin or a side is constant.
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    s: f64,
    ss: f64,
    sxy: f64,
}

impl Moments {
    fn add(&mut self, o: &Moments) {
        self.n += o.n;
        self.s += o.s;
        self.ss += o.ss;
        self.sxy += o.sxy;
    }
}

/// Pearson correlation of the values of point pairs, per distance bin of
/// width `lag_bin` below `max_lag`. Each pair enters in both orders, so the
/// coefficient does not depend on point order.
pub fn spatial_autocorrelation(points: &[(f64, f64, f64)], lag_bin: f64, max_lag: f64) -> Result<Vec<LagBin>> {
    check_width(lag_bin)?;
    if points.len() < 2 {
        return Err(Error::InvalidArgument("need at least two points".into()));
    }
    let nbins = (max_lag / lag_bin).ceil() as usize;
    const CHUNK: usize = 64;
    let partial: Vec<Vec<Moments>> = (0..points.len())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|rows| {
            let mut acc = vec![Moments::default(); nbins];
            for &i in rows {
                let (xi, yi, vi) = points[i];
                for &(xj, yj, vj) in &points[i + 1..] {
                    let d = (xi - xj).hypot(yi - yj);
                    if d >= max_lag {
                        continue;
                    }
                    let m = &mut acc[(d / lag_bin) as usize];
                    m.n += 1.0;
                    m.s += vi + vj;
                    m.ss += vi * vi + vj * vj;
                    m.sxy += 2.0 * vi * vj;
                }
            }
            acc
        })
        .collect();
    let mut total = vec![Moments::default(); nbins];
    for p in &partial {
        for (t, m) in total.iter_mut().zip(p) {
            t.add(m);
        }
    }
    Ok(total
        .iter()
        .enumerate()
        .map(|(b, m)| {
            let pairs = m.n as usize;
            let correlation = (pairs >= 2).then(|| {
                let n2 = 2.0 * m.n;
                let mu = m.s / n2;
                let var = m.ss / n2 - mu * mu;
                let cov = m.sxy / n2 - mu * mu;
                (var > 1e-12 * (m.ss / n2).max(1e-300)).then(|| cov / var)
            });
            LagBin {
                lo: b as f64 * lag_bin,
                hi: ((b + 1) as f64 * lag_bin).min(max_lag),
                pairs,
                correlation: correlation.flatten(),
            }
        })
        .collect())
}
