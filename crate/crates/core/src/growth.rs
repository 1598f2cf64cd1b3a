//! Growth-loss framework: disturbance detection on a reference height series,
//! spatial min-pooling of the detected years, slope-constrained piecewise linear
//! regression, pseudo-label construction and the growth loss itself.
//!
//! Year indices are 1-based throughout this module: a split year `y` means the
//! pre-disturbance segment is `z[1..=y]` and the post-disturbance segment is
//! `z[y+1..=Y]`. A split year equal to `Y` means "no disturbance".

use crate::error::{Error, Result};
use crate::grid::Cube;
use serde::{Deserialize, Serialize};

/// Yearly canopy heights of one pixel, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightSeries(Vec<f64>);

impl HeightSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidSeries(format!(
                "need at least 2 years, got {}",
                values.len()
            )));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidSeries(format!(
                "year {} has invalid height {}",
                i + 1,
                v
            )));
        }
        Ok(HeightSeries(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn years(&self) -> usize {
        self.0.len()
    }
}

/// Distance used to compare pseudo-labels with predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    #[default]
    L2,
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowthConfig {
    /// Minimal admissible growth slope (m/yr).
    pub s_min: f64,
    /// Maximal admissible growth slope (m/yr).
    pub s_max: f64,
    /// A disturbance keeps at most this fraction of the previous height.
    pub drop_fraction: f64,
    /// A disturbance removes at least this many meters.
    pub drop_absolute: f64,
    /// Height the series must fall to within two years of the drop.
    pub low_threshold: f64,
    /// Side length of the square min-pool window.
    pub pool_size: usize,
    pub norm: LossNorm,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        GrowthConfig {
            s_min: 0.0,
            s_max: 3.0,
            drop_fraction: 0.5,
            drop_absolute: 4.0,
            low_threshold: 10.0,
            pool_size: 3,
            norm: LossNorm::L2,
        }
    }
}

impl GrowthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_min < self.s_max) {
            return Err(Error::Config(format!(
                "s_min ({}) must be below s_max ({})",
                self.s_min, self.s_max
            )));
        }
        if !(self.drop_fraction > 0.0 && self.drop_fraction < 1.0) {
            return Err(Error::Config("drop_fraction must lie in (0,1)".into()));
        }
        if !(self.drop_absolute > 0.0) {
            return Err(Error::Config("drop_absolute must be positive".into()));
        }
        if !(self.low_threshold > 0.0) {
            return Err(Error::Config("low_threshold must be positive".into()));
        }
        if self.pool_size == 0 || self.pool_size % 2 == 0 {
            return Err(Error::Config("pool_size must be odd and >= 1".into()));
        }
        Ok(())
    }
}

/// Result of a slope-constrained least-squares line fit over positions `1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub slope: f64,
    pub intercept: f64,
    pub fitted: Vec<f64>,
}

/// Piecewise-affine pseudo-labels with the split year they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSeries {
    pub values: Vec<f64>,
    pub split_year: usize,
}

/// H×W grid of pre-disturbance year indices in `1..=Y`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisturbanceMap {
    pub rows: usize,
    pub cols: usize,
    pub years: usize,
    pub indices: Vec<usize>,
}

impl DisturbanceMap {
    pub fn get(&self, row: usize, col: usize) -> usize {
        self.indices[row * self.cols + col]
    }

    /// Number of pixels per split year; entry `k` counts year `k + 1`.
    pub fn counts_per_year(&self) -> Vec<usize> {
        let mut counts = vec![0; self.years];
        for &i in &self.indices {
            counts[i - 1] += 1;
        }
        counts
    }
}

/// Is year `y` (1-based, `y < Y`) directly followed by a disturbance?
fn is_disturbance_year(z: &[f64], y: usize, cfg: &GrowthConfig) -> bool {
    let prev = z[y - 1];
    let next = z[y];
    let dropped = next <= (cfg.drop_fraction * prev).min(prev - cfg.drop_absolute);
    // z[y+2] may not exist at the end of the series; use what exists.
    let low = match z.get(y + 1) {
        Some(&after) => next.min(after),
        None => next,
    };
    dropped && low <= cfg.low_threshold
}

pub(crate) fn disturbance_years_raw(z: &[f64], cfg: &GrowthConfig) -> Vec<usize> {
    (1..z.len())
        .filter(|&y| is_disturbance_year(z, y, cfg))
        .collect()
}

pub(crate) fn local_index_raw(z: &[f64], cfg: &GrowthConfig) -> usize {
    (1..z.len())
        .find(|&y| is_disturbance_year(z, y, cfg))
        .unwrap_or(z.len())
}

/// Years (1-based, ascending) directly preceding a disturbance.
pub fn detect_disturbance_years(z: &HeightSeries, cfg: &GrowthConfig) -> Vec<usize> {
    disturbance_years_raw(z.values(), cfg)
}

/// Earliest year preceding a disturbance, or `Y` if none was detected.
pub fn local_disturbance_index(z: &HeightSeries, cfg: &GrowthConfig) -> usize {
    local_index_raw(z.values(), cfg)
}

/// Minimum over the `pool_size × pool_size` neighbourhood of every cell.
/// Windows are truncated at the grid border rather than padded.
pub fn min_pool(grid: &[usize], rows: usize, cols: usize, pool_size: usize) -> Result<Vec<usize>> {
    if grid.len() != rows * cols {
        return Err(Error::shape(
            "min_pool",
            format!("{} cells for a {}x{} grid", grid.len(), rows, cols),
        ));
    }
    if pool_size == 0 || pool_size % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "pool size must be odd, got {pool_size}"
        )));
    }
    let half = pool_size / 2;
    // Separable: rows first, then columns.
    let mut horizontal = vec![0usize; grid.len()];
    for r in 0..rows {
        for c in 0..cols {
            let lo = c.saturating_sub(half);
            let hi = (c + half).min(cols - 1);
            horizontal[r * cols + c] = grid[r * cols + lo..=r * cols + hi]
                .iter()
                .copied()
                .min()
                .unwrap();
        }
    }
    let mut out = vec![0usize; grid.len()];
    for r in 0..rows {
        let lo = r.saturating_sub(half);
        let hi = (r + half).min(rows - 1);
        for c in 0..cols {
            out[r * cols + c] = (lo..=hi).map(|rr| horizontal[rr * cols + c]).min().unwrap();
        }
    }
    Ok(out)
}

fn ols_slope(z: &[f64]) -> f64 {
    let n = z.len();
    if n < 2 {
        return 0.0;
    }
    let x_mean = (n as f64 + 1.0) / 2.0;
    let z_mean = z.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, &v) in z.iter().enumerate() {
        let dx = (i + 1) as f64 - x_mean;
        sxy += dx * (v - z_mean);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Least-squares line over `(1, z1) … (N, zN)` with its slope clamped into
/// `[s_min, s_max]` and its intercept chosen so the fit keeps the mean of `z`.
pub fn constrained_linreg(z: &[f64], s_min: f64, s_max: f64) -> Result<RegressionFit> {
    if z.is_empty() {
        return Err(Error::InvalidSeries("cannot regress an empty series".into()));
    }
    if !(s_min < s_max) {
        return Err(Error::InvalidArgument(format!(
            "slope bounds [{s_min}, {s_max}] are empty"
        )));
    }
    Ok(fit_segment(z, s_min, s_max))
}

fn fit_segment(z: &[f64], s_min: f64, s_max: f64) -> RegressionFit {
    let n = z.len();
    let slope = ols_slope(z).max(s_min).min(s_max);
    let mean = z.iter().sum::<f64>() / n as f64;
    let intercept = mean - slope * (n as f64 + 1.0) / 2.0;
    let fitted = (1..=n).map(|k| slope * k as f64 + intercept).collect();
    RegressionFit {
        slope,
        intercept,
        fitted,
    }
}

pub(crate) fn pseudo_labels_raw(z: &[f64], split_year: usize, cfg: &GrowthConfig) -> Vec<f64> {
    let mut out = fit_segment(&z[..split_year], cfg.s_min, cfg.s_max).fitted;
    if split_year < z.len() {
        out.extend(fit_segment(&z[split_year..], cfg.s_min, cfg.s_max).fitted);
    }
    out
}

/// Concatenation of the constrained fits before and after `split_year`.
pub fn pseudo_labels(
    z_ref: &HeightSeries,
    split_year: usize,
    cfg: &GrowthConfig,
) -> Result<PseudoLabelSeries> {
    let y = z_ref.years();
    if split_year < 1 || split_year > y {
        return Err(Error::InvalidArgument(format!(
            "split year {split_year} outside 1..={y}"
        )));
    }
    Ok(PseudoLabelSeries {
        values: pseudo_labels_raw(z_ref.values(), split_year, cfg),
        split_year,
    })
}

pub(crate) fn distance(pseudo: &[f64], pred: &[f64], norm: LossNorm) -> f64 {
    let y = pseudo.len() as f64;
    let d = match norm {
        LossNorm::L2 => pseudo
            .iter()
            .zip(pred)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt(),
        LossNorm::L1 => pseudo.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum(),
    };
    d / y
}

/// `(1/Y) · ‖pseudo − pred‖` for already-built pseudo-labels.
pub fn growth_loss_against(pseudo: &[f64], pred: &[f64], cfg: &GrowthConfig) -> Result<f64> {
    if pseudo.len() != pred.len() {
        return Err(Error::shape(
            "growth_loss",
            format!("{} pseudo-labels vs {} predictions", pseudo.len(), pred.len()),
        ));
    }
    if pseudo.is_empty() {
        return Err(Error::InvalidSeries("empty series".into()));
    }
    Ok(distance(pseudo, pred, cfg.norm))
}

/// Growth loss of one pixel given the split year taken from the pooled map.
pub fn growth_loss(
    z_ref: &HeightSeries,
    z_pred: &HeightSeries,
    split_year: usize,
    cfg: &GrowthConfig,
) -> Result<f64> {
    if z_ref.years() != z_pred.years() {
        return Err(Error::shape(
            "growth_loss",
            format!("{} reference years vs {} predicted", z_ref.years(), z_pred.years()),
        ));
    }
    let pseudo = pseudo_labels(z_ref, split_year, cfg)?;
    growth_loss_against(&pseudo.values, z_pred.values(), cfg)
}

fn check_reference(z_ref: &Cube) -> Result<()> {
    if z_ref.years < 2 {
        return Err(Error::shape("disturbance_map", "need at least 2 years"));
    }
    if z_ref.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSeries("reference cube has non-finite values".into()));
    }
    Ok(())
}

/// Per-pixel local disturbance indices before pooling.
pub fn local_disturbance_map(z_ref: &Cube, cfg: &GrowthConfig) -> Result<DisturbanceMap> {
    check_reference(z_ref)?;
    let mut indices = Vec::with_capacity(z_ref.pixels());
    let mut series = vec![0.0; z_ref.years];
    for r in 0..z_ref.rows {
        for c in 0..z_ref.cols {
            for (y, s) in series.iter_mut().enumerate() {
                *s = z_ref.get(y, r, c);
            }
            indices.push(local_index_raw(&series, cfg));
        }
    }
    Ok(DisturbanceMap {
        rows: z_ref.rows,
        cols: z_ref.cols,
        years: z_ref.years,
        indices,
    })
}

/// Local disturbance indices followed by the min-pool.
pub fn disturbance_map(z_ref: &Cube, cfg: &GrowthConfig) -> Result<DisturbanceMap> {
    let local = local_disturbance_map(z_ref, cfg)?;
    let indices = min_pool(&local.indices, local.rows, local.cols, cfg.pool_size)?;
    Ok(DisturbanceMap { indices, ..local })
}

/// Pseudo-labels for every pixel of a reference cube, split by the pooled map.
pub fn pseudo_label_cube(z_ref: &Cube, cfg: &GrowthConfig) -> Result<(Cube, DisturbanceMap)> {
    let map = disturbance_map(z_ref, cfg)?;
    let mut out = Cube::zeros(z_ref.years, z_ref.rows, z_ref.cols);
    for r in 0..z_ref.rows {
        for c in 0..z_ref.cols {
            let series = z_ref.series(r, c);
            let labels = pseudo_labels_raw(&series, map.get(r, c), cfg);
            out.set_series(r, c, &labels);
        }
    }
    Ok((out, map))
}

/// Mean over pixels of the per-pixel growth loss.
pub fn growth_loss_map(z_ref: &Cube, z_pred: &Cube, cfg: &GrowthConfig) -> Result<f64> {
    if !z_ref.same_shape(z_pred) {
        return Err(Error::shape(
            "growth_loss_map",
            format!(
                "reference {}x{}x{} vs prediction {}x{}x{}",
                z_ref.years, z_ref.rows, z_ref.cols, z_pred.years, z_pred.rows, z_pred.cols
            ),
        ));
    }
    let (pseudo, _) = pseudo_label_cube(z_ref, cfg)?;
    let mut total = 0.0;
    for r in 0..z_ref.rows {
        for c in 0..z_ref.cols {
            total += distance(&pseudo.series(r, c), &z_pred.series(r, c), cfg.norm);
        }
    }
    Ok(total / z_ref.pixels() as f64)
}

/// Reads height series from CSV rows with header `y1..yY`, one pixel per row.
/// An empty file yields no series; rows of the wrong length are rejected.
pub fn read_series_csv(path: impl AsRef<std::path::Path>) -> Result<Vec<HeightSeries>> {
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let width = rdr.headers()?.len();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::InvalidSeries(format!(
                "row {} has {} values, header has {width}",
                i + 1,
                rec.len()
            )));
        }
        let values = rec
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::InvalidSeries(format!("row {}: `{v}` is not a number", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(HeightSeries::new(values)?);
    }
    Ok(out)
}

/// Writes pseudo-label rows `y1..yY,split_year`.
pub fn write_pseudo_label_csv(path: impl AsRef<std::path::Path>, rows: &[PseudoLabelSeries], years: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=years).map(|y| format!("y{y}")).collect();
    header.push("split_year".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
        rec.push(r.split_year.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hs(v: &[f64]) -> HeightSeries {
        HeightSeries::new(v.to_vec()).unwrap()
    }

    fn cfg() -> GrowthConfig {
        GrowthConfig::default()
    }

    #[test]
    fn detects_single_clear_cut() {
        let z = hs(&[20., 21., 22., 5., 6., 7., 8.]);
        assert_eq!(detect_disturbance_years(&z, &cfg()), vec![3]);
        assert_eq!(local_disturbance_index(&z, &cfg()), 3);
    }

    #[test]
    fn flat_and_slow_declines_are_not_disturbances() {
        assert!(detect_disturbance_years(&hs(&[0.0; 7]), &cfg()).is_empty());
        assert!(detect_disturbance_years(&hs(&[10., 9., 8.]), &cfg()).is_empty());
        assert_eq!(local_disturbance_index(&hs(&[5., 6., 7., 8., 9., 10., 11.]), &cfg()), 7);
    }

    #[test]
    fn earliest_of_several_disturbances_wins() {
        let z = hs(&[30., 2., 3., 30., 2., 3., 4.]);
        assert_eq!(detect_disturbance_years(&z, &cfg()), vec![1, 4]);
        assert_eq!(local_disturbance_index(&z, &cfg()), 1);
    }

    #[test]
    fn last_year_uses_only_existing_index() {
        // Drop in the final transition: only z[Y] is available for the low test.
        let z = hs(&[20., 21., 22., 23., 24., 25., 6.]);
        assert_eq!(detect_disturbance_years(&z, &cfg()), vec![6]);
        let z = hs(&[40., 40., 40., 40., 40., 40., 15.]);
        assert!(detect_disturbance_years(&z, &cfg()).is_empty());
    }

    #[test]
    fn drop_must_clear_both_thresholds() {
        // 8 -> 3.9: halves and loses 4.1 m.
        assert_eq!(detect_disturbance_years(&hs(&[8., 3.9, 4.]), &cfg()), vec![1]);
        // 6 -> 2.5: halves but loses only 3.5 m.
        assert!(detect_disturbance_years(&hs(&[6., 2.5, 3.]), &cfg()).is_empty());
        // 30 -> 20 -> 5: the first drop is not 50 %, the low height comes later.
        assert_eq!(detect_disturbance_years(&hs(&[30., 20., 5.]), &cfg()), vec![2]);
        // 30 -> 12 -> 9: drop qualifies and height reaches <=10 within two years.
        assert_eq!(detect_disturbance_years(&hs(&[30., 12., 9.]), &cfg()), vec![1]);
    }

    #[test]
    fn short_series_rejected() {
        assert!(HeightSeries::new(vec![3.0]).is_err());
        assert!(HeightSeries::new(vec![3.0, -1.0]).is_err());
        assert!(HeightSeries::new(vec![3.0, f64::NAN]).is_err());
    }

    #[test]
    fn min_pool_examples() {
        let mut g = vec![7usize; 9];
        g[4] = 3;
        assert_eq!(min_pool(&g, 3, 3, 3).unwrap(), vec![3; 9]);
        assert_eq!(min_pool(&[4; 12], 3, 4, 3).unwrap(), vec![4; 12]);
        assert_eq!(
            min_pool(&[7, 7, 2, 7, 7], 1, 5, 3).unwrap(),
            vec![7, 2, 2, 2, 7]
        );
        assert_eq!(min_pool(&[5, 1, 5], 1, 3, 1).unwrap(), vec![5, 1, 5]);
        assert!(min_pool(&[1, 2], 1, 3, 3).is_err());
        assert!(min_pool(&[1, 2, 3], 1, 3, 2).is_err());
    }

    #[test]
    fn min_pool_corner_is_truncated() {
        // A disturbance in a corner spreads to its 2x2 truncated neighbourhood only.
        let mut g = vec![7usize; 16];
        g[0] = 2;
        let out = min_pool(&g, 4, 4, 3).unwrap();
        let expect: Vec<usize> = (0..16)
            .map(|i| if i / 4 <= 1 && i % 4 <= 1 { 2 } else { 7 })
            .collect();
        assert_eq!(out, expect);
    }

    #[test]
    fn linreg_examples() {
        let f = constrained_linreg(&[20., 21., 22.], 0., 3.).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12);
        assert!((f.intercept - 19.0).abs() < 1e-12);
        assert_eq!(f.fitted, vec![20., 21., 22.]);

        let f = constrained_linreg(&[10., 9., 8.], 0., 3.).unwrap();
        assert_eq!(f.slope, 0.0);
        assert_eq!(f.intercept, 9.0);
        assert_eq!(f.fitted, vec![9., 9., 9.]);

        let f = constrained_linreg(&[0., 10., 20.], 0., 3.).unwrap();
        assert_eq!(f.slope, 3.0);
        assert_eq!(f.intercept, 4.0);
        assert_eq!(f.fitted, vec![7., 10., 13.]);
    }

    #[test]
    fn linreg_single_point_and_errors() {
        let f = constrained_linreg(&[12.5], 0., 3.).unwrap();
        assert_eq!(f.slope, 0.0);
        assert_eq!(f.fitted, vec![12.5]);
        // A negative lower bound is still clamped into.
        let f = constrained_linreg(&[4.0], 1., 3.).unwrap();
        assert_eq!(f.slope, 1.0);
        assert_eq!(f.fitted, vec![4.0]);
        assert!(constrained_linreg(&[], 0., 3.).is_err());
        assert!(constrained_linreg(&[1., 2.], 3., 3.).is_err());
    }

    #[test]
    fn pseudo_label_examples() {
        let z = hs(&[20., 21., 22., 5., 6., 7., 8.]);
        let p = pseudo_labels(&z, 3, &cfg()).unwrap();
        for (a, b) in p.values.iter().zip(z.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let z = hs(&[9.; 7]);
        assert_eq!(pseudo_labels(&z, 7, &cfg()).unwrap().values, vec![9.; 7]);

        let raw = [10., 9., 8., 30., 2., 3., 4.];
        let p = pseudo_labels(&hs(&raw), 7, &cfg()).unwrap();
        let mean = raw.iter().sum::<f64>() / 7.0;
        // OLS slope by hand: sum((x-4)(z-mean)) / 28.
        let sxy: f64 = raw
            .iter()
            .enumerate()
            .map(|(i, z)| (i as f64 + 1.0 - 4.0) * (z - mean))
            .sum();
        let s = (sxy / 28.0).clamp(0.0, 3.0);
        for (i, v) in p.values.iter().enumerate() {
            let expect = mean + s * (i as f64 + 1.0 - 4.0);
            assert!((v - expect).abs() < 1e-12);
        }
        assert!(pseudo_labels(&z, 0, &cfg()).is_err());
        assert!(pseudo_labels(&z, 8, &cfg()).is_err());
    }

    #[test]
    fn growth_loss_examples() {
        let c = cfg();
        assert_eq!(growth_loss_against(&[9.; 3], &[9.; 3], &c).unwrap(), 0.0);
        let l = growth_loss_against(&[9.; 3], &[10., 9., 8.], &c).unwrap();
        assert!((l - 2f64.sqrt() / 3.0).abs() < 1e-12);
        let p = [20., 21., 22., 5., 6., 7., 8.];
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let l = growth_loss_against(&p, &[0.; 7], &c).unwrap();
        assert!((l - norm / 7.0).abs() < 1e-12);

        let l1 = GrowthConfig {
            norm: LossNorm::L1,
            ..GrowthConfig::default()
        };
        let l = growth_loss_against(&[9.; 3], &[10., 9., 8.], &l1).unwrap();
        assert!((l - 2.0 / 3.0).abs() < 1e-12);
        assert!(growth_loss_against(&[1.; 3], &[1.; 2], &c).is_err());
    }

    #[test]
    fn growth_loss_zero_for_own_pseudo_labels() {
        let z = hs(&[10., 9., 8., 30., 2., 3., 4.]);
        let p = pseudo_labels(&z, 4, &cfg()).unwrap();
        let pred = HeightSeries::new(p.values.clone()).unwrap();
        assert!(growth_loss(&z, &pred, 4, &cfg()).unwrap() < 1e-12);
        let short = hs(&[1., 2.]);
        assert!(growth_loss(&z, &short, 4, &cfg()).is_err());
    }

    fn disturbed_cube() -> Cube {
        let disturbed = [20., 21., 22., 5., 6., 7., 8.];
        Cube::from_fn(7, 5, 5, |y, r, c| {
            if (r, c) == (2, 1) {
                disturbed[y]
            } else {
                5.0 + y as f64
            }
        })
    }

    #[test]
    fn disturbance_map_examples() {
        let zero = Cube::zeros(7, 4, 3);
        let m = disturbance_map(&zero, &cfg()).unwrap();
        assert!(m.indices.iter().all(|&i| i == 7));

        let m = disturbance_map(&disturbed_cube(), &cfg()).unwrap();
        for r in 0..5usize {
            for c in 0..5usize {
                let near = r.abs_diff(2) <= 1 && c.abs_diff(1) <= 1;
                assert_eq!(m.get(r, c), if near { 3 } else { 7 }, "pixel {r},{c}");
            }
        }
        assert_eq!(m.counts_per_year()[2], 9);

        let one = Cube::new(3, 1, 1, vec![30., 2., 3.]).unwrap();
        assert_eq!(disturbance_map(&one, &cfg()).unwrap().indices, vec![1]);
    }

    #[test]
    fn loss_map_is_mean_of_pixels() {
        let z_ref = disturbed_cube();
        let (pseudo, _) = pseudo_label_cube(&z_ref, &cfg()).unwrap();
        assert!(growth_loss_map(&z_ref, &pseudo, &cfg()).unwrap() < 1e-12);

        let z_ref = Cube::new(2, 1, 2, vec![5., 5., 6., 6.]).unwrap();
        let z_pred = Cube::new(2, 1, 2, vec![5., 8., 6., 6.]).unwrap();
        // Both reference pixels fit exactly to [5, 6]; pixel 1 predicts [8, 6].
        let a = 0.0;
        let b = ((5.0f64 - 8.0).powi(2) + 0.0).sqrt() / 2.0;
        let l = growth_loss_map(&z_ref, &z_pred, &cfg()).unwrap();
        assert!((l - (a + b) / 2.0).abs() < 1e-12);
        let bad = Cube::zeros(2, 2, 2);
        assert!(growth_loss_map(&z_ref, &bad, &cfg()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let bad = GrowthConfig {
            pool_size: 2,
            ..cfg()
        };
        assert!(bad.validate().is_err());
        let bad = GrowthConfig {
            s_min: 3.0,
            ..cfg()
        };
        assert!(bad.validate().is_err());
    }
}
