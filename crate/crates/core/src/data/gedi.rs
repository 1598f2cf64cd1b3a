//! LiDAR shot screening and rasterization onto the label grid.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeamPower {
    High,
    Low,
}

/// One footprint measurement. `x`/`y` locate the highest return in projected
/// meters (x east, y north).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GediShot {
    pub x: f64,
    pub y: f64,
    pub year: i32,
    pub rh98: f64,
    pub beam_power: BeamPower,
    pub num_modes: u32,
    pub quality_flag: u8,
    pub degrade_flag: u8,
    pub sensitivity: f64,
}

/// Screening criteria in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Rh98,
    BeamPower,
    NumModes,
    QualityFlag,
    DegradeFlag,
    Sensitivity,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Criterion::Rh98 => "rh98",
            Criterion::BeamPower => "beam_power",
            Criterion::NumModes => "num_modes",
            Criterion::QualityFlag => "quality_flag",
            Criterion::DegradeFlag => "degrade_flag",
            Criterion::Sensitivity => "sensitivity",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Accept,
    Reject(Criterion),
}

pub const RH98_MAX: f64 = 150.0;
pub const MIN_SENSITIVITY: f64 = 0.95;

/// Accepts a shot iff rh98 ∈ [0, 150], full-power beam, at least one mode,
/// quality flag 1, degrade flag 0 and sensitivity ≥ 0.95.
pub fn gedi_quality_filter(shot: &GediShot) -> FilterDecision {
    let checks = [
        (Criterion::Rh98, (0.0..=RH98_MAX).contains(&shot.rh98)),
        (Criterion::BeamPower, shot.beam_power == BeamPower::High),
        (Criterion::NumModes, shot.num_modes >= 1),
        (Criterion::QualityFlag, shot.quality_flag == 1),
        (Criterion::DegradeFlag, shot.degrade_flag == 0),
        (Criterion::Sensitivity, shot.sensitivity >= MIN_SENSITIVITY),
    ];
    match checks.iter().find(|(_, ok)| !ok) {
        Some((c, _)) => FilterDecision::Reject(*c),
        None => FilterDecision::Accept,
    }
}

/// North-up pixel grid: `origin` is the top-left corner, rows grow southwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridGeometry {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
    pub rows: usize,
    pub cols: usize,
    pub first_year: i32,
    pub years: usize,
}

impl GridGeometry {
    /// Pixel `(row, col)` containing the point, if inside the grid.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin_x) / self.pixel_size).floor();
        let r = ((self.origin_y - y) / self.pixel_size).floor();
        if c >= 0.0 && r >= 0.0 && (c as usize) < self.cols && (r as usize) < self.rows {
            Some((r as usize, c as usize))
        } else {
            None
        }
    }

    pub fn year_index(&self, year: i32) -> Option<usize> {
        let i = year - self.first_year;
        (i >= 0 && (i as usize) < self.years).then_some(i as usize)
    }
}

/// Sparse yearly labels: `heights[y, r, c]` is meaningful where `valid` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub years: usize,
    pub rows: usize,
    pub cols: usize,
    pub heights: Vec<f32>,
    pub valid: Vec<bool>,
}

impl LabelGrid {
    pub fn empty(years: usize, rows: usize, cols: usize) -> Self {
        let n = years * rows * cols;
        LabelGrid {
            years,
            rows,
            cols,
            heights: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    pub fn index(&self, y: usize, r: usize, c: usize) -> usize {
        (y * self.rows + r) * self.cols + c
    }

    pub fn count_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RasterStats {
    pub placed: usize,
    pub out_of_grid: usize,
}

/// Assigns every shot to the pixel and year containing it; collisions keep the
/// larger rh98. Shots outside the grid or its years are skipped and counted.
pub fn rasterize_labels(shots: &[GediShot], geom: &GridGeometry) -> (LabelGrid, RasterStats) {
    let mut grid = LabelGrid::empty(geom.years, geom.rows, geom.cols);
    let mut stats = RasterStats::default();
    for s in shots {
        let (Some((r, c)), Some(y)) = (geom.locate(s.x, s.y), geom.year_index(s.year)) else {
            stats.out_of_grid += 1;
            continue;
        };
        let i = grid.index(y, r, c);
        let h = s.rh98 as f32;
        if !grid.valid[i] || h > grid.heights[i] {
            grid.heights[i] = h;
        }
        grid.valid[i] = true;
        stats.placed += 1;
    }
    (grid, stats)
}

/// Reads shots from a CSV file with header
/// `x,y,year,rh98,beam_power,num_modes,quality_flag,degrade_flag,sensitivity`
/// (`beam_power` is `high` or `low`).
pub fn read_shots_csv(path: impl AsRef<Path>) -> Result<Vec<GediShot>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut shots = Vec::new();
    for (line, rec) in rdr.deserialize::<GediShot>().enumerate() {
        let shot = rec?;
        let finite = [shot.x, shot.y, shot.rh98, shot.sensitivity]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Format(format!("shot {} has non-finite fields", line + 1)));
        }
        shots.push(shot);
    }
    Ok(shots)
}

pub fn write_shots_csv(path: impl AsRef<Path>, shots: &[GediShot]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in shots {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn good_shot() -> GediShot {
        GediShot {
            x: 5.0,
            y: -5.0,
            year: 2020,
            rh98: 20.0,
            beam_power: BeamPower::High,
            num_modes: 2,
            quality_flag: 1,
            degrade_flag: 0,
            sensitivity: 0.97,
        }
    }

    #[test]
    fn filter_boundaries() {
        let s = good_shot();
        assert_eq!(gedi_quality_filter(&s), FilterDecision::Accept);
        let with = |f: &dyn Fn(&mut GediShot)| {
            let mut s = good_shot();
            f(&mut s);
            gedi_quality_filter(&s)
        };
        assert_eq!(with(&|s| s.sensitivity = 0.95), FilterDecision::Accept);
        assert_eq!(with(&|s| s.sensitivity = 0.94), FilterDecision::Reject(Criterion::Sensitivity));
        assert_eq!(with(&|s| s.rh98 = 150.0), FilterDecision::Accept);
        assert_eq!(with(&|s| s.rh98 = 151.0), FilterDecision::Reject(Criterion::Rh98));
        assert_eq!(with(&|s| s.rh98 = -0.1), FilterDecision::Reject(Criterion::Rh98));
        assert_eq!(with(&|s| s.beam_power = BeamPower::Low), FilterDecision::Reject(Criterion::BeamPower));
        assert_eq!(with(&|s| s.num_modes = 0), FilterDecision::Reject(Criterion::NumModes));
        assert_eq!(with(&|s| s.quality_flag = 0), FilterDecision::Reject(Criterion::QualityFlag));
        assert_eq!(with(&|s| s.degrade_flag = 1), FilterDecision::Reject(Criterion::DegradeFlag));
        // The first failing criterion is reported.
        assert_eq!(
            with(&|s| {
                s.num_modes = 0;
                s.sensitivity = 0.1
            }),
            FilterDecision::Reject(Criterion::NumModes)
        );
    }

    #[test]
    fn rasterization_keeps_the_maximum() {
        let geom = GridGeometry {
            origin_x: 0.0,
            origin_y: 0.0,
            pixel_size: 10.0,
            rows: 4,
            cols: 4,
            first_year: 2020,
            years: 2,
        };
        let (empty, _) = rasterize_labels(&[], &geom);
        assert_eq!(empty.count_valid(), 0);
        let mut a = good_shot();
        a.rh98 = 12.0;
        let mut b = good_shot();
        b.rh98 = 18.0;
        b.x = 9.9;
        let mut out = good_shot();
        out.x = 45.0;
        let mut late = good_shot();
        late.year = 2023;
        let (g, stats) = rasterize_labels(&[a, b.clone(), out, late, b], &geom);
        assert_eq!(stats, RasterStats { placed: 3, out_of_grid: 2 });
        assert_eq!(g.count_valid(), 1);
        assert_eq!(g.heights[g.index(0, 0, 0)], 18.0);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shots.csv");
        let mut b = good_shot();
        b.beam_power = BeamPower::Low;
        write_shots_csv(&path, &[good_shot(), b.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x,y,year,rh98,beam_power,num_modes,quality_flag,degrade_flag,sensitivity"));
        assert_eq!(read_shots_csv(&path).unwrap(), vec![good_shot(), b]);
    }
}
