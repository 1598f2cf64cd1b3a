//! Sample exclusion predicates and the train/test separation policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SLOPE_RADIUS_M: f64 = 70.0;
pub const MAX_SLOPE_DEG: f64 = 20.0;
pub const MAX_URBAN_FRACTION: f64 = 0.10;
pub const MIN_SPLIT_DISTANCE_M: f64 = 360.0;
/// Side of one patch / test tile: 96 pixels at 10 m.
pub const PATCH_SIDE_M: f64 = 960.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Keep,
    Exclude,
}

impl Verdict {
    fn exclude_if(cond: bool) -> Self {
        if cond {
            Verdict::Exclude
        } else {
            Verdict::Keep
        }
    }
}

/// Terrain slope in degrees at the center of a square `size × size` DEM window
/// (row-major, rows southwards), from a least-squares plane through every
/// pixel center within `radius` of the central pixel.
pub fn terrain_slope_degrees(dem: &[f64], size: usize, pitch: f64, radius: f64) -> Result<f64> {
    if size % 2 == 0 || dem.len() != size * size {
        return Err(Error::InvalidArgument(format!(
            "DEM window must be an odd square, got {} values for side {size}",
            dem.len()
        )));
    }
    if !(pitch > 0.0 && radius > 0.0) {
        return Err(Error::InvalidArgument("pitch and radius must be positive".into()));
    }
    let half = size / 2;
    if (half as f64) * pitch < radius {
        return Err(Error::InvalidArgument(format!(
            "window of side {size} at {pitch} m does not cover a {radius} m radius"
        )));
    }
    let mut pts = Vec::new();
    for r in 0..size {
        for c in 0..size {
            let x = (c as f64 - half as f64) * pitch;
            let y = (half as f64 - r as f64) * pitch;
            if x * x + y * y <= radius * radius + 1e-9 {
                pts.push((x, y, dem[r * size + c]));
            }
        }
    }
    let n = pts.len() as f64;
    let (sx, sy, sz) = pts
        .iter()
        .fold((0.0, 0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2));
    let (mx, my, mz) = (sx / n, sy / n, sz / n);
    // Demeaning removes the intercept from the normal equations.
    let (mut sxx, mut sxy, mut syy, mut sxz, mut syz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y, z) in &pts {
        let (dx, dy, dz) = (x - mx, y - my, z - mz);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
        sxz += dx * dz;
        syz += dy * dz;
    }
    let det = sxx * syy - sxy * sxy;
    if det.abs() < 1e-12 {
        return Err(Error::Numerical("degenerate plane fit".into()));
    }
    let a = (sxz * syy - syz * sxy) / det;
    let b = (syz * sxx - sxz * sxy) / det;
    Ok(a.hypot(b).atan().to_degrees())
}

/// Excludes a pixel whose 70 m-radius terrain slope exceeds 20°.
pub fn slope_exclusion(dem: &[f64], size: usize, pitch: f64) -> Result<Verdict> {
    let slope = terrain_slope_degrees(dem, size, pitch, SLOPE_RADIUS_M)?;
    Ok(Verdict::exclude_if(slope > MAX_SLOPE_DEG))
}

/// Excludes a pixel whose built-up fraction exceeds 10 %.
pub fn urban_exclusion(fraction: f64) -> Result<Verdict> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "urban fraction {fraction} outside [0, 1]"
        )));
    }
    Ok(Verdict::exclude_if(fraction > MAX_URBAN_FRACTION))
}

/// Axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn centered(cx: f64, cy: f64, side: f64) -> Self {
        let h = side / 2.0;
        Rect {
            x0: cx - h,
            y0: cy - h,
            x1: cx + h,
            y1: cy + h,
        }
    }

    /// Euclidean gap between the two closed rectangles (0 if they touch).
    pub fn distance(&self, other: &Rect) -> f64 {
        let dx = (other.x0 - self.x1).max(self.x0 - other.x1).max(0.0);
        let dy = (other.y0 - self.y1).max(self.y0 - other.y1).max(0.0);
        dx.hypot(dy)
    }
}

/// Keeps the training patch centers whose 960 m footprint stays at least
/// `d_min` away from the test rectangle.
pub fn split_min_distance(train_centers: &[(f64, f64)], test_area: &Rect, d_min: f64) -> Vec<(f64, f64)> {
    train_centers
        .iter()
        .copied()
        .filter(|&(x, y)| Rect::centered(x, y, PATCH_SIDE_M).distance(test_area) >= d_min)
        .collect()
}
