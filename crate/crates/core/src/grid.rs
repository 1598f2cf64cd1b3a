//! Dense year × row × column cubes of per-pixel values.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A `years × rows × cols` cube of `f64` values, row-major with the year axis outermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    pub years: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Cube {
    pub fn new(years: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != years * rows * cols {
            return Err(Error::shape(
                "cube",
                format!(
                    "{} values for a {}x{}x{} cube",
                    data.len(),
                    years,
                    rows,
                    cols
                ),
            ));
        }
        Ok(Cube {
            years,
            rows,
            cols,
            data,
        })
    }

    pub fn zeros(years: usize, rows: usize, cols: usize) -> Self {
        Cube {
            years,
            rows,
            cols,
            data: vec![0.0; years * rows * cols],
        }
    }

    pub fn from_fn(
        years: usize,
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(years * rows * cols);
        for y in 0..years {
            for r in 0..rows {
                for c in 0..cols {
                    data.push(f(y, r, c));
                }
            }
        }
        Cube {
            years,
            rows,
            cols,
            data,
        }
    }

    #[inline]
    pub fn index(&self, year: usize, row: usize, col: usize) -> usize {
        (year * self.rows + row) * self.cols + col
    }

    #[inline]
    pub fn get(&self, year: usize, row: usize, col: usize) -> f64 {
        self.data[self.index(year, row, col)]
    }

    #[inline]
    pub fn set(&mut self, year: usize, row: usize, col: usize, value: f64) {
        let i = self.index(year, row, col);
        self.data[i] = value;
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// The time series of one pixel (0-based year order).
    pub fn series(&self, row: usize, col: usize) -> Vec<f64> {
        (0..self.years).map(|y| self.get(y, row, col)).collect()
    }

    pub fn set_series(&mut self, row: usize, col: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.years);
        for (y, &v) in values.iter().enumerate() {
            self.set(y, row, col, v);
        }
    }

    /// One year's `rows × cols` slice.
    pub fn year_slice(&self, year: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[year * n..(year + 1) * n]
    }

    pub fn same_shape(&self, other: &Cube) -> bool {
        self.years == other.years && self.rows == other.rows && self.cols == other.cols
    }
}
