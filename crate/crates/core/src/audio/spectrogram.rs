use serde::{Deserialize, Serialize};

use super::{AudioError, MagnitudeSpectrogram, Result};

/// Floor applied before taking the logarithm of a magnitude.
pub const LOG_FLOOR: f64 = 1e-5;

/// Dense row-major real grid; rows are frequency bins, columns are frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "grid data length");
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped grids.
    pub fn zip_with(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.check_shape(other)?;
        Ok(Grid {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_shape(&self, other: &Grid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(AudioError::Shape {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Elementwise `ln(max(v, LOG_FLOOR))`.
pub fn log_magnitude(m: &MagnitudeSpectrogram) -> Grid {
    m.values.map(|v| v.max(LOG_FLOOR).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeDirection {
    Down,
    Up,
}

/// Halve or double the frequency axis.
///
/// Down averages adjacent bin pairs. Up reconstructs each coarse bin as a
/// linear segment through its value with a minmod-limited slope, so the
/// pair means of the result equal the coarse values and nonnegative input
/// stays nonnegative.
pub fn spec_resize(g: &Grid, target_rows: usize, direction: ResizeDirection) -> Result<Grid> {
    let (rows, cols) = g.shape();
    match direction {
        ResizeDirection::Down => {
            if rows % 2 != 0 || target_rows * 2 != rows {
                return Err(AudioError::Shape {
                    expected: (target_rows * 2, cols),
                    actual: (rows, cols),
                });
            }
            let mut out = Grid::zeros(target_rows, cols);
            for r in 0..target_rows {
                let a = &g.data[2 * r * cols..(2 * r + 1) * cols];
                let b = &g.data[(2 * r + 1) * cols..(2 * r + 2) * cols];
                let dst = &mut out.data[r * cols..(r + 1) * cols];
                for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                    *d = 0.5 * (x + y);
                }
            }
            Ok(out)
        }
        ResizeDirection::Up => {
            if target_rows != rows * 2 || rows == 0 {
                return Err(AudioError::Shape {
                    expected: (target_rows / 2, cols),
                    actual: (rows, cols),
                });
            }
            let mut out = Grid::zeros(target_rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    let y = g.get(r, c);
                    let below = if r > 0 { y - g.get(r - 1, c) } else { 0.0 };
                    let above = if r + 1 < rows { g.get(r + 1, c) - y } else { 0.0 };
                    let slope = minmod(below, above);
                    out.set(2 * r, c, y - 0.25 * slope);
                    out.set(2 * r + 1, c, y + 0.25 * slope);
                }
            }
            Ok(out)
        }
    }
}

fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}
