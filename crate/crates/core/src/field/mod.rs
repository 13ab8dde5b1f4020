//! Gridded spatiotemporal fields.
//!
//! A [`GridSeries`] is a stack of 2-D frames on a regular grid together with
//! a validity mask. Cells are addressed by their row-major flat index
//! `row * n_cols + col`; every index list in the crate uses that convention.

mod io;
mod tiling;

pub use io::{load_grid_series, load_grid_series_csv, read_grid_series, save_grid_series, write_grid_series, FGRID_MAGIC, FGRID_VERSION};
pub use tiling::{extract_tile_input, make_tiling, scatter_tile_outputs, Boundary, TileSpec, Tiling};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geolocation and sampling metadata. Carried through I/O, never used in
/// computations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub dt: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub cell_deg: f64,
}

impl Default for GridMeta {
    fn default() -> Self {
        GridMeta {
            dt: 1.0,
            origin_lat: 0.0,
            origin_lon: 0.0,
            cell_deg: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSeries {
    n_time: usize,
    n_rows: usize,
    n_cols: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    pub meta: GridMeta,
}

impl GridSeries {
    /// Builds a series from time-major, row-major values. Masked cells are
    /// zeroed; valid cells must be finite.
    pub fn new(
        n_time: usize,
        n_rows: usize,
        n_cols: usize,
        mut values: Vec<f64>,
        mask: Vec<bool>,
        meta: GridMeta,
    ) -> Result<Self> {
        if n_time == 0 || n_rows == 0 || n_cols == 0 {
            return Err(Error::DimensionMismatch(format!(
                "series dimensions must be positive, got {n_time}x{n_rows}x{n_cols}"
            )));
        }
        let n_cells = n_rows * n_cols;
        if mask.len() != n_cells {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} entries, grid has {n_cells} cells",
                mask.len()
            )));
        }
        if values.len() != n_time * n_cells {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values, got {}",
                n_time * n_cells,
                values.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::NoValidCells);
        }
        for (i, v) in values.iter_mut().enumerate() {
            let cell = i % n_cells;
            if !mask[cell] {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(Error::NonFinite {
                    t: i / n_cells,
                    row: cell / n_cols,
                    col: cell % n_cols,
                });
            }
        }
        Ok(GridSeries {
            n_time,
            n_rows,
            n_cols,
            values,
            mask,
            meta,
        })
    }

    /// Fully valid series.
    pub fn from_values(n_time: usize, n_rows: usize, n_cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(n_time, n_rows, n_cols, values, vec![true; n_rows * n_cols], GridMeta::default())
    }

    pub fn from_frames(n_rows: usize, n_cols: usize, frames: &[Vec<f64>], mask: Vec<bool>, meta: GridMeta) -> Result<Self> {
        let n_cells = n_rows * n_cols;
        let mut values = Vec::with_capacity(frames.len() * n_cells);
        for (t, f) in frames.iter().enumerate() {
            if f.len() != n_cells {
                return Err(Error::DimensionMismatch(format!(
                    "frame {t} has {} values, grid has {n_cells} cells",
                    f.len()
                )));
            }
            values.extend_from_slice(f);
        }
        Self::new(frames.len(), n_rows, n_cols, values, mask, meta)
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_cells(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.n_cells();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_cells())
    }

    pub fn get(&self, t: usize, row: usize, col: usize) -> f64 {
        self.values[t * self.n_cells() + row * self.n_cols + col]
    }

    /// Time series of one cell.
    pub fn cell_series(&self, cell: usize) -> Vec<f64> {
        self.frames().map(|f| f[cell]).collect()
    }

    /// Frames `start..end` as a new series.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_time {
            return Err(Error::InvalidArgument(format!(
                "time slice {start}..{end} out of range for {} frames",
                self.n_time
            )));
        }
        let n = self.n_cells();
        GridSeries::new(
            end - start,
            self.n_rows,
            self.n_cols,
            self.values[start * n..end * n].to_vec(),
            self.mask.clone(),
            self.meta,
        )
    }

    /// Same grid and mask, new values.
    pub fn with_values(&self, n_time: usize, values: Vec<f64>) -> Result<Self> {
        GridSeries::new(n_time, self.n_rows, self.n_cols, values, self.mask.clone(), self.meta)
    }

    /// Checks that two series can be compared cell by cell.
    pub fn check_aligned(&self, other: &GridSeries) -> Result<()> {
        if self.n_rows != other.n_rows || self.n_cols != other.n_cols {
            return Err(Error::DimensionMismatch(format!(
                "grids differ: {}x{} vs {}x{}",
                self.n_rows, self.n_cols, other.n_rows, other.n_cols
            )));
        }
        if self.mask != other.mask {
            return Err(Error::DimensionMismatch("masks differ".into()));
        }
        Ok(())
    }
}

/// Block-averages every frame by `factor` along both axes.
///
/// A coarse cell is the mean of the valid fine cells of its block and is valid
/// iff at least one of them is.
pub fn coarse_grain(series: &GridSeries, factor: usize) -> Result<GridSeries> {
    if factor == 0 || series.n_rows % factor != 0 || series.n_cols % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "coarse-graining factor {factor} does not divide grid {}x{}",
            series.n_rows, series.n_cols
        )));
    }
    if factor == 1 {
        return Ok(series.clone());
    }
    let rows = series.n_rows / factor;
    let cols = series.n_cols / factor;
    let mut counts = vec![0usize; rows * cols];
    for r in 0..series.n_rows {
        for c in 0..series.n_cols {
            if series.mask[r * series.n_cols + c] {
                counts[(r / factor) * cols + c / factor] += 1;
            }
        }
    }
    let mask: Vec<bool> = counts.iter().map(|&n| n > 0).collect();
    let mut values = vec![0.0; series.n_time * rows * cols];
    for (t, frame) in series.frames().enumerate() {
        let out = &mut values[t * rows * cols..(t + 1) * rows * cols];
        for r in 0..series.n_rows {
            for c in 0..series.n_cols {
                let i = r * series.n_cols + c;
                if series.mask[i] {
                    out[(r / factor) * cols + c / factor] += frame[i];
                }
            }
        }
        for (v, &n) in out.iter_mut().zip(&counts) {
            if n > 0 {
                *v /= n as f64;
            }
        }
    }
    let meta = GridMeta {
        cell_deg: series.meta.cell_deg * factor as f64,
        ..series.meta
    };
    GridSeries::new(series.n_time, rows, cols, values, mask, meta)
}
