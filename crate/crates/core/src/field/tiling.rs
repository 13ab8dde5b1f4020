//! Tile geometry for parallel reservoirs.
//!
//! The grid is cut into equal rectangular tiles. Each tile owns its central
//! block and reads an input region grown by `overlap` cells on every side.
//! Beyond a grid edge the buffer either wraps (periodic) or is dropped
//! (clamp). Index lists walk the region row by row in region coordinates, so
//! with periodic wrapping a narrow grid can list the same cell twice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Clamp,
    Periodic,
}

impl Boundary {
    fn resolve(self, i: isize, n: usize) -> Option<usize> {
        let n = n as isize;
        match self {
            Boundary::Clamp => (0..n).contains(&i).then_some(i as usize),
            Boundary::Periodic => Some(i.rem_euclid(n) as usize),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileSpec {
    pub tile_index: usize,
    /// Tile position in the tile lattice.
    pub tile_row: usize,
    pub tile_col: usize,
    pub center_cells: Vec<usize>,
    pub input_cells: Vec<usize>,
}

impl TileSpec {
    pub fn is_active(&self) -> bool {
        !self.center_cells.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tiling {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub overlap: usize,
    pub boundary_row: Boundary,
    pub boundary_col: Boundary,
    pub tiles: Vec<TileSpec>,
}

impl Tiling {
    pub fn n_tiles(&self) -> usize {
        self.tiles.len()
    }

    pub fn tiles_per_row(&self) -> usize {
        self.grid_cols / self.tile_cols
    }

    pub fn active_tiles(&self) -> impl Iterator<Item = &TileSpec> {
        self.tiles.iter().filter(|t| t.is_active())
    }

    /// Tile whose central block contains grid cell `(row, col)`.
    pub fn owner_of(&self, row: usize, col: usize) -> usize {
        (row / self.tile_rows) * self.tiles_per_row() + col / self.tile_cols
    }

    /// Grid rectangle `(row0, col0, rows, cols)` of a tile's central block.
    pub fn center_rect(&self, tile_index: usize) -> (usize, usize, usize, usize) {
        let t = &self.tiles[tile_index];
        (t.tile_row * self.tile_rows, t.tile_col * self.tile_cols, self.tile_rows, self.tile_cols)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn make_tiling(
    grid_rows: usize,
    grid_cols: usize,
    tile_rows: usize,
    tile_cols: usize,
    overlap: usize,
    boundary_row: Boundary,
    boundary_col: Boundary,
    mask: &[bool],
) -> Result<Tiling> {
    if tile_rows == 0 || tile_cols == 0 || grid_rows % tile_rows != 0 || grid_cols % tile_cols != 0 {
        return Err(Error::InvalidArgument(format!(
            "tile {tile_rows}x{tile_cols} does not partition grid {grid_rows}x{grid_cols}"
        )));
    }
    if mask.len() != grid_rows * grid_cols {
        return Err(Error::DimensionMismatch(format!(
            "mask has {} entries, grid has {} cells",
            mask.len(),
            grid_rows * grid_cols
        )));
    }
    let n_tr = grid_rows / tile_rows;
    let n_tc = grid_cols / tile_cols;
    let ov = overlap as isize;
    let mut tiles = Vec::with_capacity(n_tr * n_tc);
    for tr in 0..n_tr {
        for tc in 0..n_tc {
            let r0 = tr * tile_rows;
            let c0 = tc * tile_cols;
            let mut center_cells = Vec::with_capacity(tile_rows * tile_cols);
            for r in r0..r0 + tile_rows {
                for c in c0..c0 + tile_cols {
                    let i = r * grid_cols + c;
                    if mask[i] {
                        center_cells.push(i);
                    }
                }
            }
            let mut input_cells = Vec::new();
            for dr in -ov..tile_rows as isize + ov {
                let Some(r) = boundary_row.resolve(r0 as isize + dr, grid_rows) else {
                    continue;
                };
                for dc in -ov..tile_cols as isize + ov {
                    let Some(c) = boundary_col.resolve(c0 as isize + dc, grid_cols) else {
                        continue;
                    };
                    let i = r * grid_cols + c;
                    if mask[i] {
                        input_cells.push(i);
                    }
                }
            }
            tiles.push(TileSpec {
                tile_index: tiles.len(),
                tile_row: tr,
                tile_col: tc,
                center_cells,
                input_cells,
            });
        }
    }
    Ok(Tiling {
        grid_rows,
        grid_cols,
        tile_rows,
        tile_cols,
        overlap,
        boundary_row,
        boundary_col,
        tiles,
    })
}

/// Gathers a tile's input features from a full frame.
pub fn extract_tile_input(frame: &[f64], tiling: &Tiling, tile_index: usize) -> Result<Vec<f64>> {
    let tile = tiling
        .tiles
        .get(tile_index)
        .ok_or_else(|| Error::InvalidArgument(format!("tile {tile_index} out of range")))?;
    if !tile.is_active() {
        return Err(Error::InactiveTile(tile_index));
    }
    if frame.len() != tiling.grid_rows * tiling.grid_cols {
        return Err(Error::DimensionMismatch(format!(
            "frame has {} cells, tiling expects {}",
            frame.len(),
            tiling.grid_rows * tiling.grid_cols
        )));
    }
    Ok(tile.input_cells.iter().map(|&i| frame[i]).collect())
}

/// Writes each tile's central outputs back into a frame. `outputs[i]` belongs
/// to tile `i`; inactive tiles take an empty vector.
pub fn scatter_tile_outputs(outputs: &[Vec<f64>], tiling: &Tiling) -> Result<Vec<f64>> {
    if outputs.len() != tiling.tiles.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} output vectors for {} tiles",
            outputs.len(),
            tiling.tiles.len()
        )));
    }
    let mut frame = vec![0.0; tiling.grid_rows * tiling.grid_cols];
    for (tile, out) in tiling.tiles.iter().zip(outputs) {
        if out.len() != tile.center_cells.len() {
            return Err(Error::DimensionMismatch(format!(
                "tile {} produced {} values for {} central cells",
                tile.tile_index,
                out.len(),
                tile.center_cells.len()
            )));
        }
        for (&cell, &v) in tile.center_cells.iter().zip(out) {
            frame[cell] = v;
        }
    }
    Ok(frame)
}
