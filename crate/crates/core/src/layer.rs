//! One resolution level: a tiled set of reservoirs running in lockstep.
//!
//! Each active tile gets a reservoir whose input is the tile's local region
//! (central block plus overlap buffer) followed by the routed features of its
//! parent tile in the next coarser layer. Parent cells whose footprint lies
//! entirely inside the child's central block are left out of the route, so a
//! child only hears about the parent's view of its surroundings.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{make_tiling, scatter_tile_outputs, Boundary, GridSeries, Tiling};
use crate::reservoir::{init_reservoir, train_readout, Reservoir, ReservoirHyperparams, ReservoirState};
use crate::rng::{reservoir_seed, stream, StreamRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilingParams {
    pub tile_rows: usize,
    pub tile_cols: usize,
    #[serde(default = "default_overlap")]
    pub overlap: usize,
    #[serde(default = "default_boundary_row")]
    pub boundary_row: Boundary,
    #[serde(default = "default_boundary_col")]
    pub boundary_col: Boundary,
}

fn default_overlap() -> usize {
    2
}

fn default_boundary_row() -> Boundary {
    Boundary::Clamp
}

fn default_boundary_col() -> Boundary {
    Boundary::Periodic
}

impl TilingParams {
    pub fn new(tile_rows: usize, tile_cols: usize) -> Self {
        TilingParams {
            tile_rows,
            tile_cols,
            overlap: default_overlap(),
            boundary_row: default_boundary_row(),
            boundary_col: default_boundary_col(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParentRoute {
    pub parent_tile_index: usize,
    pub parent_cell_indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TileUnit {
    pub tile_index: usize,
    pub reservoir: Reservoir,
    /// `None` on the root layer.
    pub route: Option<ParentRoute>,
}

impl TileUnit {
    fn route_len(&self) -> usize {
        self.route.as_ref().map_or(0, |r| r.parent_cell_indices.len())
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// 1 is the coarsest layer.
    pub level: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub mask: Vec<bool>,
    pub tiling: Tiling,
    /// One unit per active tile, in tile order.
    pub units: Vec<TileUnit>,
    /// Grid of the parent layer and the refinement factor to this one.
    pub parent: Option<ParentGeometry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParentGeometry {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub refine_factor: usize,
}

/// Per-step activity of a layer: largest `|W r + W_in u|` and largest `|r_i|`
/// over all of its reservoirs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepActivity {
    pub preactivation_max: f64,
    pub state_max: f64,
}

impl StepActivity {
    pub fn merge(self, other: StepActivity) -> StepActivity {
        StepActivity {
            preactivation_max: self.preactivation_max.max(other.preactivation_max),
            state_max: self.state_max.max(other.state_max),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn build_layer(
    level: usize,
    grid_rows: usize,
    grid_cols: usize,
    mask: &[bool],
    tiling: &TilingParams,
    hyper: ReservoirHyperparams,
    parent: Option<&Layer>,
    refine_factor: usize,
    master_seed: u64,
) -> Result<Layer> {
    hyper.validate()?;
    let tiles = make_tiling(
        grid_rows,
        grid_cols,
        tiling.tile_rows,
        tiling.tile_cols,
        tiling.overlap,
        tiling.boundary_row,
        tiling.boundary_col,
        mask,
    )?;
    let parent_geometry = match parent {
        None => None,
        Some(p) => {
            if refine_factor == 0 || p.grid_rows * refine_factor != grid_rows || p.grid_cols * refine_factor != grid_cols {
                return Err(Error::InvalidArgument(format!(
                    "parent grid {}x{} refined by {refine_factor} does not give {grid_rows}x{grid_cols}",
                    p.grid_rows, p.grid_cols
                )));
            }
            Some(ParentGeometry {
                grid_rows: p.grid_rows,
                grid_cols: p.grid_cols,
                refine_factor,
            })
        }
    };
    let mut units = Vec::new();
    for tile in tiles.active_tiles() {
        let route = match parent {
            None => None,
            Some(p) => Some(parent_route(&tiles, tile.tile_index, &p.tiling, refine_factor)?),
        };
        let d_in_parent = route.as_ref().map_or(0, |r| r.parent_cell_indices.len());
        let seed = reservoir_seed(master_seed, level, tile.tile_index);
        let reservoir = init_reservoir(hyper, tile.input_cells.len(), d_in_parent, tile.center_cells.len(), seed)?;
        units.push(TileUnit {
            tile_index: tile.tile_index,
            reservoir,
            route,
        });
    }
    Ok(Layer {
        level,
        grid_rows,
        grid_cols,
        mask: mask.to_vec(),
        tiling: tiles,
        units,
        parent: parent_geometry,
    })
}

/// Finds the unique parent tile containing a child tile and lists the parent
/// cells routed to it.
pub fn parent_route(child: &Tiling, tile_index: usize, parent: &Tiling, factor: usize) -> Result<ParentRoute> {
    let (r0, c0, nr, nc) = child.center_rect(tile_index);
    let first = parent.owner_of(r0 / factor, c0 / factor);
    let last = parent.owner_of((r0 + nr - 1) / factor, (c0 + nc - 1) / factor);
    if first != last {
        return Err(Error::InvalidArgument(format!(
            "child tile {tile_index} ({nr}x{nc} at {r0},{c0}) spans parent tiles {first} and {last}; \
             child tiles must nest inside one parent tile"
        )));
    }
    let inside = |pcell: usize| {
        let pr = pcell / parent.grid_cols;
        let pc = pcell % parent.grid_cols;
        let (fr, fc) = (pr * factor, pc * factor);
        fr >= r0 && fr + factor <= r0 + nr && fc >= c0 && fc + factor <= c0 + nc
    };
    let parent_cell_indices = parent.tiles[first]
        .center_cells
        .iter()
        .copied()
        .filter(|&c| !inside(c))
        .collect();
    Ok(ParentRoute {
        parent_tile_index: first,
        parent_cell_indices,
    })
}

fn fill_input(layer: &Layer, unit: &TileUnit, own: &[f64], parent: Option<&[f64]>, buf: &mut [f64]) {
    let tile = &layer.tiling.tiles[unit.tile_index];
    let n_local = tile.input_cells.len();
    for (b, &i) in buf[..n_local].iter_mut().zip(&tile.input_cells) {
        *b = own[i];
    }
    if let (Some(route), Some(p)) = (&unit.route, parent) {
        for (b, &i) in buf[n_local..].iter_mut().zip(&route.parent_cell_indices) {
            *b = p[i];
        }
    }
}

impl Layer {
    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn is_trained(&self) -> bool {
        self.units.iter().all(|u| u.reservoir.is_trained())
    }

    pub fn needs_parent(&self) -> bool {
        self.units.iter().any(|u| u.route_len() > 0)
    }

    pub fn zero_states(&self) -> Vec<ReservoirState> {
        self.units.iter().map(|u| ReservoirState::zeros(u.reservoir.d_r())).collect()
    }

    fn check_frames(&self, own: &[f64], parent: Option<&[f64]>) -> Result<()> {
        if own.len() != self.n_cells() {
            return Err(Error::DimensionMismatch(format!(
                "frame has {} cells, layer {} grid has {}",
                own.len(),
                self.level,
                self.n_cells()
            )));
        }
        match (parent, &self.parent) {
            (Some(p), Some(g)) if p.len() != g.grid_rows * g.grid_cols => Err(Error::DimensionMismatch(format!(
                "parent frame has {} cells, expected {}",
                p.len(),
                g.grid_rows * g.grid_cols
            ))),
            (None, _) if self.needs_parent() => Err(Error::InvalidArgument(format!(
                "layer {} routes parent features but no parent frame was given",
                self.level
            ))),
            _ => Ok(()),
        }
    }
}

/// Input vector of unit `unit_index`: local features then routed parent features.
pub fn assemble_input(layer: &Layer, unit_index: usize, own_frame: &[f64], parent_frame: Option<&[f64]>) -> Result<Vec<f64>> {
    layer.check_frames(own_frame, parent_frame)?;
    let unit = layer
        .units
        .get(unit_index)
        .ok_or_else(|| Error::InvalidArgument(format!("unit {unit_index} out of range")))?;
    let mut buf = vec![0.0; unit.reservoir.d_in()];
    fill_input(layer, unit, own_frame, parent_frame, &mut buf);
    Ok(buf)
}

/// Fits every tile's readout by teacher forcing on `series`.
///
/// The state after consuming frame `t` is regressed onto the central cells of
/// frame `t + 1`. `parent_series`, when the layer routes parent features,
/// supplies them at the same frame index.
pub fn train_layer(layer: &mut Layer, series: &GridSeries, parent_series: Option<&GridSeries>) -> Result<()> {
    if series.n_rows() != layer.grid_rows || series.n_cols() != layer.grid_cols {
        return Err(Error::DimensionMismatch(format!(
            "series grid {}x{} does not match layer {} grid {}x{}",
            series.n_rows(),
            series.n_cols(),
            layer.level,
            layer.grid_rows,
            layer.grid_cols
        )));
    }
    if let Some(p) = parent_series {
        if p.n_time() != series.n_time() {
            return Err(Error::DimensionMismatch(format!(
                "parent series has {} frames, layer series has {}",
                p.n_time(),
                series.n_time()
            )));
        }
    }
    layer.check_frames(series.frame(0), parent_series.map(|p| p.frame(0)))?;
    let level = layer.level;
    let tiling = layer.tiling.clone();
    let shared: &Layer = layer;
    let readouts: Vec<Result<DMatrix<f64>>> = shared
        .units
        .par_iter()
        .map(|unit| fit_unit(shared, unit, &tiling, series, parent_series))
        .collect();
    let readouts: Vec<DMatrix<f64>> = readouts.into_iter().collect::<Result<_>>().map_err(|e| match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("layer {level}: {m}")),
        other => other,
    })?;
    for (unit, w_out) in layer.units.iter_mut().zip(readouts) {
        unit.reservoir.set_readout(w_out)?;
    }
    Ok(())
}

fn fit_unit(
    layer: &Layer,
    unit: &TileUnit,
    tiling: &Tiling,
    series: &GridSeries,
    parent_series: Option<&GridSeries>,
) -> Result<DMatrix<f64>> {
    let res = &unit.reservoir;
    let washout = res.hyper.washout;
    let n_time = series.n_time();
    if n_time < washout + 2 {
        return Err(Error::InvalidArgument(format!(
            "series has {n_time} frames, training needs at least washout + 2 = {}",
            washout + 2
        )));
    }
    let n_steps = n_time - 1;
    let n_samples = n_steps - washout;
    let center = &tiling.tiles[unit.tile_index].center_cells;
    let mut states = DMatrix::zeros(res.d_r(), n_samples);
    let mut targets = DMatrix::zeros(center.len(), n_samples);
    for k in 0..n_samples {
        let next = series.frame(washout + k + 1);
        for (j, &c) in center.iter().enumerate() {
            targets[(j, k)] = next[c];
        }
    }
    let mut rng = stream(res.seed, StreamRole::TrainingNoise);
    res.drive_with(
        n_steps,
        |t, buf| fill_input(layer, unit, series.frame(t), parent_series.map(|p| p.frame(t)), buf),
        &ReservoirState::zeros(res.d_r()),
        res.hyper.noise_std,
        &mut rng,
        |t, r| {
            if t >= washout {
                states.column_mut(t - washout).copy_from_slice(r);
            }
        },
    )?;
    let beta = res.absolute_beta(&states);
    train_readout(&states, &targets, beta)
}

/// Advances one unit: assemble input, Euler step, readout.
pub fn unit_forecast_step(
    layer: &Layer,
    unit_index: usize,
    state: &ReservoirState,
    own_frame: &[f64],
    parent_frame: Option<&[f64]>,
) -> Result<(ReservoirState, Vec<f64>, StepActivity)> {
    let unit = &layer.units[unit_index];
    let input = assemble_input(layer, unit_index, own_frame, parent_frame)?;
    let rec = unit.reservoir.step_record(state, &input)?;
    let out = unit.reservoir.readout(&rec.state)?;
    let activity = StepActivity {
        preactivation_max: rec.preactivation.iter().fold(0.0, |m, v| m.max(v.abs())),
        state_max: rec.state.r.iter().fold(0.0, |m, v| m.max(v.abs())),
    };
    Ok((rec.state, out, activity))
}

/// Synchronous closed-loop step of the whole layer. Every tile reads the same
/// `own_frame`/`parent_frame`; outputs are scattered into the next frame.
pub fn layer_forecast_step(
    layer: &Layer,
    states: &[ReservoirState],
    own_frame: &[f64],
    parent_frame: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<ReservoirState>)> {
    let (frame, states, _) = layer_forecast_step_with_activity(layer, states, own_frame, parent_frame)?;
    Ok((frame, states))
}

pub fn layer_forecast_step_with_activity(
    layer: &Layer,
    states: &[ReservoirState],
    own_frame: &[f64],
    parent_frame: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<ReservoirState>, StepActivity)> {
    if !layer.is_trained() {
        return Err(Error::Untrained(format!("layer {} has untrained reservoirs", layer.level)));
    }
    if states.len() != layer.units.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} states for {} reservoirs",
            states.len(),
            layer.units.len()
        )));
    }
    layer.check_frames(own_frame, parent_frame)?;
    let results: Vec<_> = (0..layer.units.len())
        .into_par_iter()
        .map(|i| unit_forecast_step(layer, i, &states[i], own_frame, parent_frame))
        .collect::<Result<_>>()?;
    let mut outputs = vec![Vec::new(); layer.tiling.n_tiles()];
    let mut next_states = Vec::with_capacity(results.len());
    let mut activity = StepActivity::default();
    for (unit, (state, out, act)) in layer.units.iter().zip(results) {
        outputs[unit.tile_index] = out;
        next_states.push(state);
        activity = activity.merge(act);
    }
    let frame = scatter_tile_outputs(&outputs, &layer.tiling)?;
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("layer {} produced a non-finite forecast", layer.level)));
    }
    Ok((frame, next_states, activity))
}

/// Closed-loop forecast of a root layer on its own: teacher-force through
/// `warmup`, then feed predictions back for `horizon` frames.
pub fn parallel_forecast(layer: &Layer, warmup: &GridSeries, horizon: usize) -> Result<Vec<Vec<f64>>> {
    if layer.parent.is_some() {
        return Err(Error::InvalidArgument("parallel_forecast runs root layers only".into()));
    }
    let mut states = layer.zero_states();
    let mut prediction = Vec::new();
    for frame in warmup.frames() {
        let (next, s) = layer_forecast_step(layer, &states, frame, None)?;
        states = s;
        prediction = next;
    }
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let (next, s) = layer_forecast_step(layer, &states, &prediction, None)?;
        out.push(std::mem::replace(&mut prediction, next));
        states = s;
    }
    Ok(out)
}
