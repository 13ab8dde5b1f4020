//! Coarse-to-fine stacks of layers.
//!
//! Layer 1 is the coarsest. Each finer layer's grid is its parent's grid
//! refined by an integer factor, and its series is obtained from the finest
//! series by repeated block averaging. Training runs top-down; forecasting
//! advances all layers in lockstep, coarse first.

mod checkpoint;

pub use checkpoint::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{coarse_grain, write_grid_series, GridSeries};
use crate::layer::{build_layer, layer_forecast_step, layer_forecast_step_with_activity, train_layer, Layer, StepActivity, TilingParams};
use crate::reservoir::{ReservoirHyperparams, ReservoirState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub tiling: TilingParams,
    pub hyper: ReservoirHyperparams,
}

/// Which parent signal a child layer reads during closed-loop forecasting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParentTiming {
    /// The parent prediction for the same frame as the child's own input.
    #[default]
    SameStep,
    /// The parent prediction one frame older (ablation).
    PreviousStep,
}

/// Which parent signal a child layer is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParentTraining {
    /// Coarse-grained ground truth.
    #[default]
    Truth,
    /// The trained parent's teacher-forced one-step predictions (ablation).
    OneStepPrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// Refinement from layer `l` to layer `l + 1`; `n_layers - 1` entries.
    #[serde(default)]
    pub refine_factors: Vec<usize>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub parent_timing: ParentTiming,
    #[serde(default)]
    pub parent_training: ParentTraining,
    /// Coarse to fine.
    pub layers: Vec<LayerConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("n_layers", "must be at least 1"));
        }
        if self.layers.len() != self.n_layers {
            return Err(Error::config(
                "layers",
                format!("{} layer entries for n_layers = {}", self.layers.len(), self.n_layers),
            ));
        }
        if self.refine_factors.len() != self.n_layers - 1 {
            return Err(Error::config(
                "refine_factors",
                format!("need {} entries, got {}", self.n_layers - 1, self.refine_factors.len()),
            ));
        }
        if let Some(f) = self.refine_factors.iter().find(|&&f| f < 2) {
            return Err(Error::config("refine_factors", format!("factors must be >= 2, got {f}")));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.hyper.validate().map_err(|e| match e {
                Error::Config { field, message } => Error::config(format!("layers[{i}].hyper.{field}"), message),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Grid dimensions per layer, coarse to fine, for a given finest grid.
    pub fn layer_grids(&self, finest_rows: usize, finest_cols: usize) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        let mut grids = vec![(finest_rows, finest_cols)];
        for &f in self.refine_factors.iter().rev() {
            let (r, c) = *grids.last().unwrap();
            if r % f != 0 || c % f != 0 {
                return Err(Error::config(
                    "refine_factors",
                    format!("factor {f} does not divide grid {r}x{c}"),
                ));
            }
            grids.push((r / f, c / f));
        }
        grids.reverse();
        Ok(grids)
    }

    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn hash(&self) -> String {
        hex_digest(self.canonical_text().as_bytes())
    }

    /// The `depth` finest layers as a model of their own.
    pub fn finest_layers(&self, depth: usize) -> Result<ModelConfig> {
        if depth == 0 || depth > self.n_layers {
            return Err(Error::config("n_layers", format!("depth {depth} outside 1..={}", self.n_layers)));
        }
        let skip = self.n_layers - depth;
        Ok(ModelConfig {
            n_layers: depth,
            refine_factors: self.refine_factors[skip..].to_vec(),
            layers: self.layers[skip..].to_vec(),
            ..self.clone()
        })
    }

    /// The `depth` coarsest layers as a model of their own.
    pub fn coarsest_layers(&self, depth: usize) -> Result<ModelConfig> {
        if depth == 0 || depth > self.n_layers {
            return Err(Error::config("n_layers", format!("depth {depth} outside 1..={}", self.n_layers)));
        }
        Ok(ModelConfig {
            n_layers: depth,
            refine_factors: self.refine_factors[..depth - 1].to_vec(),
            layers: self.layers[..depth].to_vec(),
            ..self.clone()
        })
    }

    /// Largest washout over all layers.
    pub fn max_washout(&self) -> usize {
        self.layers.iter().map(|l| l.hyper.washout).max().unwrap_or(0)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
    /// SHA-256 of the training series in FGRID encoding.
    pub data_fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct HierarchyModel {
    pub config: ModelConfig,
    /// Coarse to fine.
    pub layers: Vec<Layer>,
    pub provenance: Provenance,
}

impl HierarchyModel {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn finest(&self) -> &Layer {
        self.layers.last().expect("at least one layer")
    }

    pub fn reservoir_counts(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::n_units).collect()
    }
}

/// Series for every layer, coarse to fine, by repeated block averaging.
pub fn coarse_chain(config: &ModelConfig, finest: &GridSeries) -> Result<Vec<GridSeries>> {
    config.layer_grids(finest.n_rows(), finest.n_cols())?;
    let mut chain = vec![finest.clone()];
    for &f in config.refine_factors.iter().rev() {
        let next = coarse_grain(chain.last().unwrap(), f)?;
        chain.push(next);
    }
    chain.reverse();
    Ok(chain)
}

/// Builds every layer with untrained readouts.
pub fn build_hierarchy(config: &ModelConfig, masks: &[Vec<bool>], grids: &[(usize, usize)]) -> Result<Vec<Layer>> {
    let mut layers: Vec<Layer> = Vec::with_capacity(config.n_layers);
    for (i, lc) in config.layers.iter().enumerate() {
        let (rows, cols) = grids[i];
        let factor = if i == 0 { 1 } else { config.refine_factors[i - 1] };
        let layer = build_layer(
            i + 1,
            rows,
            cols,
            &masks[i],
            &lc.tiling,
            lc.hyper,
            layers.last(),
            factor,
            config.master_seed,
        )
        .map_err(|e| match e {
            Error::InvalidArgument(m) => Error::config(format!("layers[{i}].tiling"), m),
            other => other,
        })?;
        layers.push(layer);
    }
    Ok(layers)
}

/// Trains the full stack top-down on `finest`.
pub fn train_hierarchy(config: &ModelConfig, finest: &GridSeries) -> Result<HierarchyModel> {
    train_hierarchy_from(config, finest, &[])
}

/// Like [`train_hierarchy`], reusing already trained coarsest layers.
///
/// `prefix` must be the first layers of a model trained with the same
/// per-layer settings, seed and data (as produced by a shorter config); they
/// are copied instead of retrained.
pub fn train_hierarchy_from(config: &ModelConfig, finest: &GridSeries, prefix: &[Layer]) -> Result<HierarchyModel> {
    config.validate()?;
    let chain = coarse_chain(config, finest)?;
    let masks: Vec<Vec<bool>> = chain.iter().map(|s| s.mask().to_vec()).collect();
    let grids: Vec<(usize, usize)> = chain.iter().map(|s| (s.n_rows(), s.n_cols())).collect();
    let mut layers = build_hierarchy(config, &masks, &grids)?;
    if prefix.len() > layers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} trained layers given for a {}-layer model",
            prefix.len(),
            layers.len()
        )));
    }
    for (i, p) in prefix.iter().enumerate() {
        let fresh = &layers[i];
        let same = p.is_trained()
            && p.level == fresh.level
            && (p.grid_rows, p.grid_cols) == (fresh.grid_rows, fresh.grid_cols)
            && p.mask == fresh.mask
            && p.tiling == fresh.tiling
            && p.units.len() == fresh.units.len()
            && p.units.iter().zip(&fresh.units).all(|(a, b)| {
                a.tile_index == b.tile_index
                    && a.reservoir.seed == b.reservoir.seed
                    && a.reservoir.hyper == b.reservoir.hyper
                    && a.route == b.route
            });
        if !same {
            return Err(Error::InvalidArgument(format!(
                "trained layer {} does not match the configured layer",
                i + 1
            )));
        }
        layers[i] = p.clone();
    }
    // parent signal each layer was trained on, kept for the prediction ablation
    let mut parent_inputs: Vec<Option<GridSeries>> = vec![None; layers.len()];
    for i in 0..layers.len() {
        let parent_series = if i == 0 {
            None
        } else {
            match config.parent_training {
                ParentTraining::Truth => Some(chain[i - 1].clone()),
                ParentTraining::OneStepPrediction => Some(teacher_forced_predictions(
                    &layers[i - 1],
                    &chain[i - 1],
                    parent_inputs[i - 1].as_ref(),
                )?),
            }
        };
        if i >= prefix.len() {
            train_layer(&mut layers[i], &chain[i], parent_series.as_ref())?;
        }
        parent_inputs[i] = parent_series;
    }
    Ok(HierarchyModel {
        config: config.clone(),
        layers,
        provenance: Provenance {
            config_hash: config.hash(),
            master_seed: config.master_seed,
            data_fingerprint: hex_digest(&write_grid_series(finest)),
        },
    })
}

/// One-step predictions of a trained layer under teacher forcing. Frame 0 is
/// copied from the truth; frame `t + 1` is predicted from frames `..= t`.
pub fn teacher_forced_predictions(layer: &Layer, series: &GridSeries, parent: Option<&GridSeries>) -> Result<GridSeries> {
    let mut states = layer.zero_states();
    let mut frames = vec![series.frame(0).to_vec()];
    for t in 0..series.n_time() - 1 {
        let (next, s) = layer_forecast_step(layer, &states, series.frame(t), parent.map(|p| p.frame(t)))?;
        states = s;
        frames.push(next);
    }
    GridSeries::from_frames(series.n_rows(), series.n_cols(), &frames, series.mask().to_vec(), series.meta)
}

#[derive(Debug, Clone)]
pub struct LayerForecast {
    pub level: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub mask: Vec<bool>,
    /// Predicted frames for steps `1..=horizon` after the warmup.
    pub frames: Vec<Vec<f64>>,
    /// Reservoir states when the autonomous phase begins.
    pub initial_states: Vec<ReservoirState>,
    /// Activity over the closed-loop steps (the last synchronization step
    /// when `horizon <= 1`).
    pub activity: StepActivity,
}

impl LayerForecast {
    pub fn to_series(&self, meta: crate::field::GridMeta) -> Result<GridSeries> {
        if self.frames.is_empty() {
            return Err(Error::InvalidArgument("forecast has no frames".into()));
        }
        GridSeries::from_frames(self.grid_rows, self.grid_cols, &self.frames, self.mask.clone(), meta)
    }
}

#[derive(Debug, Clone)]
pub struct ForecastResult {
    /// Coarse to fine.
    pub layers: Vec<LayerForecast>,
    pub warmup_steps: usize,
    pub horizon: usize,
}

impl ForecastResult {
    pub fn finest(&self) -> &LayerForecast {
        self.layers.last().expect("at least one layer")
    }
}

/// Synchronizes every layer on `warmup` (finest resolution) and then runs the
/// stack autonomously for `horizon` frames.
pub fn forecast(model: &HierarchyModel, warmup: &GridSeries, horizon: usize) -> Result<ForecastResult> {
    if !model.layers.iter().all(Layer::is_trained) {
        return Err(Error::Untrained("hierarchy has untrained layers".into()));
    }
    let finest = model.finest();
    if warmup.n_rows() != finest.grid_rows || warmup.n_cols() != finest.grid_cols {
        return Err(Error::DimensionMismatch(format!(
            "warmup grid {}x{} does not match model grid {}x{}",
            warmup.n_rows(),
            warmup.n_cols(),
            finest.grid_rows,
            finest.grid_cols
        )));
    }
    let needed = model.config.max_washout().max(1);
    if warmup.n_time() < needed {
        return Err(Error::InvalidArgument(format!(
            "warmup has {} frames, synchronization needs at least {needed}",
            warmup.n_time()
        )));
    }
    let chain = coarse_chain(&model.config, warmup)?;
    let n = model.layers.len();
    let mut states: Vec<Vec<ReservoirState>> = model.layers.iter().map(Layer::zero_states).collect();
    let mut current: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut sync_activity = vec![StepActivity::default(); n];
    for t in 0..warmup.n_time() {
        for l in 0..n {
            let parent = (l > 0).then(|| chain[l - 1].frame(t));
            let (next, s, act) = layer_forecast_step_with_activity(&model.layers[l], &states[l], chain[l].frame(t), parent)?;
            states[l] = s;
            current[l] = next;
            sync_activity[l] = act;
        }
    }
    let initial_states = states.clone();
    let last = warmup.n_time() - 1;
    let mut previous: Vec<Vec<f64>> = chain.iter().map(|s| s.frame(last).to_vec()).collect();
    let mut frames: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(horizon); n];
    let mut activity = if horizon <= 1 { sync_activity } else { vec![StepActivity::default(); n] };
    if horizon > 0 {
        for l in 0..n {
            frames[l].push(current[l].clone());
        }
    }
    for _ in 1..horizon {
        let mut next_frames = Vec::with_capacity(n);
        for l in 0..n {
            let parent = (l > 0).then(|| match model.config.parent_timing {
                ParentTiming::SameStep => current[l - 1].as_slice(),
                ParentTiming::PreviousStep => previous[l - 1].as_slice(),
            });
            let (next, s, act) = layer_forecast_step_with_activity(&model.layers[l], &states[l], &current[l], parent)?;
            states[l] = s;
            activity[l] = activity[l].merge(act);
            frames[l].push(next.clone());
            next_frames.push(next);
        }
        previous = std::mem::replace(&mut current, next_frames);
    }
    let layers = model
        .layers
        .iter()
        .zip(frames)
        .zip(initial_states)
        .zip(activity)
        .map(|(((layer, frames), initial_states), activity)| LayerForecast {
            level: layer.level,
            grid_rows: layer.grid_rows,
            grid_cols: layer.grid_cols,
            mask: layer.mask.clone(),
            frames,
            initial_states,
            activity,
        })
        .collect();
    Ok(ForecastResult {
        layers,
        warmup_steps: warmup.n_time(),
        horizon,
    })
}
