//! Top-down hyperparameter grid search.
//!
//! Layers are tuned one at a time from the coarsest down. While layer `l` is
//! tuned, layers `1..l` keep their selected settings and are trained once per
//! seed; each candidate for layer `l` is trained on top of them and scored on
//! the validation split at layer `l`'s resolution.
//!
//! A candidate's score is the mean over horizons `T` of its seed-averaged
//! `RMSE_{t<=T}` divided by the best value any candidate reached at that `T`.
//! Ties go to smaller `g`, then smaller noise, then grid order.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::protocols::{evaluate_windows, ForecastWindows};
use crate::error::{Error, Result};
use crate::field::GridSeries;
use crate::hierarchy::{coarse_chain, train_hierarchy, train_hierarchy_from, ModelConfig};
use crate::reservoir::ReservoirHyperparams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerGrid {
    pub g: Vec<f64>,
    pub noise: Vec<f64>,
    pub g_in: Vec<f64>,
    /// Ignored on the coarsest layer, which has no parent input.
    pub g_l: Vec<f64>,
    pub tau: Vec<f64>,
}

fn default_horizons() -> Vec<usize> {
    vec![1, 5, 10, 50]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Coarse to fine, one grid per layer.
    pub layers: Vec<LayerGrid>,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
    pub windows: ForecastWindows,
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn lin_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// `n` geometrically spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    lin_space(lo.ln(), hi.ln(), n).into_iter().map(f64::exp).collect()
}

impl SweepSpec {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layers.len() != n_layers {
            return Err(Error::config(
                "sweep.layers",
                format!("{} grids for a {n_layers}-layer model", self.layers.len()),
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let field = |name: &str| format!("sweep.layers[{i}].{name}");
            for (name, list, positive) in [
                ("g", &l.g, false),
                ("noise", &l.noise, false),
                ("g_in", &l.g_in, true),
                ("g_l", &l.g_l, true),
                ("tau", &l.tau, true),
            ] {
                if list.is_empty() {
                    return Err(Error::config(field(name), "grid is empty"));
                }
                if list.iter().any(|v| !v.is_finite() || (positive && *v <= 0.0)) {
                    return Err(Error::config(
                        field(name),
                        if positive { "values must be finite and positive" } else { "values must be finite" },
                    ));
                }
            }
            if l.noise.iter().any(|v| *v < 0.0) {
                return Err(Error::config(field("noise"), "noise levels must be non-negative"));
            }
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::config("sweep.horizons", "need at least one positive horizon"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("sweep.seeds", "need at least one seed"));
        }
        if self.horizons.iter().any(|&h| h > self.windows.horizon) {
            return Err(Error::config("sweep.horizons", "horizons exceed the forecast window"));
        }
        Ok(())
    }
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub layer: usize,
    pub g: f64,
    pub noise: f64,
    pub g_in: f64,
    pub g_l: f64,
    pub tau: f64,
    pub seed: u64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub rmse: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub layer: usize,
    pub hyper: ReservoirHyperparams,
    /// Seed-averaged RMSE per horizon.
    pub rmse: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// Template with every layer's selected settings.
    pub config: ModelConfig,
    pub rows: Vec<SweepRow>,
    pub candidates: Vec<CandidateScore>,
    /// Per layer, the winner at each horizon alone (index into `candidates`).
    pub per_horizon_best: Vec<Vec<usize>>,
    /// Candidates whose training or forecast failed, with the reason.
    pub failures: Vec<String>,
}

fn candidates(grid: &LayerGrid, base: ReservoirHyperparams, has_parent: bool) -> Vec<ReservoirHyperparams> {
    let g_ls = if has_parent { grid.g_l.clone() } else { vec![base.g_l] };
    let mut out = Vec::new();
    for &g in &grid.g {
        for &noise_std in &grid.noise {
            for &g_in in &grid.g_in {
                for &g_l in &g_ls {
                    for &tau in &grid.tau {
                        out.push(ReservoirHyperparams {
                            g,
                            noise_std,
                            g_in,
                            g_l,
                            tau,
                            ..base
                        });
                    }
                }
            }
        }
    }
    out
}

/// Normalized multi-horizon scores: for each horizon, divide by the best
/// finite value; average over horizons. Non-finite entries score infinity.
pub fn normalized_scores(rmse: &[Vec<f64>]) -> Vec<f64> {
    let n_h = rmse.first().map_or(0, Vec::len);
    let best: Vec<f64> = (0..n_h)
        .map(|k| rmse.iter().map(|r| r[k]).filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min))
        .collect();
    rmse.iter()
        .map(|r| {
            let mut total = 0.0;
            for (v, b) in r.iter().zip(&best) {
                if !v.is_finite() {
                    return f64::INFINITY;
                }
                total += if *b == 0.0 {
                    if *v == 0.0 {
                        1.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    v / b
                };
            }
            total / n_h as f64
        })
        .collect()
}

/// Index of the smallest value, ties to smaller `g`, then smaller noise, then
/// lower index.
fn select(values: &[f64], hyper: &[ReservoirHyperparams]) -> usize {
    (0..values.len())
        .min_by(|&a, &b| {
            values[a]
                .total_cmp(&values[b])
                .then(hyper[a].g.total_cmp(&hyper[b].g))
                .then(hyper[a].noise_std.total_cmp(&hyper[b].noise_std))
                .then(a.cmp(&b))
        })
        .expect("non-empty candidate list")
}

pub fn grid_search(sweep: &SweepSpec, train: &GridSeries, validate: &GridSeries, template: &ModelConfig) -> Result<SweepOutcome> {
    template.validate()?;
    sweep.validate(template.n_layers)?;
    train.check_aligned(validate)?;
    let train_chain = coarse_chain(template, train)?;
    let valid_chain = coarse_chain(template, validate)?;
    sweep.windows.validate(validate.n_time())?;

    let mut config = template.clone();
    let mut rows = Vec::new();
    let mut all_candidates = Vec::new();
    let mut per_horizon_best = Vec::new();
    let mut failures = Vec::new();
    for l in 0..template.n_layers {
        let level = l + 1;
        let hypers = candidates(&sweep.layers[l], config.layers[l].hyper, l > 0);
        let mut sums = vec![vec![0.0; sweep.horizons.len()]; hypers.len()];
        for &seed in &sweep.seeds {
            let seeded = ModelConfig {
                master_seed: seed,
                ..config.clone()
            };
            let prefix = if l == 0 {
                Vec::new()
            } else {
                train_hierarchy(&seeded.coarsest_layers(l)?, &train_chain[l - 1])?.layers
            };
            for (c, hyper) in hypers.iter().enumerate() {
                let mut cfg = seeded.coarsest_layers(level)?;
                cfg.layers[l].hyper = *hyper;
                let started = Instant::now();
                let result = train_hierarchy_from(&cfg, &train_chain[l], &prefix)
                    .and_then(|m| evaluate_windows(&m, &valid_chain[l], &sweep.windows, &sweep.horizons));
                let elapsed = started.elapsed().as_secs_f64();
                let rmse = match result {
                    Ok(v) if v.iter().all(|x| x.is_finite()) => v,
                    Ok(_) | Err(Error::Numerical(_)) | Err(Error::Singular(_)) => {
                        failures.push(format!("layer {level} candidate {c} seed {seed}: non-finite forecast"));
                        vec![f64::INFINITY; sweep.horizons.len()]
                    }
                    Err(e) => return Err(e),
                };
                for (k, (&h, &v)) in sweep.horizons.iter().zip(&rmse).enumerate() {
                    sums[c][k] += v;
                    rows.push(SweepRow {
                        layer: level,
                        g: hyper.g,
                        noise: hyper.noise_std,
                        g_in: hyper.g_in,
                        g_l: hyper.g_l,
                        tau: hyper.tau,
                        seed,
                        horizon: h,
                        rmse: v,
                        wall_time_s: elapsed,
                    });
                }
            }
        }
        let n_seeds = sweep.seeds.len() as f64;
        let means: Vec<Vec<f64>> = sums.into_iter().map(|s| s.into_iter().map(|v| v / n_seeds).collect()).collect();
        let scores = normalized_scores(&means);
        if scores.iter().all(|s| !s.is_finite()) {
            return Err(Error::Numerical(format!("no candidate for layer {level} produced a finite forecast")));
        }
        let winner = select(&scores, &hypers);
        let offset = all_candidates.len();
        per_horizon_best.push(
            (0..sweep.horizons.len())
                .map(|k| offset + select(&means.iter().map(|m| m[k]).collect::<Vec<_>>(), &hypers))
                .collect(),
        );
        config.layers[l].hyper = hypers[winner];
        for ((hyper, rmse), score) in hypers.into_iter().zip(means).zip(scores) {
            all_candidates.push(CandidateScore {
                layer: level,
                hyper,
                rmse,
                score,
            });
        }
    }
    Ok(SweepOutcome {
        config,
        rows,
        candidates: all_candidates,
        per_horizon_best,
        failures,
    })
}

/// Results table as CSV with columns
/// `layer,g,noise,g_in,g_l,tau,seed,T,rmse,wall_time_s`.
pub fn sweep_table_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(["layer", "g", "noise", "g_in", "g_l", "tau", "seed", "T", "rmse", "wall_time_s"])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
