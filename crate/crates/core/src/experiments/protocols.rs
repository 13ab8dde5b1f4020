use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{fit_pca, mean_abs_autocorr, rmse_curve, total_variance, ErrorCurve};
use crate::error::{Error, Result};
use crate::field::GridSeries;
use crate::hierarchy::{forecast, train_hierarchy, HierarchyModel, ModelConfig};

/// Forecast windows cut from a test series: window `i` synchronizes on frames
/// `i*stride .. i*stride + warmup` and is scored on the `horizon` frames that
/// follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastWindows {
    pub warmup: usize,
    pub horizon: usize,
    #[serde(default = "one")]
    pub n_windows: usize,
    #[serde(default)]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl ForecastWindows {
    pub fn frames_needed(&self) -> usize {
        (self.n_windows.max(1) - 1) * self.stride + self.warmup + self.horizon
    }

    pub fn validate(&self, test_len: usize) -> Result<()> {
        if self.warmup == 0 || self.horizon == 0 || self.n_windows == 0 {
            return Err(Error::config("windows", "warmup, horizon and n_windows must be positive"));
        }
        if self.frames_needed() > test_len {
            return Err(Error::config(
                "windows",
                format!("windows need {} frames, test series has {test_len}", self.frames_needed()),
            ));
        }
        Ok(())
    }
}

/// Mean over windows of the finest layer's RMSE curve at `horizons`.
pub fn evaluate_windows(model: &HierarchyModel, test: &GridSeries, windows: &ForecastWindows, horizons: &[usize]) -> Result<Vec<f64>> {
    windows.validate(test.n_time())?;
    if horizons.iter().any(|&h| h == 0 || h > windows.horizon) {
        return Err(Error::config("horizons", format!("horizons must lie in 1..={}", windows.horizon)));
    }
    let mut total = vec![0.0; horizons.len()];
    for i in 0..windows.n_windows {
        let start = i * windows.stride;
        let warm = test.slice_time(start, start + windows.warmup)?;
        let truth = test.slice_time(start + windows.warmup, start + windows.warmup + windows.horizon)?;
        let result = forecast(model, &warm, windows.horizon)?;
        let predicted = result.finest().to_series(test.meta)?;
        for (t, v) in total.iter_mut().zip(rmse_curve(&predicted, &truth, horizons)?) {
            *t += v;
        }
    }
    Ok(total.into_iter().map(|v| v / windows.n_windows as f64).collect())
}

/// Trains `config` with `seed` and scores it on `test`.
pub fn run_once(
    config: &ModelConfig,
    seed: u64,
    train: &GridSeries,
    test: &GridSeries,
    windows: &ForecastWindows,
    horizons: &[usize],
) -> Result<Vec<f64>> {
    let cfg = ModelConfig {
        master_seed: seed,
        ..config.clone()
    };
    let model = train_hierarchy(&cfg, train)?;
    evaluate_windows(&model, test, windows, horizons)
}

#[derive(Debug, Clone)]
pub struct DepthComparison {
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    /// One curve per entry of `depths`.
    pub curves: Vec<ErrorCurve>,
    /// Mean curve of each depth over the mean curve of the deepest one.
    pub ratios_to_deepest: Vec<Vec<f64>>,
}

/// Trains and scores the `d` finest layers of `config` for each depth and
/// seed.
pub fn compare_depths(
    config: &ModelConfig,
    train: &GridSeries,
    test: &GridSeries,
    depths: &[usize],
    seeds: &[u64],
    windows: &ForecastWindows,
    horizons: &[usize],
) -> Result<DepthComparison> {
    if depths.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("compare_depths needs at least one depth and one seed".into()));
    }
    train.check_aligned(test)?;
    let configs: Vec<ModelConfig> = depths.iter().map(|&d| config.finest_layers(d)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..depths.len()).flat_map(|d| seeds.iter().map(move |&s| (d, s))).collect();
    let results: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(d, s)| run_once(&configs[d], s, train, test, windows, horizons))
        .collect::<Result<_>>()?;
    let mut curves = Vec::with_capacity(depths.len());
    for chunk in results.chunks(seeds.len()) {
        curves.push(ErrorCurve::from_runs(horizons.to_vec(), chunk.to_vec())?);
    }
    let deepest = (0..depths.len()).max_by_key(|&i| (depths[i], std::cmp::Reverse(i))).unwrap();
    let ratios_to_deepest = curves.iter().map(|c| c.ratio_to(&curves[deepest])).collect::<Result<_>>()?;
    Ok(DepthComparison {
        depths: depths.to_vec(),
        seeds: seeds.to_vec(),
        curves,
        ratios_to_deepest,
    })
}

#[derive(Debug, Clone)]
pub struct AblationPoint {
    pub p: usize,
    pub shallow: ErrorCurve,
    pub deep: ErrorCurve,
    /// Mean shallow RMSE over mean deep RMSE at the fixed horizon.
    pub ratio: f64,
    /// Mean absolute autocorrelation of the filtered training split.
    pub autocorr: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationSettings {
    pub shallow_depth: usize,
    pub deep_depth: usize,
    pub horizon: usize,
    pub max_lag: usize,
}

/// Residual variance fraction below which filtered data is refused.
const DEGENERATE_FRACTION: f64 = 1e-10;

/// Removes the top `p` spatial components (fitted on the training split and
/// applied to both splits) and compares two depths at a fixed horizon.
#[allow(clippy::too_many_arguments)]
pub fn pca_ablation_experiment(
    config: &ModelConfig,
    train: &GridSeries,
    test: &GridSeries,
    p_list: &[usize],
    settings: AblationSettings,
    seeds: &[u64],
    windows: &ForecastWindows,
) -> Result<Vec<AblationPoint>> {
    let horizons = [settings.horizon];
    let original = total_variance(train);
    let mut out = Vec::with_capacity(p_list.len());
    for &p in p_list {
        let projection = fit_pca(train, p)?;
        let (tr, te) = if p == 0 {
            (train.clone(), test.clone())
        } else {
            (projection.remove(train)?, projection.remove(test)?)
        };
        if total_variance(&tr) <= DEGENERATE_FRACTION * original {
            return Err(Error::Degenerate(format!(
                "removing {p} components leaves no variance in the training data"
            )));
        }
        let autocorr = mean_abs_autocorr(&tr, settings.max_lag)?.values;
        let cmp = compare_depths(
            config,
            &tr,
            &te,
            &[settings.shallow_depth, settings.deep_depth],
            seeds,
            windows,
            &horizons,
        )?;
        let ratio = cmp.curves[0].mean[0] / cmp.curves[1].mean[0];
        let mut curves = cmp.curves.into_iter();
        out.push(AblationPoint {
            p,
            shallow: curves.next().unwrap(),
            deep: curves.next().unwrap(),
            ratio,
            autocorr,
        });
    }
    Ok(out)
}
