use crate::error::{Error, Result};
use crate::field::GridSeries;

fn check_pair(forecast: &GridSeries, truth: &GridSeries, horizon: usize) -> Result<Vec<usize>> {
    forecast.check_aligned(truth)?;
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if horizon > forecast.n_time() || horizon > truth.n_time() {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} exceeds series lengths ({} forecast, {} truth)",
            forecast.n_time(),
            truth.n_time()
        )));
    }
    let cells = forecast.valid_cells();
    if cells.is_empty() {
        return Err(Error::NoValidCells);
    }
    Ok(cells)
}

/// Per-cell mean squared error over the first `horizon` steps.
fn cell_mse(forecast: &GridSeries, truth: &GridSeries, horizon: usize, cells: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; cells.len()];
    for t in 0..horizon {
        let (f, v) = (forecast.frame(t), truth.frame(t));
        for (a, &c) in acc.iter_mut().zip(cells) {
            let d = f[c] - v[c];
            *a += d * d;
        }
    }
    acc.iter_mut().for_each(|a| *a /= horizon as f64);
    acc
}

/// Root-mean-square error pooled over valid cells and steps `1..=horizon`.
pub fn rmse_upto(forecast: &GridSeries, truth: &GridSeries, horizon: usize) -> Result<f64> {
    let cells = check_pair(forecast, truth, horizon)?;
    let mse = cell_mse(forecast, truth, horizon, &cells);
    Ok((mse.iter().sum::<f64>() / cells.len() as f64).sqrt())
}

/// Per-cell RMSE over steps `1..=horizon`, as a one-frame series with the
/// input mask.
pub fn rmse_map(forecast: &GridSeries, truth: &GridSeries, horizon: usize) -> Result<GridSeries> {
    let cells = check_pair(forecast, truth, horizon)?;
    let mse = cell_mse(forecast, truth, horizon, &cells);
    let mut frame = vec![0.0; forecast.n_cells()];
    for (&c, m) in cells.iter().zip(mse) {
        frame[c] = m.sqrt();
    }
    GridSeries::new(1, forecast.n_rows(), forecast.n_cols(), frame, forecast.mask().to_vec(), forecast.meta)
}

/// `rmse_upto` at each horizon in `horizons`, computed in one pass.
pub fn rmse_curve(forecast: &GridSeries, truth: &GridSeries, horizons: &[usize]) -> Result<Vec<f64>> {
    let max = horizons.iter().copied().max().unwrap_or(0);
    let cells = check_pair(forecast, truth, max.max(1))?;
    if horizons.contains(&0) {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let mut cumulative = Vec::with_capacity(max);
    let mut total = 0.0;
    for t in 0..max {
        let (f, v) = (forecast.frame(t), truth.frame(t));
        total += cells.iter().map(|&c| (f[c] - v[c]).powi(2)).sum::<f64>();
        cumulative.push(total);
    }
    let n = cells.len() as f64;
    Ok(horizons.iter().map(|&h| (cumulative[h - 1] / (n * h as f64)).sqrt()).collect())
}

/// Mean and standard error of the mean (sample standard deviation over
/// `sqrt(n)`; zero for a single value).
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// RMSE-versus-horizon curves of several runs, summarized per horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    pub horizons: Vec<usize>,
    /// One curve per run, each aligned with `horizons`.
    pub runs: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub sem: Vec<f64>,
}

impl ErrorCurve {
    pub fn from_runs(horizons: Vec<usize>, runs: Vec<Vec<f64>>) -> Result<Self> {
        if runs.iter().any(|r| r.len() != horizons.len()) {
            return Err(Error::DimensionMismatch("run curve length differs from horizon count".into()));
        }
        let (mean, sem) = (0..horizons.len())
            .map(|k| mean_sem(&runs.iter().map(|r| r[k]).collect::<Vec<_>>()))
            .unzip();
        Ok(ErrorCurve {
            horizons,
            runs,
            mean,
            sem,
        })
    }

    pub fn n_runs(&self) -> usize {
        self.runs.len()
    }

    /// Pointwise ratio of mean curves, `self / reference`.
    pub fn ratio_to(&self, reference: &ErrorCurve) -> Result<Vec<f64>> {
        if self.horizons != reference.horizons {
            return Err(Error::DimensionMismatch("curves use different horizons".into()));
        }
        Ok(self.mean.iter().zip(&reference.mean).map(|(a, b)| a / b).collect())
    }
}

/// Mean absolute autocorrelation over valid cells, for lags `0..=max_lag`.
#[derive(Debug, Clone, PartialEq)]
pub struct Autocorrelation {
    pub values: Vec<f64>,
    /// Valid cells left out because their series is constant.
    pub excluded_cells: usize,
}

pub fn mean_abs_autocorr(series: &GridSeries, max_lag: usize) -> Result<Autocorrelation> {
    let n = series.n_time();
    if n <= max_lag {
        return Err(Error::InvalidArgument(format!(
            "max lag {max_lag} needs more than {max_lag} frames, series has {n}"
        )));
    }
    let mut sums = vec![0.0; max_lag + 1];
    let mut used = 0usize;
    let mut excluded = 0usize;
    for cell in series.valid_cells() {
        let mut x = series.cell_series(cell);
        let mean = x.iter().sum::<f64>() / n as f64;
        x.iter_mut().for_each(|v| *v -= mean);
        let c0: f64 = x.iter().map(|v| v * v).sum();
        if c0 <= f64::MIN_POSITIVE || c0 <= 1e-24 * mean * mean * n as f64 {
            excluded += 1;
            continue;
        }
        used += 1;
        sums[0] += 1.0;
        for (lag, s) in sums.iter_mut().enumerate().skip(1) {
            let c: f64 = x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum();
            *s += (c / c0).abs();
        }
    }
    if used == 0 {
        return Err(Error::Degenerate("every valid cell has a constant series".into()));
    }
    Ok(Autocorrelation {
        values: sums.into_iter().map(|s| s / used as f64).collect(),
        excluded_cells: excluded,
    })
}
