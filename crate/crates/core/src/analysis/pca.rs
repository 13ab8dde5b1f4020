//! Spatial principal components: cells are variables, frames are samples.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::GridSeries;

/// Above this size (smaller of frame count and valid-cell count) the top
/// components are found by subspace iteration instead of a dense eigensolve.
const DENSE_LIMIT: usize = 600;
const SUBSPACE_EXTRA: usize = 10;
const SUBSPACE_MAX_ITER: usize = 2000;
const SUBSPACE_TOL: f64 = 1e-10;

/// The leading `P` spatial components of a series, fitted once and
/// reusable as a projector.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    pub cells: Vec<usize>,
    pub means: Vec<f64>,
    /// Orthonormal spatial patterns, `n_valid x P`.
    pub components: DMatrix<f64>,
    /// Covariance eigenvalues of the components, descending.
    pub eigenvalues: Vec<f64>,
    /// Sum of per-cell sample variances.
    pub total_variance: f64,
}

fn centered(series: &GridSeries, cells: &[usize]) -> (DMatrix<f64>, Vec<f64>) {
    let n = series.n_time();
    let mut x = DMatrix::from_fn(n, cells.len(), |t, j| series.frame(t)[cells[j]]);
    let mut means = Vec::with_capacity(cells.len());
    for mut col in x.column_iter_mut() {
        let m = col.sum() / n as f64;
        col.add_scalar_mut(-m);
        means.push(m);
    }
    (x, means)
}

fn sorted_top(eig: SymmetricEigen<f64, nalgebra::Dyn>, p: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let vals = order[..p].iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(eig.eigenvectors.nrows(), p, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    let k = m.ncols();
    m.qr().q().columns(0, k).into_owned()
}

fn subspace_top(x: &DMatrix<f64>, p: usize, denom: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = x.ncols();
    let k = (p + SUBSPACE_EXTRA).min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = orthonormalize(DMatrix::from_fn(d, k, |_, _| rng.random_range(-1.0..1.0)));
    for it in 0..SUBSPACE_MAX_ITER {
        let y = x.tr_mul(&(x * &v));
        v = orthonormalize(y);
        if it % 5 != 4 {
            continue;
        }
        let b = x * &v;
        let h = b.tr_mul(&b) / denom;
        let (theta, s) = sorted_top(h.symmetric_eigen(), k);
        let ritz = &v * &s;
        let cv = x.tr_mul(&(x * &ritz)) / denom;
        let scale = theta[0].abs().max(f64::MIN_POSITIVE);
        let converged = (0..p).all(|j| (cv.column(j) - ritz.column(j) * theta[j]).norm() <= SUBSPACE_TOL * scale);
        if converged {
            return Ok((theta[..p].to_vec(), ritz.columns(0, p).into_owned()));
        }
    }
    Err(Error::Numerical(format!(
        "principal components did not converge in {SUBSPACE_MAX_ITER} subspace iterations"
    )))
}

/// Fits the top `p` components. Requires `p` below both the frame count and
/// the number of valid cells.
pub fn fit_pca(series: &GridSeries, p: usize) -> Result<PcaProjection> {
    let cells = series.valid_cells();
    let n = series.n_time();
    if p >= cells.len() || p >= n {
        return Err(Error::InvalidArgument(format!(
            "cannot remove {p} components from {} frames of {} valid cells",
            n,
            cells.len()
        )));
    }
    let (x, means) = centered(series, &cells);
    let denom = (n - 1) as f64;
    let total_variance = x.norm_squared() / denom;
    let (eigenvalues, components) = if p == 0 {
        (Vec::new(), DMatrix::zeros(cells.len(), 0))
    } else if n.min(cells.len()) > DENSE_LIMIT {
        subspace_top(&x, p, denom)?
    } else if cells.len() <= n {
        sorted_top((x.tr_mul(&x) / denom).symmetric_eigen(), p)
    } else {
        // economy size: temporal Gram matrix, then map to spatial patterns
        let (vals, u) = sorted_top((&x * x.transpose() / denom).symmetric_eigen(), p);
        let mut v = x.tr_mul(&u);
        for mut col in v.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col.unscale_mut(norm);
            }
        }
        (vals, v)
    };
    Ok(PcaProjection {
        cells,
        means,
        components,
        eigenvalues,
        total_variance,
    })
}

impl PcaProjection {
    /// Removes the fitted components from `series` (same grid and mask as the
    /// fitted one), keeping the fitted cell means.
    pub fn remove(&self, series: &GridSeries) -> Result<GridSeries> {
        if series.valid_cells() != self.cells {
            return Err(Error::DimensionMismatch("series mask differs from the fitted one".into()));
        }
        let n = series.n_time();
        let mut x = DMatrix::from_fn(n, self.cells.len(), |t, j| series.frame(t)[self.cells[j]] - self.means[j]);
        if self.components.ncols() > 0 {
            let scores = &x * &self.components;
            x -= scores * self.components.transpose();
        }
        let mut values = vec![0.0; series.values().len()];
        let nc = series.n_cells();
        for t in 0..n {
            for (j, &c) in self.cells.iter().enumerate() {
                values[t * nc + c] = x[(t, j)] + self.means[j];
            }
        }
        series.with_values(n, values)
    }
}

/// Subtracts the rank-`p` principal-component reconstruction from `series`.
/// `p = 0` returns the series unchanged.
pub fn remove_top_pcs(series: &GridSeries, p: usize) -> Result<GridSeries> {
    if p == 0 {
        fit_pca(series, 0)?;
        return Ok(series.clone());
    }
    fit_pca(series, p)?.remove(series)
}

/// Sum of per-cell sample variances over valid cells.
pub fn total_variance(series: &GridSeries) -> f64 {
    let cells = series.valid_cells();
    let (x, _) = centered(series, &cells);
    x.norm_squared() / (series.n_time().max(2) - 1) as f64
}
