use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Ridge regression readout.
///
/// `states` is `d_r x N` (one column per time step), `targets` is
/// `d_out x N`. Returns `W_out = V S^T (S S^T + beta I)^-1`, the minimizer of
/// `||V - W_out S||_F^2 + beta ||W_out||_F^2`, through a Cholesky
/// factorization of the regularized Gram matrix.
pub fn train_readout(states: &DMatrix<f64>, targets: &DMatrix<f64>, beta: f64) -> Result<DMatrix<f64>> {
    if states.ncols() == 0 {
        return Err(Error::InvalidArgument("ridge regression needs at least one sample".into()));
    }
    if states.ncols() != targets.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} state samples vs {} target samples",
            states.ncols(),
            targets.ncols()
        )));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge beta must be finite and >= 0, got {beta}")));
    }
    let d_r = states.nrows();
    let mut gram = states * states.transpose();
    for i in 0..d_r {
        gram[(i, i)] += beta;
    }
    let rhs = states * targets.transpose();
    let max_diag = (0..d_r).map(|i| gram[(i, i)]).fold(0.0_f64, f64::max);
    let singular = || {
        Error::Singular(format!(
            "state Gram matrix ({d_r}x{d_r}) is rank deficient with beta = {beta}; use beta > 0"
        ))
    };
    if max_diag == 0.0 {
        return Err(singular());
    }
    let chol = gram.cholesky().ok_or_else(singular)?;
    let l = chol.l_dirty();
    let min_pivot = (0..d_r).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_pivot <= max_diag * 1e-13 * d_r as f64 && beta == 0.0 {
        return Err(singular());
    }
    let w_out_t = chol.solve(&rhs);
    if w_out_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("ridge solution contains non-finite values".into()));
    }
    Ok(w_out_t.transpose())
}
