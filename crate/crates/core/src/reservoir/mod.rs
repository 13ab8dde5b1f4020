//! A single leaky-tanh reservoir.
//!
//! State evolution is the explicit Euler discretization of
//!
//! ```text
//! tau * dr/dt = -r + tanh(W r + W_in u)
//! ```
//!
//! with step `dt_step`, so `r' = r + (dt_step / tau) (-r + tanh(W r + W_in u))`.
//! For `dt_step <= tau` the update is a convex combination of `r` and a
//! vector in `[-1, 1]`, which keeps every state entry within
//! `max(|r_i(0)|, 1)`.
//!
//! The readout is linear, `v = W_out r`, fitted by ridge regression.

mod ridge;
mod sparse;

pub use ridge::train_readout;
pub use sparse::SparseMatrix;

use nalgebra::{DMatrix, DVectorView, DVectorViewMut};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, StreamRole};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReservoirHyperparams {
    /// Number of neurons.
    pub d_r: usize,
    /// Recurrent gain; nonzero weights have standard deviation `g / sqrt(p d_r)`.
    pub g: f64,
    /// Connection density `p` in (0, 1].
    pub density: f64,
    /// Gain on the tile's own input features.
    pub g_in: f64,
    /// Gain on features routed from the coarser layer.
    pub g_l: f64,
    pub tau: f64,
    pub dt_step: f64,
    /// Standard deviation of Gaussian noise added to inputs while teacher forcing.
    pub noise_std: f64,
    /// Ridge regularizer, relative to the mean squared state entry times the
    /// number of samples (see [`Reservoir::absolute_beta`]).
    pub beta: f64,
    /// Driven steps discarded before fitting the readout.
    pub washout: usize,
}

impl Default for ReservoirHyperparams {
    fn default() -> Self {
        ReservoirHyperparams {
            d_r: 1250,
            g: 0.9,
            density: 0.1,
            g_in: 0.1,
            g_l: 0.1,
            tau: 2.0,
            dt_step: 1.0,
            noise_std: 0.0,
            beta: 1e-6,
            washout: 100,
        }
    }
}

impl ReservoirHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.d_r == 0 {
            return bad("d_r", "must be at least 1".into());
        }
        for (name, v) in [("g", self.g), ("g_in", self.g_in), ("g_l", self.g_l), ("noise_std", self.noise_std), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(name, format!("must be finite and >= 0, got {v}"));
            }
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return bad("density", format!("must lie in (0, 1], got {}", self.density));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad("tau", format!("must be > 0, got {}", self.tau));
        }
        if !(self.dt_step.is_finite() && self.dt_step > 0.0) {
            return bad("dt_step", format!("must be > 0, got {}", self.dt_step));
        }
        if self.dt_step > self.tau {
            return bad("dt_step", format!("dt_step {} exceeds tau {}", self.dt_step, self.tau));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirState {
    pub r: Vec<f64>,
}

impl ReservoirState {
    pub fn zeros(d_r: usize) -> Self {
        ReservoirState { r: vec![0.0; d_r] }
    }
}

/// One step's state together with the argument of `tanh` that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: ReservoirState,
    pub preactivation: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Reservoir {
    pub hyper: ReservoirHyperparams,
    pub d_in_local: usize,
    pub d_in_parent: usize,
    pub d_out: usize,
    pub seed: u64,
    w: SparseMatrix,
    w_in: DMatrix<f64>,
    w_out: Option<DMatrix<f64>>,
}

/// Builds a reservoir with random fixed weights.
///
/// Every slot of `W` is nonzero with probability `density`, and nonzero values
/// are drawn from `Normal(0, (g / sqrt(density d_r))^2)`. `W_in` is dense
/// `Uniform(-1, 1)` with local columns scaled by `g_in` and parent columns by
/// `g_l`. Both are pure functions of `(seed, hyper, dims)`.
pub fn init_reservoir(
    hyper: ReservoirHyperparams,
    d_in_local: usize,
    d_in_parent: usize,
    d_out: usize,
    seed: u64,
) -> Result<Reservoir> {
    hyper.validate()?;
    if d_in_local + d_in_parent == 0 || d_out == 0 {
        return Err(Error::InvalidArgument(format!(
            "reservoir needs inputs and outputs, got d_in = {} + {}, d_out = {d_out}",
            d_in_local, d_in_parent
        )));
    }
    let d_r = hyper.d_r;
    let std = hyper.g / (hyper.density * d_r as f64).sqrt();
    let mut rng = stream(seed, StreamRole::Recurrent);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows = Vec::with_capacity(d_r);
    for _ in 0..d_r {
        let mut row = Vec::new();
        for j in 0..d_r {
            let keep = rng.random::<f64>() < hyper.density;
            if keep {
                let v = std * normal.sample(&mut rng);
                if v != 0.0 {
                    row.push((j, v));
                }
            }
        }
        rows.push(row);
    }
    let w = SparseMatrix::from_rows(d_r, rows);

    let d_in = d_in_local + d_in_parent;
    let mut rng = stream(seed, StreamRole::Input);
    let uniform = Uniform::new(-1.0, 1.0).expect("valid range");
    let mut w_in = DMatrix::zeros(d_r, d_in);
    for i in 0..d_r {
        for j in 0..d_in {
            let gain = if j < d_in_local { hyper.g_in } else { hyper.g_l };
            w_in[(i, j)] = gain * uniform.sample(&mut rng);
        }
    }
    Ok(Reservoir {
        hyper,
        d_in_local,
        d_in_parent,
        d_out,
        seed,
        w,
        w_in,
        w_out: None,
    })
}

impl Reservoir {
    pub fn d_r(&self) -> usize {
        self.hyper.d_r
    }

    pub fn d_in(&self) -> usize {
        self.d_in_local + self.d_in_parent
    }

    pub fn w(&self) -> &SparseMatrix {
        &self.w
    }

    pub fn w_in(&self) -> &DMatrix<f64> {
        &self.w_in
    }

    pub fn w_out(&self) -> Option<&DMatrix<f64>> {
        self.w_out.as_ref()
    }

    pub fn is_trained(&self) -> bool {
        self.w_out.is_some()
    }

    pub fn set_readout(&mut self, w_out: DMatrix<f64>) -> Result<()> {
        if w_out.nrows() != self.d_out || w_out.ncols() != self.d_r() {
            return Err(Error::DimensionMismatch(format!(
                "readout must be {}x{}, got {}x{}",
                self.d_out,
                self.d_r(),
                w_out.nrows(),
                w_out.ncols()
            )));
        }
        self.w_out = Some(w_out);
        Ok(())
    }

    /// `W 1` and `W_in 1`; stored in checkpoints to validate regenerated weights.
    pub fn weight_probe(&self) -> (Vec<f64>, Vec<f64>) {
        let mut w1 = vec![0.0; self.d_r()];
        self.w.mul_vec_into(&vec![1.0; self.d_r()], &mut w1);
        let win1 = self.w_in.column_sum().as_slice().to_vec();
        (w1, win1)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.d_in() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} features, reservoir expects {}",
                input.len(),
                self.d_in()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite reservoir input".into()));
        }
        Ok(())
    }

    /// `pre = W r + W_in u`, then the Euler update of `r` in place.
    pub(crate) fn step_in_place(&self, r: &mut [f64], input: &[f64], pre: &mut [f64]) {
        let d_r = self.d_r();
        self.w.mul_vec_into(r, pre);
        let mut pre_v = DVectorViewMut::from_slice(pre, d_r);
        pre_v.gemv(1.0, &self.w_in, &DVectorView::from_slice(input, input.len()), 1.0);
        let a = self.hyper.dt_step / self.hyper.tau;
        for (ri, &p) in r.iter_mut().zip(pre.iter()) {
            *ri += a * (p.tanh() - *ri);
        }
    }

    pub fn step(&self, state: &ReservoirState, input: &[f64]) -> Result<ReservoirState> {
        Ok(self.step_record(state, input)?.state)
    }

    pub fn step_record(&self, state: &ReservoirState, input: &[f64]) -> Result<StepRecord> {
        self.check_input(input)?;
        if state.r.len() != self.d_r() {
            return Err(Error::DimensionMismatch(format!(
                "state has {} entries, reservoir has {}",
                state.r.len(),
                self.d_r()
            )));
        }
        let mut r = state.r.clone();
        let mut pre = vec![0.0; self.d_r()];
        self.step_in_place(&mut r, input, &mut pre);
        Ok(StepRecord {
            state: ReservoirState { r },
            preactivation: pre,
        })
    }

    /// Drives the reservoir through `inputs` and returns every visited state.
    ///
    /// With `noise_std > 0` each input component gets independent
    /// `Normal(0, noise_std^2)` noise drawn from `rng` before the step.
    pub fn drive(
        &self,
        inputs: &[Vec<f64>],
        initial: &ReservoirState,
        noise_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<ReservoirState>> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("drive needs at least one input".into()));
        }
        for u in inputs {
            self.check_input(u)?;
        }
        let mut states = Vec::with_capacity(inputs.len());
        self.drive_with(
            inputs.len(),
            |t, buf| buf.copy_from_slice(&inputs[t]),
            initial,
            noise_std,
            rng,
            |_, r| states.push(ReservoirState { r: r.to_vec() }),
        )?;
        Ok(states)
    }

    /// Allocation-free drive loop: `fill(t, buf)` writes input `t`, `visit(t, r)`
    /// sees the state after consuming it.
    pub(crate) fn drive_with(
        &self,
        n_steps: usize,
        mut fill: impl FnMut(usize, &mut [f64]),
        initial: &ReservoirState,
        noise_std: f64,
        rng: &mut ChaCha8Rng,
        mut visit: impl FnMut(usize, &[f64]),
    ) -> Result<ReservoirState> {
        let noise = if noise_std > 0.0 {
            Some(Normal::new(0.0, noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?)
        } else {
            None
        };
        let mut r = initial.r.clone();
        let mut pre = vec![0.0; self.d_r()];
        let mut u = vec![0.0; self.d_in()];
        for t in 0..n_steps {
            fill(t, &mut u);
            if let Some(n) = &noise {
                for x in u.iter_mut() {
                    *x += n.sample(rng);
                }
            }
            self.step_in_place(&mut r, &u, &mut pre);
            visit(t, &r);
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("reservoir state diverged".into()));
        }
        Ok(ReservoirState { r })
    }

    pub fn readout(&self, state: &ReservoirState) -> Result<Vec<f64>> {
        let w_out = self
            .w_out
            .as_ref()
            .ok_or_else(|| Error::Untrained("reservoir readout has not been fitted".into()))?;
        if state.r.len() != self.d_r() {
            return Err(Error::DimensionMismatch(format!(
                "state has {} entries, reservoir has {}",
                state.r.len(),
                self.d_r()
            )));
        }
        let mut out = vec![0.0; self.d_out];
        DVectorViewMut::from_slice(&mut out, self.d_out).gemv(
            1.0,
            w_out,
            &DVectorView::from_slice(&state.r, self.d_r()),
            0.0,
        );
        Ok(out)
    }

    /// Converts the relative ridge parameter into the absolute `beta` for a
    /// state matrix: `hyper.beta * sum(S^2) / d_r`.
    pub fn absolute_beta(&self, states: &DMatrix<f64>) -> f64 {
        self.hyper.beta * states.norm_squared() / self.d_r() as f64
    }
}
