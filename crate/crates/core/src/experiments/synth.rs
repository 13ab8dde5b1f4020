//! Synthetic multiscale fields: a spatially uniform slow oscillation, a
//! traveling wave along the columns, and spatially independent logistic-map
//! chaos, summed cell by cell.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{GridMeta, GridSeries};
use crate::rng::{mix64, stream, StreamRole};

/// Iterations discarded before the logistic maps are recorded.
const CHAOS_BURN_IN: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Component {
    /// `amplitude * sin(2 pi t / period)` on every cell.
    GlobalOscillation { amplitude: f64, period: f64 },
    /// `amplitude * sin(2 pi (col - speed t) / wavelength)`; lengths in cells,
    /// `speed` in cells per frame.
    TravelingWave { amplitude: f64, wavelength: f64, speed: f64 },
    /// Per-cell iterates of `x -> mu x (1 - x)` mapped from `[0, 1]` to
    /// `[-amplitude, amplitude]`.
    LocalChaos { amplitude: f64, mu: f64 },
}

/// Cells masked out as a block (`rows x cols` starting at `row0, col0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRect {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_time: usize,
    #[serde(default)]
    pub seed: u64,
    pub components: Vec<Component>,
    #[serde(default)]
    pub mask: Vec<MaskRect>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_cols == 0 || self.n_time == 0 {
            return Err(Error::config("n_rows/n_cols/n_time", "dimensions must be positive"));
        }
        if self.components.is_empty() {
            return Err(Error::config("components", "at least one component is required"));
        }
        for (i, c) in self.components.iter().enumerate() {
            let field = |name: &str| format!("components[{i}].{name}");
            let amplitude = match *c {
                Component::GlobalOscillation { amplitude, period } => {
                    if !(period.is_finite() && period > 0.0) {
                        return Err(Error::config(field("period"), format!("must be positive, got {period}")));
                    }
                    amplitude
                }
                Component::TravelingWave {
                    amplitude,
                    wavelength,
                    speed,
                } => {
                    if !(wavelength.is_finite() && wavelength > 0.0) {
                        return Err(Error::config(field("wavelength"), format!("must be positive, got {wavelength}")));
                    }
                    if !speed.is_finite() {
                        return Err(Error::config(field("speed"), "must be finite"));
                    }
                    amplitude
                }
                Component::LocalChaos { amplitude, mu } => {
                    if !(mu > 0.0 && mu <= 4.0) {
                        return Err(Error::config(field("mu"), format!("must lie in (0, 4], got {mu}")));
                    }
                    amplitude
                }
            };
            if !amplitude.is_finite() {
                return Err(Error::config(field("amplitude"), "must be finite"));
            }
        }
        for (i, m) in self.mask.iter().enumerate() {
            if m.row0 + m.rows > self.n_rows || m.col0 + m.cols > self.n_cols {
                return Err(Error::config(format!("mask[{i}]"), "rectangle extends past the grid"));
            }
        }
        Ok(())
    }

    pub fn mask_vec(&self) -> Vec<bool> {
        let mut mask = vec![true; self.n_rows * self.n_cols];
        for m in &self.mask {
            for r in m.row0..m.row0 + m.rows {
                for c in m.col0..m.col0 + m.cols {
                    mask[r * self.n_cols + c] = false;
                }
            }
        }
        mask
    }
}

fn logistic_field(spec: &SynthSpec, index: usize, amplitude: f64, mu: f64, values: &mut [f64]) {
    let n = spec.n_rows * spec.n_cols;
    let seed = mix64(spec.seed ^ mix64(index as u64));
    let mut rng = stream(seed, StreamRole::SynthChaos);
    let mut reseed = stream(seed, StreamRole::SynthAux);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let mut advance = |x: &mut [f64]| {
        for v in x.iter_mut() {
            *v = mu * *v * (1.0 - *v);
            // a float orbit can land on the fixed point 0; restart it
            if *v <= 0.0 || *v >= 1.0 {
                *v = reseed.random_range(0.05..0.95);
            }
        }
    };
    for _ in 0..CHAOS_BURN_IN {
        advance(&mut x);
    }
    for t in 0..spec.n_time {
        advance(&mut x);
        for (out, v) in values[t * n..(t + 1) * n].iter_mut().zip(&x) {
            *out += amplitude * (2.0 * v - 1.0);
        }
    }
}

/// Deterministic in `spec` (including its seed).
pub fn gen_multiscale_synthetic(spec: &SynthSpec) -> Result<GridSeries> {
    spec.validate()?;
    let (rows, cols, n_time) = (spec.n_rows, spec.n_cols, spec.n_time);
    let n = rows * cols;
    let mut values = vec![0.0; n_time * n];
    let two_pi = 2.0 * std::f64::consts::PI;
    for (index, component) in spec.components.iter().enumerate() {
        match *component {
            Component::GlobalOscillation { amplitude, period } => {
                for t in 0..n_time {
                    let v = amplitude * (two_pi * t as f64 / period).sin();
                    values[t * n..(t + 1) * n].iter_mut().for_each(|x| *x += v);
                }
            }
            Component::TravelingWave {
                amplitude,
                wavelength,
                speed,
            } => {
                for t in 0..n_time {
                    for c in 0..cols {
                        let v = amplitude * (two_pi * (c as f64 - speed * t as f64) / wavelength).sin();
                        for r in 0..rows {
                            values[t * n + r * cols + c] += v;
                        }
                    }
                }
            }
            Component::LocalChaos { amplitude, mu } => logistic_field(spec, index, amplitude, mu, &mut values),
        }
    }
    GridSeries::new(n_time, rows, cols, values, spec.mask_vec(), GridMeta::default())
}
