//! Small-signal linearization of trained reservoirs in closed loop.
//!
//! Around `r = 0`, with `tanh(x) ~ x` and the readout fed back as input, a
//! reservoir evolves as `tau dr/dt = (W_eff - I) r` where
//! `W_eff = W + W_in M W_out` and `M` routes each output to the input slots it
//! occupies. The Euler step's Jacobian at the origin is
//! `I + (dt / tau) (W_eff - I)`.

use nalgebra::{Complex, DMatrix, DVector};

use super::eigen::{eigen_decompose, reconstruction_residual};
use crate::error::{Error, Result};
use crate::layer::{Layer, StepActivity};
use crate::reservoir::{Reservoir, ReservoirState, StepRecord};

type C64 = Complex<f64>;

/// Eigenvalue residual above which a matrix is treated as non-diagonalizable.
pub const DEFECT_TOLERANCE: f64 = 1e-6;

/// `(input position, output row)` pairs: output row `o` is fed back into
/// input slot `p`.
pub type Feedback = Vec<(usize, usize)>;

/// Output `k` fed back to input `k`, for reservoirs with `d_in == d_out`.
pub fn identity_feedback(res: &Reservoir) -> Result<Feedback> {
    if res.d_in() != res.d_out {
        return Err(Error::DimensionMismatch(format!(
            "identity feedback needs d_in == d_out, got {} and {}",
            res.d_in(),
            res.d_out
        )));
    }
    Ok((0..res.d_out).map(|k| (k, k)).collect())
}

/// Inputs of a tile's reservoir that read cells it predicts itself.
pub fn tile_self_feedback(layer: &Layer, unit_index: usize) -> Feedback {
    let tile = &layer.tiling.tiles[layer.units[unit_index].tile_index];
    tile.input_cells
        .iter()
        .enumerate()
        .filter_map(|(p, c)| tile.center_cells.iter().position(|x| x == c).map(|o| (p, o)))
        .collect()
}

fn trained_readout(res: &Reservoir) -> Result<&DMatrix<f64>> {
    res.w_out()
        .ok_or_else(|| Error::Untrained("effective matrix needs a trained readout".into()))
}

/// `W + sum over feedback pairs of W_in[:, p] W_out[o, :]`.
pub fn effective_matrix(res: &Reservoir, feedback: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    let w_out = trained_readout(res)?;
    let mut m = res.w().to_dense();
    for &(p, o) in feedback {
        if p >= res.d_in() || o >= res.d_out {
            return Err(Error::InvalidArgument(format!("feedback pair ({p}, {o}) out of range")));
        }
        m.ger(1.0, &res.w_in().column(p), &w_out.row(o).transpose(), 1.0);
    }
    Ok(m)
}

/// Offsets of each unit's state in the concatenated layer state.
pub fn state_offsets(layer: &Layer) -> Vec<usize> {
    let mut off = Vec::with_capacity(layer.units.len() + 1);
    let mut acc = 0;
    off.push(0);
    for u in &layer.units {
        acc += u.reservoir.d_r();
        off.push(acc);
    }
    off
}

/// Effective connectivity of a whole layer seen as one reservoir whose state
/// concatenates its tiles' states. Block `(i, j)` couples tile `i`'s inputs
/// to the cells tile `j` predicts.
///
/// Parent features are external to the layer; layers that route them are
/// only accepted with `frozen_parent`, which holds them at zero.
pub fn assemble_effective_layer(layer: &Layer, frozen_parent: bool) -> Result<DMatrix<f64>> {
    if layer.needs_parent() && !frozen_parent {
        return Err(Error::InvalidArgument(format!(
            "layer {} routes parent features; analyze it with the parent signal frozen",
            layer.level
        )));
    }
    let off = state_offsets(layer);
    let n = off[layer.units.len()];
    let mut unit_of_tile = vec![usize::MAX; layer.tiling.n_tiles()];
    for (i, u) in layer.units.iter().enumerate() {
        unit_of_tile[u.tile_index] = i;
    }
    let mut m = DMatrix::zeros(n, n);
    for (i, unit) in layer.units.iter().enumerate() {
        let res = &unit.reservoir;
        trained_readout(res)?;
        let d = res.d_r();
        m.view_mut((off[i], off[i]), (d, d)).copy_from(&res.w().to_dense());
        let tile = &layer.tiling.tiles[unit.tile_index];
        for (p, &cell) in tile.input_cells.iter().enumerate() {
            let owner = layer.tiling.owner_of(cell / layer.grid_cols, cell % layer.grid_cols);
            let j = unit_of_tile[owner];
            if j == usize::MAX {
                continue;
            }
            let src = &layer.units[j].reservoir;
            let o = layer.tiling.tiles[owner]
                .center_cells
                .iter()
                .position(|&c| c == cell)
                .ok_or_else(|| Error::InvalidArgument(format!("cell {cell} not predicted by its owner tile")))?;
            let w_out = trained_readout(src)?;
            let mut block = m.view_mut((off[i], off[j]), (d, src.d_r()));
            block.ger(1.0, &res.w_in().column(p), &w_out.row(o).transpose(), 1.0);
        }
    }
    Ok(m)
}

/// Block-diagonal readout of a layer: rows are the tiles' predicted cells in
/// unit order, columns the concatenated state.
pub fn layer_readout(layer: &Layer) -> Result<DMatrix<f64>> {
    let off = state_offsets(layer);
    let rows: usize = layer.units.iter().map(|u| u.reservoir.d_out).sum();
    let mut m = DMatrix::zeros(rows, off[layer.units.len()]);
    let mut r = 0;
    for (i, u) in layer.units.iter().enumerate() {
        let w_out = trained_readout(&u.reservoir)?;
        m.view_mut((r, off[i]), w_out.shape()).copy_from(w_out);
        r += u.reservoir.d_out;
    }
    Ok(m)
}

/// Concatenates per-unit states in unit order.
pub fn concat_states(states: &[ReservoirState]) -> Vec<f64> {
    states.iter().flat_map(|s| s.r.iter().copied()).collect()
}

/// Eigenmodes of an effective matrix, projected on a readout and an initial
/// state. Modes are ordered by `|weight|`, largest first, with conjugate
/// partners adjacent (positive imaginary part first).
#[derive(Debug, Clone)]
pub struct ModalDecomposition {
    pub lambda: Vec<C64>,
    pub z: DMatrix<C64>,
    pub z0: Vec<C64>,
    pub weights: Vec<C64>,
    pub tau: f64,
    /// `W_out Z`.
    pub out_map: DMatrix<C64>,
    pub partner: Vec<Option<usize>>,
    /// Relative reconstruction residual of the eigendecomposition.
    pub residual: f64,
}

impl ModalDecomposition {
    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    /// Period `2 pi tau / |Im lambda|` of an oscillating mode.
    pub fn period(&self, k: usize) -> Option<f64> {
        let im = self.lambda[k].im;
        (im != 0.0).then(|| 2.0 * std::f64::consts::PI * self.tau / im.abs())
    }

    /// Continuous-time decay rate `(Re lambda - 1) / tau`.
    pub fn growth_rate(&self, k: usize) -> f64 {
        (self.lambda[k].re - 1.0) / self.tau
    }

    /// `w_k exp((lambda_k - 1) t / tau)`, mode `k`'s share of the summed output.
    pub fn mode_contribution(&self, k: usize, t: f64) -> C64 {
        self.weights[k] * ((self.lambda[k] - C64::new(1.0, 0.0)) * (t / self.tau)).exp()
    }

    /// Number of leading modes to keep so that no conjugate pair is split.
    pub fn paired_cutoff(&self, top_k: usize) -> usize {
        let n = top_k.min(self.len());
        match n.checked_sub(1).and_then(|last| self.partner[last]) {
            Some(p) if p >= n => p + 1,
            _ => n,
        }
    }
}

pub fn modal_decomposition(
    w_tilde: &DMatrix<f64>,
    w_out: &DMatrix<f64>,
    r0: &[f64],
    tau: f64,
) -> Result<ModalDecomposition> {
    let d = w_tilde.nrows();
    if w_out.ncols() != d || r0.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "effective matrix is {d}x{}, readout has {} columns, initial state has {} entries",
            w_tilde.ncols(),
            w_out.ncols(),
            r0.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let eig = eigen_decompose(w_tilde)?;
    let (residual, inv) = reconstruction_residual(w_tilde, &eig)?;
    if residual > DEFECT_TOLERANCE {
        return Err(Error::NearDefective(residual));
    }
    let r0c = DVector::from_iterator(d, r0.iter().map(|&v| C64::new(v, 0.0)));
    let mut z0: Vec<C64> = (inv * r0c).iter().copied().collect();
    for k in 0..d {
        if let Some(p) = eig.partner[k] {
            if p > k {
                z0[p] = z0[k].conj();
            }
        }
    }
    let out_map = w_out.map(|v| C64::new(v, 0.0)) * &eig.vectors;
    let weights: Vec<C64> = (0..d).map(|k| out_map.column(k).sum() * z0[k]).collect();

    // order by weight, one group per conjugate pair
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for k in 0..d {
        match eig.partner[k] {
            Some(p) if p < k => {}
            Some(p) => groups.push(vec![k, p]),
            None => groups.push(vec![k]),
        }
    }
    let group_weight = |g: &Vec<usize>| g.iter().map(|&k| weights[k].norm()).fold(0.0, f64::max);
    groups.sort_by(|a, b| group_weight(b).total_cmp(&group_weight(a)).then(a[0].cmp(&b[0])));
    let order: Vec<usize> = groups.into_iter().flatten().collect();
    let mut position = vec![0; d];
    for (new, &old) in order.iter().enumerate() {
        position[old] = new;
    }
    let pick = |m: &DMatrix<C64>| DMatrix::from_fn(m.nrows(), d, |r, c| m[(r, order[c])]);
    Ok(ModalDecomposition {
        lambda: order.iter().map(|&k| eig.values[k]).collect(),
        z: pick(&eig.vectors),
        z0: order.iter().map(|&k| z0[k]).collect(),
        weights: order.iter().map(|&k| weights[k]).collect(),
        tau,
        out_map: pick(&out_map),
        partner: order.iter().map(|&k| eig.partner[k].map(|p| position[p])).collect(),
        residual,
    })
}

/// Evaluates `v_i(t) = sum_k [W_out Z]_ik z_k(0) exp((lambda_k - 1) t / tau)`
/// over the leading `top_k` modes (all when `None`), widened so conjugate
/// pairs stay together. Returns `d_out x times.len()`.
pub fn linear_reconstruct(decomp: &ModalDecomposition, times: &[f64], top_k: Option<usize>) -> Result<DMatrix<f64>> {
    let k_max = decomp.paired_cutoff(top_k.unwrap_or(decomp.len()));
    let d_out = decomp.out_map.nrows();
    let mut out = DMatrix::zeros(d_out, times.len());
    let one = C64::new(1.0, 0.0);
    for (j, &t) in times.iter().enumerate() {
        let growth: Vec<C64> = (0..k_max)
            .map(|k| decomp.z0[k] * ((decomp.lambda[k] - one) * (t / decomp.tau)).exp())
            .collect();
        for i in 0..d_out {
            let mut acc = C64::new(0.0, 0.0);
            let mut scale = 0.0;
            for (k, g) in growth.iter().enumerate() {
                let term = decomp.out_map[(i, k)] * g;
                acc += term;
                scale += term.norm();
            }
            if acc.im.abs() > 1e-8 * scale {
                return Err(Error::Numerical(format!(
                    "modal sum has imaginary residue {} at t = {t}",
                    acc.im
                )));
            }
            out[(i, j)] = acc.re;
        }
    }
    Ok(out)
}

/// Largest pre-activation magnitude and largest state magnitude over a
/// trajectory.
pub fn max_activity(records: &[StepRecord]) -> Result<StepActivity> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("activity needs at least one step".into()));
    }
    let max_abs = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    Ok(records.iter().fold(StepActivity::default(), |acc, r| {
        acc.merge(StepActivity {
            preactivation_max: max_abs(&r.preactivation),
            state_max: max_abs(&r.state.r),
        })
    }))
}
