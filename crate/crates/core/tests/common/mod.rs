//! Invariant checks shared by the property-test target and the acceptance
//! target. Each check panics on the first counterexample.

#![allow(dead_code)]

use std::fmt::Debug;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xsrc::analysis::*;
use xsrc::experiments::*;
use xsrc::field::*;
use xsrc::hierarchy::*;
use xsrc::layer::*;
use xsrc::reservoir::*;
use xsrc::rng::reservoir_seed;

/// Runs a property over `cases` deterministic samples.
pub fn check<S>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>)
where
    S: Strategy,
    S::Value: Debug,
{
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    if let Err(e) = runner.run(&strategy, test) {
        panic!("{e}");
    }
}

pub fn series(n_time: usize, rows: usize, cols: usize, values: Vec<f64>, mask: Vec<bool>) -> GridSeries {
    GridSeries::new(n_time, rows, cols, values, mask, GridMeta::default()).unwrap()
}

fn mask_with_one_valid(n: usize) -> impl Strategy<Value = Vec<bool>> {
    (prop::collection::vec(any::<bool>(), n), 0..n).prop_map(|(mut m, k)| {
        m[k] = true;
        m
    })
}

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

// ---------------------------------------------------------------- field

pub fn fgrid_round_trip() {
    let strat = (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(t, r, c)| {
        (
            Just((t, r, c)),
            prop::collection::vec(-1e6f32..1e6, t * r * c),
            prop::collection::vec(-1e9f64..1e9, t * r * c),
            mask_with_one_valid(r * c),
            (0.01f64..10.0, -90f64..90.0, -180f64..180.0, 0.1f64..5.0),
        )
    });
    check(128, strat, |((t, r, c), v32, v64, mask, (dt, lat, lon, deg))| {
        let meta = GridMeta {
            dt,
            origin_lat: lat,
            origin_lon: lon,
            cell_deg: deg,
        };
        // values representable in the file's f32 payload survive bit-exactly
        let exact = GridSeries::new(t, r, c, v32.iter().map(|&v| v as f64).collect(), mask.clone(), meta).unwrap();
        prop_assert_eq!(read_grid_series(&write_grid_series(&exact)).unwrap(), exact);
        // arbitrary f64 values: one write fixes the file image
        let any = GridSeries::new(t, r, c, v64, mask, meta).unwrap();
        let bytes = write_grid_series(&any);
        prop_assert_eq!(write_grid_series(&read_grid_series(&bytes).unwrap()), bytes);
        Ok(())
    });
}

pub fn coarse_grain_composes() {
    let strat = (1usize..4, 1usize..4, 1usize..3, 1usize..3, 1usize..3).prop_flat_map(|(f, g, a, b, t)| {
        let (rows, cols) = (f * g * a, f * g * b);
        (Just((f, g, rows, cols, t)), prop::collection::vec(-10.0f64..10.0, t * rows * cols))
    });
    check(128, strat, |((f, g, rows, cols, t), values)| {
        let x = series(t, rows, cols, values, vec![true; rows * cols]);
        let two = coarse_grain(&coarse_grain(&x, f).unwrap(), g).unwrap();
        let one = coarse_grain(&x, f * g).unwrap();
        prop_assert_eq!((two.n_rows(), two.n_cols()), (one.n_rows(), one.n_cols()));
        for (p, q) in two.values().iter().zip(one.values()) {
            prop_assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()), "{} vs {}", p, q);
        }
        Ok(())
    });
}

fn boundary() -> impl Strategy<Value = Boundary> {
    prop_oneof![Just(Boundary::Clamp), Just(Boundary::Periodic)]
}

pub fn tiling_gather_scatter_and_determinism() {
    let strat = (1usize..4, 1usize..4, 1usize..4, 1usize..4, 0usize..4, boundary(), boundary()).prop_flat_map(
        |(tr, tc, kr, kc, overlap, br, bc)| {
            let (rows, cols) = (tr * kr, tc * kc);
            (
                Just((tr, tc, rows, cols, overlap, br, bc)),
                mask_with_one_valid(rows * cols),
                prop::collection::vec(-5.0f64..5.0, rows * cols),
            )
        },
    );
    check(256, strat, |((tr, tc, rows, cols, overlap, br, bc), mask, frame)| {
        let tiling = make_tiling(rows, cols, tr, tc, overlap, br, bc, &mask).unwrap();
        prop_assert_eq!(&make_tiling(rows, cols, tr, tc, overlap, br, bc, &mask).unwrap(), &tiling);
        let mut owners = vec![0usize; rows * cols];
        for tile in &tiling.tiles {
            for c in &tile.center_cells {
                owners[*c] += 1;
                prop_assert!(tile.input_cells.contains(c));
            }
            prop_assert!(tile.input_cells.iter().all(|&c| mask[c]));
        }
        for (cell, &n) in owners.iter().enumerate() {
            prop_assert_eq!(n, usize::from(mask[cell]));
        }
        let gathered: Vec<Vec<f64>> = tiling
            .tiles
            .iter()
            .map(|t| t.center_cells.iter().map(|&c| frame[c]).collect())
            .collect();
        let back = scatter_tile_outputs(&gathered, &tiling).unwrap();
        for cell in 0..rows * cols {
            if mask[cell] {
                prop_assert_eq!(back[cell], frame[cell]);
            }
        }
        for tile in tiling.active_tiles() {
            let input = extract_tile_input(&frame, &tiling, tile.tile_index).unwrap();
            let expect: Vec<f64> = tile.input_cells.iter().map(|&c| frame[c]).collect();
            prop_assert_eq!(input, expect);
        }
        Ok(())
    });
}

// ---------------------------------------------------------------- reservoir

fn small_hyper(d_r: usize, g: f64, tau: f64, dt: f64) -> ReservoirHyperparams {
    ReservoirHyperparams {
        d_r,
        g,
        density: 0.3,
        g_in: 0.5,
        g_l: 0.5,
        tau,
        dt_step: dt,
        noise_std: 0.0,
        beta: 1e-6,
        washout: 10,
    }
}

pub fn state_boundedness() {
    let strat = (2usize..40, 0.0f64..3.0, 0.5f64..10.0, 0.05f64..1.0, 1usize..6, any::<u64>()).prop_flat_map(
        |(d_r, g, tau, frac, d_in, seed)| {
            (
                Just((d_r, g, tau, tau * frac, d_in, seed)),
                prop::collection::vec(-2.0f64..2.0, d_r),
                prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d_in), 1..60),
            )
        },
    );
    check(128, strat, |((d_r, g, tau, dt, d_in, seed), r0, inputs)| {
        let res = init_reservoir(small_hyper(d_r, g, tau, dt), d_in, 0, 1, seed).unwrap();
        let bound: Vec<f64> = r0.iter().map(|v| v.abs().max(1.0)).collect();
        let states = res
            .drive(&inputs, &ReservoirState { r: r0 }, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        for s in &states {
            for (v, b) in s.r.iter().zip(&bound) {
                prop_assert!(v.abs() <= *b + 1e-12, "{} exceeds {}", v, b);
            }
        }
        Ok(())
    });
}

fn ridge_objective(w: &DMatrix<f64>, s: &DMatrix<f64>, v: &DMatrix<f64>, beta: f64) -> f64 {
    (v - w * s).norm_squared() + beta * w.norm_squared()
}

pub fn ridge_optimality() {
    let strat = (2usize..10, 1usize..4, 5usize..40, 1e-6f64..1.0, any::<u64>());
    check(64, strat, |(d_r, d_out, n, beta, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = DMatrix::from_fn(d_r, n, |_, _| rng.random_range(-1.0..1.0));
        let v = DMatrix::from_fn(d_out, n, |_, _| rng.random_range(-1.0..1.0));
        let w = train_readout(&s, &v, beta).unwrap();
        let base = ridge_objective(&w, &s, &v, beta);
        for i in 0..d_out {
            for j in 0..d_r {
                for delta in [1e-3, -1e-3] {
                    let mut p = w.clone();
                    p[(i, j)] += delta;
                    prop_assert!(ridge_objective(&p, &s, &v, beta) >= base * (1.0 - 1e-12));
                }
            }
        }
        Ok(())
    });
}

pub fn reservoir_reconstructible() {
    let strat = (1usize..30, 1usize..5, 0usize..4, 1usize..4, any::<u64>());
    check(64, strat, |(d_r, d_local, d_parent, d_out, seed)| {
        let h = small_hyper(d_r, 0.9, 2.0, 1.0);
        let a = init_reservoir(h, d_local, d_parent, d_out, seed).unwrap();
        let b = init_reservoir(h, d_local, d_parent, d_out, seed).unwrap();
        prop_assert_eq!(a.w().to_dense(), b.w().to_dense());
        prop_assert_eq!(a.w_in(), b.w_in());
        Ok(())
    });
}

/// Two drives from different initial states under the same inputs meet
/// within the washout window.
pub fn echo_state_contraction(hyper: ReservoirHyperparams, d_in: usize, input_scale: f64) {
    check(8, any::<u64>(), |seed| {
        let res = init_reservoir(hyper, d_in, 0, 1, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let inputs: Vec<Vec<f64>> = (0..hyper.washout)
            .map(|_| (0..d_in).map(|_| input_scale * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let a = ReservoirState {
            r: (0..hyper.d_r).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let b = ReservoirState {
            r: (0..hyper.d_r).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let mut noise = ChaCha8Rng::seed_from_u64(0);
        let ra = res.drive(&inputs, &a, 0.0, &mut noise).unwrap();
        let rb = res.drive(&inputs, &b, 0.0, &mut noise).unwrap();
        let gap = ra
            .last()
            .unwrap()
            .r
            .iter()
            .zip(&rb.last().unwrap().r)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        prop_assert!(gap < 1e-6, "states still {} apart after {} steps", gap, hyper.washout);
        Ok(())
    });
}

// ---------------------------------------------------------------- layer / hierarchy

/// Two-layer model on a 12x12 grid (6x6 parent) shared by several checks.
pub struct SmallModel {
    pub config: ModelConfig,
    pub data: GridSeries,
    pub model: HierarchyModel,
}

pub fn small_model() -> &'static SmallModel {
    static MODEL: OnceLock<SmallModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let spec = SynthSpec {
            n_rows: 12,
            n_cols: 12,
            n_time: 500,
            seed: 4,
            components: vec![
                Component::GlobalOscillation {
                    amplitude: 1.0,
                    period: 40.0,
                },
                Component::TravelingWave {
                    amplitude: 0.3,
                    wavelength: 12.0,
                    speed: 0.5,
                },
                Component::LocalChaos { amplitude: 0.2, mu: 3.8 },
            ],
            mask: vec![MaskRect {
                row0: 0,
                col0: 0,
                rows: 2,
                cols: 2,
            }],
        };
        let data = gen_multiscale_synthetic(&spec).unwrap();
        let hyper = |d_r| ReservoirHyperparams {
            d_r,
            density: 0.2,
            washout: 30,
            ..ReservoirHyperparams::default()
        };
        let config = ModelConfig {
            n_layers: 2,
            refine_factors: vec![2],
            master_seed: 11,
            parent_timing: ParentTiming::SameStep,
            parent_training: ParentTraining::Truth,
            layers: vec![
                LayerConfig {
                    tiling: TilingParams::new(3, 3),
                    hyper: hyper(30),
                },
                LayerConfig {
                    tiling: TilingParams::new(3, 3),
                    hyper: hyper(25),
                },
            ],
        };
        let model = train_hierarchy(&config, &data.slice_time(0, 350).unwrap()).unwrap();
        SmallModel { config, data, model }
    })
}

fn random_frame(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn random_states(rng: &mut ChaCha8Rng, layer: &Layer) -> Vec<ReservoirState> {
    layer
        .units
        .iter()
        .map(|u| ReservoirState {
            r: (0..u.reservoir.d_r()).map(|_| rng.random_range(-0.5..0.5)).collect(),
        })
        .collect()
}

/// Changing a cell a unit does not read leaves its next state and output
/// untouched.
pub fn locality() {
    let m = small_model();
    let fine = &m.model.layers[1];
    let parent = &m.model.layers[0];
    let strat = (0..fine.units.len(), any::<u64>());
    check(64, strat, |(i, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let own = random_frame(&mut rng, fine.n_cells());
        let par = random_frame(&mut rng, parent.n_cells());
        let states = random_states(&mut rng, fine);
        let base = unit_forecast_step(fine, i, &states[i], &own, Some(&par)).unwrap();
        let tile = &fine.tiling.tiles[fine.units[i].tile_index];
        let route = &fine.units[i].route.as_ref().unwrap().parent_cell_indices;
        let outside: Vec<usize> = (0..fine.n_cells()).filter(|c| !tile.input_cells.contains(c)).collect();
        let outside_parent: Vec<usize> = (0..parent.n_cells()).filter(|c| !route.contains(c)).collect();
        prop_assume!(!outside.is_empty() && !outside_parent.is_empty());
        let mut own2 = own.clone();
        own2[outside[rng.random_range(0..outside.len())]] += 3.0;
        let mut par2 = par.clone();
        par2[outside_parent[rng.random_range(0..outside_parent.len())]] -= 3.0;
        let moved = unit_forecast_step(fine, i, &states[i], &own2, Some(&par2)).unwrap();
        prop_assert_eq!(&moved.0.r, &base.0.r);
        prop_assert_eq!(&moved.1, &base.1);
        // and a cell it does read does matter
        let mut own3 = own.clone();
        own3[tile.input_cells[0]] += 3.0;
        let touched = unit_forecast_step(fine, i, &states[i], &own3, Some(&par)).unwrap();
        prop_assert_ne!(&touched.0.r, &base.0.r);
        Ok(())
    });
}

/// Evaluating units in any order and scattering gives the layer step.
pub fn synchronicity() {
    let m = small_model();
    let fine = &m.model.layers[1];
    let parent = &m.model.layers[0];
    let n = fine.units.len();
    let strat = (Just((0..n).collect::<Vec<usize>>()).prop_shuffle(), any::<u64>());
    check(64, strat, |(order, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let own = random_frame(&mut rng, fine.n_cells());
        let par = random_frame(&mut rng, parent.n_cells());
        let states = random_states(&mut rng, fine);
        let (frame, next) = layer_forecast_step(fine, &states, &own, Some(&par)).unwrap();
        let mut outputs = vec![Vec::new(); fine.tiling.n_tiles()];
        let mut next_perm = vec![None; n];
        for &i in &order {
            let (s, out, _) = unit_forecast_step(fine, i, &states[i], &own, Some(&par)).unwrap();
            outputs[fine.units[i].tile_index] = out;
            next_perm[i] = Some(s);
        }
        prop_assert_eq!(scatter_tile_outputs(&outputs, &fine.tiling).unwrap(), frame);
        for (a, b) in next.iter().zip(next_perm) {
            prop_assert_eq!(&a.r, &b.unwrap().r);
        }
        Ok(())
    });
}

/// Routed parent cells lie in the owning parent tile and never have their
/// whole footprint inside the child tile.
pub fn parent_exclusion() {
    fn divisors(n: usize) -> Vec<usize> {
        (1..=n).filter(|d| n % d == 0).collect()
    }
    let strat = (1usize..4, 1usize..4, 1usize..4, 1usize..3, 1usize..3, 0usize..3).prop_flat_map(
        |(pt_r, pt_c, f, kr, kc, overlap)| {
            let dr = divisors(f * pt_r);
            let dc = divisors(f * pt_c);
            (
                Just((pt_r, pt_c, f, kr, kc, overlap)),
                prop::sample::select(dr),
                prop::sample::select(dc),
            )
        },
    );
    check(256, strat, |((pt_r, pt_c, f, kr, kc, overlap), ct_r, ct_c)| {
        let (pr, pc) = (pt_r * kr, pt_c * kc);
        let (cr, cc) = (pr * f, pc * f);
        let parent = make_tiling(pr, pc, pt_r, pt_c, overlap, Boundary::Clamp, Boundary::Periodic, &vec![true; pr * pc]).unwrap();
        let child = make_tiling(cr, cc, ct_r, ct_c, overlap, Boundary::Clamp, Boundary::Periodic, &vec![true; cr * cc]).unwrap();
        for tile in &child.tiles {
            let route = parent_route(&child, tile.tile_index, &parent, f).unwrap();
            let (r0, c0, nr, nc) = child.center_rect(tile.tile_index);
            for &p in &route.parent_cell_indices {
                prop_assert!(parent.tiles[route.parent_tile_index].center_cells.contains(&p));
                let (fr, fc) = ((p / pc) * f, (p % pc) * f);
                let inside = fr >= r0 && fr + f <= r0 + nr && fc >= c0 && fc + f <= c0 + nc;
                prop_assert!(!inside, "parent cell {} is covered by child tile {}", p, tile.tile_index);
            }
            // every excluded cell of the parent tile is covered
            let excluded = parent.tiles[route.parent_tile_index]
                .center_cells
                .iter()
                .filter(|c| !route.parent_cell_indices.contains(c));
            for &p in excluded {
                let (fr, fc) = ((p / pc) * f, (p % pc) * f);
                prop_assert!(fr >= r0 && fr + f <= r0 + nr && fc >= c0 && fc + f <= c0 + nc);
            }
        }
        Ok(())
    });
}

/// Forecasts read nothing past the warmup: perturbing later frames, including
/// the first one after the warmup, changes nothing.
pub fn causality() {
    let m = small_model();
    let test = m.data.slice_time(350, 500).unwrap();
    let strat = (30usize..60, 1usize..40, 0usize..5, any::<u64>());
    check(16, strat, |(warm, horizon, first_offset, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = test.n_cells();
        let mut values = test.values().to_vec();
        let start = warm + first_offset.min(test.n_time() - warm - 1);
        for v in &mut values[start * n..] {
            *v += rng.random_range(-2.0..2.0);
        }
        let perturbed = test.with_values(test.n_time(), values).unwrap();
        let a = forecast(&m.model, &test.slice_time(0, warm).unwrap(), horizon).unwrap();
        let b = forecast(&m.model, &perturbed.slice_time(0, warm).unwrap(), horizon).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            prop_assert_eq!(&la.frames, &lb.frames);
        }
        Ok(())
    });
}

pub fn training_reproducible() {
    let m = small_model();
    let again = train_hierarchy(&m.config, &m.data.slice_time(0, 350).unwrap()).unwrap();
    assert_eq!(write_model(&again).unwrap(), write_model(&m.model).unwrap());
    let other = ModelConfig {
        master_seed: m.config.master_seed + 1,
        ..m.config.clone()
    };
    let different = train_hierarchy(&other, &m.data.slice_time(0, 350).unwrap()).unwrap();
    assert_ne!(write_model(&different).unwrap(), write_model(&m.model).unwrap());
}

/// Single reservoir pipeline built by hand: drive, fit, synchronize, run.
pub fn single_reservoir_forecast(
    hyper: ReservoirHyperparams,
    seed: u64,
    train: &GridSeries,
    warmup: &GridSeries,
    horizon: usize,
) -> Vec<Vec<f64>> {
    let n = train.n_cells();
    let mut res = init_reservoir(hyper, n, 0, n, seed).unwrap();
    let inputs: Vec<Vec<f64>> = (0..train.n_time() - 1).map(|t| train.frame(t).to_vec()).collect();
    let visited = res
        .drive(&inputs, &ReservoirState::zeros(hyper.d_r), 0.0, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let k = visited.len() - hyper.washout;
    let states = DMatrix::from_fn(hyper.d_r, k, |i, j| visited[hyper.washout + j].r[i]);
    let targets = DMatrix::from_fn(n, k, |i, j| train.frame(hyper.washout + j + 1)[i]);
    let beta = res.absolute_beta(&states);
    res.set_readout(train_readout(&states, &targets, beta).unwrap()).unwrap();
    let mut r = ReservoirState::zeros(hyper.d_r);
    for frame in warmup.frames() {
        r = res.step(&r, frame).unwrap();
    }
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let y = res.readout(&r).unwrap();
        r = res.step(&r, &y).unwrap();
        out.push(y);
    }
    out
}

/// A one-layer, one-tile model without overlap is the single reservoir
/// pipeline.
pub fn single_tile_reduction() {
    let data = gen_multiscale_synthetic(&SynthSpec {
        n_rows: 4,
        n_cols: 6,
        n_time: 400,
        seed: 9,
        components: vec![
            Component::GlobalOscillation {
                amplitude: 1.0,
                period: 30.0,
            },
            Component::LocalChaos { amplitude: 0.3, mu: 3.9 },
        ],
        mask: vec![],
    })
    .unwrap();
    let hyper = ReservoirHyperparams {
        d_r: 40,
        density: 0.2,
        washout: 20,
        ..ReservoirHyperparams::default()
    };
    let mut tiling = TilingParams::new(4, 6);
    tiling.overlap = 0;
    let config = ModelConfig {
        n_layers: 1,
        refine_factors: vec![],
        master_seed: 5,
        parent_timing: ParentTiming::SameStep,
        parent_training: ParentTraining::Truth,
        layers: vec![LayerConfig { tiling, hyper }],
    };
    let train = data.slice_time(0, 300).unwrap();
    let warm = data.slice_time(300, 340).unwrap();
    let model = train_hierarchy(&config, &train).unwrap();
    let got = forecast(&model, &warm, 50).unwrap();
    let want = single_reservoir_forecast(hyper, reservoir_seed(5, 1, 0), &train, &warm, 50);
    for (a, b) in got.finest().frames.iter().zip(&want) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}

// ---------------------------------------------------------------- analysis

pub fn rmse_identities() {
    let strat = (1usize..6, 1usize..5, 1usize..5).prop_flat_map(|(t, r, c)| {
        (
            Just((t, r, c)),
            prop::collection::vec(-3.0f64..3.0, t * r * c),
            prop::collection::vec(-3.0f64..3.0, t * r * c),
            mask_with_one_valid(r * c),
            Just((0..r * c).collect::<Vec<usize>>()).prop_shuffle(),
            1..=t,
        )
    });
    check(256, strat, |((t, r, c), f, y, mask, perm, h)| {
        let fs = series(t, r, c, f.clone(), mask.clone());
        let ys = series(t, r, c, y.clone(), mask.clone());
        let total = rmse_upto(&fs, &ys, h).unwrap();
        let map = rmse_map(&fs, &ys, h).unwrap();
        let valid = fs.valid_cells();
        let mean_sq = valid.iter().map(|&i| map.values()[i].powi(2)).sum::<f64>() / valid.len() as f64;
        prop_assert!(rel_diff(mean_sq, total * total) <= 1e-12 || (mean_sq - total * total).abs() < 1e-15);
        // relabel cells by one permutation applied to everything
        let n = r * c;
        let relabel = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; v.len()];
            for k in 0..t {
                for (new, &old) in perm.iter().enumerate() {
                    out[k * n + new] = v[k * n + old];
                }
            }
            out
        };
        let pmask: Vec<bool> = perm.iter().map(|&old| mask[old]).collect();
        let fp = series(t, r, c, relabel(&f), pmask.clone());
        let yp = series(t, r, c, relabel(&y), pmask);
        let relabeled = rmse_upto(&fp, &yp, h).unwrap();
        prop_assert!(rel_diff(relabeled, total) <= 1e-12 || (relabeled - total).abs() < 1e-15);
        let pmap = rmse_map(&fp, &yp, h).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            prop_assert!((pmap.values()[new] - map.values()[old]).abs() <= 1e-12);
        }
        Ok(())
    });
}

pub fn pca_idempotence() {
    let strat = (4usize..30, 2usize..10).prop_flat_map(|(t, cells)| {
        (
            Just((t, cells)),
            1..t.min(cells),
            prop::collection::vec(-5.0f64..5.0, t * cells),
        )
    });
    check(128, strat, |((t, cells), p, values)| {
        let x = series(t, 1, cells, values, vec![true; cells]);
        prop_assert_eq!(remove_top_pcs(&x, 0).unwrap(), x.clone());
        let proj = fit_pca(&x, p).unwrap();
        let once = proj.remove(&x).unwrap();
        let twice = proj.remove(&once).unwrap();
        for (a, b) in once.values().iter().zip(twice.values()) {
            prop_assert!((a - b).abs() <= 1e-10, "{} vs {}", a, b);
        }
        Ok(())
    });
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Eigenvalues come in exact conjugate pairs, match the power traces of the
/// matrix, and the summed modal output is real.
pub fn conjugate_symmetry() {
    let strat = (1usize..24, 1usize..4, 0.5f64..10.0, any::<u64>());
    check(128, strat, |(n, d_out, tau, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_matrix(&mut rng, n, n);
        let w_out = random_matrix(&mut rng, d_out, n);
        let r0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let md = match modal_decomposition(&w, &w_out, &r0, tau) {
            Ok(md) => md,
            Err(xsrc::Error::NearDefective(_)) => return Err(TestCaseError::reject("near-defective draw")),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        for k in 0..md.len() {
            match md.partner[k] {
                Some(p) => {
                    prop_assert_eq!(md.lambda[p], md.lambda[k].conj());
                    prop_assert_eq!(md.weights[p], md.weights[k].conj());
                }
                None => prop_assert_eq!(md.lambda[k].im, 0.0),
            }
        }
        let trace: f64 = w.trace();
        let trace_sq: f64 = (&w * &w).trace();
        let s1: nalgebra::Complex<f64> = md.lambda.iter().sum();
        let s2: nalgebra::Complex<f64> = md.lambda.iter().map(|l| l * l).sum();
        let scale = 1.0 + w.norm_squared();
        prop_assert!((s1.re - trace).abs() <= 1e-9 * scale && s1.im.abs() <= 1e-9 * scale);
        prop_assert!((s2.re - trace_sq).abs() <= 1e-9 * scale && s2.im.abs() <= 1e-9 * scale);
        for t in [0.0, 0.7, 3.0, 10.0] {
            let terms: Vec<_> = (0..md.len()).map(|k| md.mode_contribution(k, t)).collect();
            let sum: nalgebra::Complex<f64> = terms.iter().sum();
            let size: f64 = terms.iter().map(|z| z.norm()).sum();
            prop_assert!(sum.im.abs() <= 1e-8 * size.max(f64::MIN_POSITIVE), "Im {} of {}", sum.im, size);
        }
        Ok(())
    });
}

/// Small-signal linear validity: with trajectory pre-activations at most
/// 0.3, the all-mode reconstruction stays within 5% (relative L2) of the
/// trained model's autonomous output over 50 steps.
pub fn linear_validity() -> (f64, f64) {
    let data = gen_multiscale_synthetic(&SynthSpec {
        n_rows: 12,
        n_cols: 24,
        n_time: 1800,
        seed: 21,
        components: vec![
            Component::GlobalOscillation {
                amplitude: 1.0,
                period: 120.0,
            },
            Component::LocalChaos { amplitude: 0.2, mu: 4.0 },
        ],
        mask: vec![],
    })
    .unwrap();
    let hyper = ReservoirHyperparams {
        d_r: 60,
        g: 0.5,
        density: 0.1,
        g_in: 0.003,
        tau: 6.0,
        washout: 200,
        ..ReservoirHyperparams::default()
    };
    let config = ModelConfig {
        n_layers: 1,
        refine_factors: vec![],
        master_seed: 3,
        parent_timing: ParentTiming::SameStep,
        parent_training: ParentTraining::Truth,
        layers: vec![LayerConfig {
            tiling: TilingParams::new(6, 6),
            hyper,
        }],
    };
    let model = train_hierarchy(&config, &data.slice_time(0, 1500).unwrap()).unwrap();
    let run = forecast(&model, &data.slice_time(1500, 1700).unwrap(), 50).unwrap();
    let layer = &model.layers[0];
    let activity = run.layers[0].activity.preactivation_max;
    assert!(activity <= 0.3, "precondition: pre-activation max {activity} > 0.3");
    let md = modal_decomposition(
        &assemble_effective_layer(layer, false).unwrap(),
        &layer_readout(layer).unwrap(),
        &concat_states(&run.layers[0].initial_states),
        hyper.tau,
    )
    .unwrap();
    let times: Vec<f64> = (0..50).map(|t| t as f64).collect();
    let linear = linear_reconstruct(&md, &times, None).unwrap();
    let (mut err, mut norm) = (0.0, 0.0);
    for (j, frame) in run.layers[0].frames.iter().enumerate() {
        let mut row = 0;
        for unit in &layer.units {
            for &c in &layer.tiling.tiles[unit.tile_index].center_cells {
                err += (linear[(row, j)] - frame[c]).powi(2);
                norm += frame[c].powi(2);
                row += 1;
            }
        }
    }
    let rel = (err / norm).sqrt();
    assert!(rel <= 0.05, "linear reconstruction off by {rel:.4} (activity {activity:.4})");
    (rel, activity)
}

// ---------------------------------------------------------------- experiments

fn tiny_sweep_inputs() -> (ModelConfig, GridSeries, GridSeries) {
    let m = small_model();
    let config = m.config.finest_layers(1).unwrap();
    let train = m.data.slice_time(0, 300).unwrap();
    let valid = m.data.slice_time(300, 420).unwrap();
    (config, train, valid)
}

/// The results table is a pure function of its inputs (wall time aside).
pub fn sweep_determinism() {
    let (config, train, valid) = tiny_sweep_inputs();
    let spec = SweepSpec {
        layers: vec![LayerGrid {
            g: vec![0.5, 0.9],
            noise: vec![0.0, 1e-3],
            g_in: vec![0.1],
            g_l: vec![0.1],
            tau: vec![2.0],
        }],
        horizons: vec![1, 5],
        seeds: vec![1, 2],
        windows: ForecastWindows {
            warmup: 40,
            horizon: 20,
            n_windows: 2,
            stride: 30,
        },
    };
    let strip = |o: &SweepOutcome| -> Vec<SweepRow> {
        o.rows
            .iter()
            .map(|r| SweepRow {
                wall_time_s: 0.0,
                ..r.clone()
            })
            .collect()
    };
    let a = grid_search(&spec, &train, &valid, &config).unwrap();
    let b = grid_search(&spec, &train, &valid, &config).unwrap();
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(a.candidates, b.candidates);
    assert_eq!(a.config, b.config);
    assert_eq!(a.rows.len(), 4 * 2 * 2);
}

pub fn score_scale_invariance() {
    let strat = (1usize..8, 1usize..5).prop_flat_map(|(n, h)| {
        (
            prop::collection::vec(prop::collection::vec(0.01f64..10.0, h), n),
            1e-3f64..1e3,
        )
    });
    check(256, strat, |(table, c)| {
        let scaled: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        let a = normalized_scores(&table);
        let b = normalized_scores(&scaled);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(rel_diff(*x, *y) <= 1e-12);
        }
        let best = |s: &[f64]| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&i, &j| s[i].total_cmp(&s[j]));
            idx
        };
        let (ia, ib) = (best(&a), best(&b));
        if a.len() > 1 {
            prop_assume!(a[ia[1]] - a[ia[0]] > 1e-9);
        }
        prop_assert_eq!(ia[0], ib[0]);
        Ok(())
    });
}

/// The depth-1 path through the depth comparison is the plain parallel model.
pub fn depth_one_path_is_parallel_model() {
    let m = small_model();
    let config = m.config.finest_layers(1).unwrap();
    let train = m.data.slice_time(0, 350).unwrap();
    let test = m.data.slice_time(350, 500).unwrap();
    let windows = ForecastWindows {
        warmup: 40,
        horizon: 30,
        n_windows: 3,
        stride: 25,
    };
    let horizons = [1, 10, 30];
    let seeds = [3, 4];
    let cmp = compare_depths(&config, &train, &test, &[1], &seeds, &windows, &horizons).unwrap();
    let fine = &config.layers[0];
    for (s, &seed) in seeds.iter().enumerate() {
        let mut layer = build_layer(
            1,
            train.n_rows(),
            train.n_cols(),
            train.mask(),
            &fine.tiling,
            fine.hyper,
            None,
            1,
            seed,
        )
        .unwrap();
        train_layer(&mut layer, &train, None).unwrap();
        let mut sums = vec![0.0; horizons.len()];
        for w in 0..windows.n_windows {
            let start = w * windows.stride;
            let warm = test.slice_time(start, start + windows.warmup).unwrap();
            let truth = test
                .slice_time(start + windows.warmup, start + windows.warmup + windows.horizon)
                .unwrap();
            let frames = parallel_forecast(&layer, &warm, windows.horizon).unwrap();
            let fc = GridSeries::from_frames(test.n_rows(), test.n_cols(), &frames, test.mask().to_vec(), test.meta).unwrap();
            for (acc, v) in sums.iter_mut().zip(rmse_curve(&fc, &truth, &horizons).unwrap()) {
                *acc += v / windows.n_windows as f64;
            }
        }
        for (a, b) in sums.iter().zip(&cmp.curves[0].runs[s]) {
            assert!((a - b).abs() <= 1e-12, "seed {seed}: {a} vs {b}");
        }
    }
}

/// On AR(1) cells, the sweep's choice of time constant is the one with the
/// lowest one-step error when every candidate is trained and scored alone.
pub fn planted_optimum() -> (f64, f64) {
    let (rows, cols, n_time) = (4, 4, 900);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let normal = rand_distr::Normal::new(0.0, 0.3).unwrap();
    let mut values = vec![0.0; n_time * rows * cols];
    for t in 1..n_time {
        for c in 0..rows * cols {
            let prev = values[(t - 1) * rows * cols + c];
            values[t * rows * cols + c] = 0.9 * prev + rand_distr::Distribution::sample(&normal, &mut rng);
        }
    }
    let data = GridSeries::from_values(n_time, rows, cols, values).unwrap();
    let train = data.slice_time(0, 600).unwrap();
    let valid = data.slice_time(600, 900).unwrap();
    let taus = vec![1.0, 1.5, 3.0, 8.0, 20.0];
    let hyper = ReservoirHyperparams {
        d_r: 40,
        density: 0.2,
        washout: 50,
        ..ReservoirHyperparams::default()
    };
    let template = ModelConfig {
        n_layers: 1,
        refine_factors: vec![],
        master_seed: 0,
        parent_timing: ParentTiming::SameStep,
        parent_training: ParentTraining::Truth,
        layers: vec![LayerConfig {
            tiling: TilingParams::new(2, 2),
            hyper,
        }],
    };
    let windows = ForecastWindows {
        warmup: 60,
        horizon: 1,
        n_windows: 20,
        stride: 12,
    };
    let seeds = vec![1, 2];
    let spec = SweepSpec {
        layers: vec![LayerGrid {
            g: vec![hyper.g],
            noise: vec![0.0],
            g_in: vec![hyper.g_in],
            g_l: vec![hyper.g_l],
            tau: taus.clone(),
        }],
        horizons: vec![1],
        seeds: seeds.clone(),
        windows,
    };
    let chosen = grid_search(&spec, &train, &valid, &template).unwrap().config.layers[0].hyper.tau;
    // oracle: one-step RMSE of each candidate, computed directly
    let mut best = (f64::INFINITY, 0.0);
    for &tau in &taus {
        let mut total = 0.0;
        for &seed in &seeds {
            let mut layer_hyper = hyper;
            layer_hyper.tau = tau;
            let mut layer = build_layer(1, rows, cols, train.mask(), &template.layers[0].tiling, layer_hyper, None, 1, seed).unwrap();
            train_layer(&mut layer, &train, None).unwrap();
            // per-window one-step RMSE, averaged over windows
            for w in 0..windows.n_windows {
                let start = w * windows.stride;
                let warm = valid.slice_time(start, start + windows.warmup).unwrap();
                let pred = parallel_forecast(&layer, &warm, 1).unwrap();
                let truth = valid.frame(start + windows.warmup);
                let se: f64 = pred[0].iter().zip(truth).map(|(p, y)| (p - y).powi(2)).sum();
                total += (se / truth.len() as f64).sqrt() / windows.n_windows as f64;
            }
        }
        let mean = total / seeds.len() as f64;
        if mean < best.0 {
            best = (mean, tau);
        }
    }
    assert_eq!(chosen, best.1, "sweep chose tau {chosen}, exhaustive optimum is {}", best.1);
    (chosen, best.1)
}

// ---------------------------------------------------------------- desk-scale setup

/// Planted multiscale field: a slow uniform sinusoid (period 360 frames), a
/// traveling wave and per-cell logistic chaos on a 36x72 grid.
pub fn planted_spec(n_time: usize) -> SynthSpec {
    SynthSpec {
        n_rows: 36,
        n_cols: 72,
        n_time,
        seed: 1,
        components: vec![
            Component::GlobalOscillation {
                amplitude: 1.0,
                period: 360.0,
            },
            Component::TravelingWave {
                amplitude: 0.3,
                wavelength: 72.0,
                speed: 1.2,
            },
            Component::LocalChaos { amplitude: 0.5, mu: 4.0 },
        ],
        mask: vec![],
    }
}

/// Three layers (4x8, 12x24, 36x72) with the hyperparameters selected by the
/// grid search on the planted field.
pub fn tuned_config() -> ModelConfig {
    let layer = |d_r, g, g_in, g_l, tau| LayerConfig {
        tiling: TilingParams::new(4, 4),
        hyper: ReservoirHyperparams {
            d_r,
            g,
            density: 0.05,
            g_in,
            g_l,
            tau,
            dt_step: 1.0,
            noise_std: 0.0,
            beta: 1e-6,
            washout: 300,
        },
    };
    ModelConfig {
        n_layers: 3,
        refine_factors: vec![3, 3],
        master_seed: 0,
        parent_timing: ParentTiming::SameStep,
        parent_training: ParentTraining::Truth,
        layers: vec![
            layer(200, 0.5, 0.001, 0.1, 6.0),
            layer(100, 0.5, 0.003, 0.03, 2.0),
            layer(100, 0.5, 0.003, 0.03, 2.0),
        ],
    }
}

/// Echo-state contraction of the tuned reservoirs: driven by the planted
/// field's own inputs from two random initial states, sampled units of every
/// layer forget the difference within the washout.
pub fn tuned_contraction() -> Vec<f64> {
    let config = tuned_config();
    let washout = config.max_washout();
    let data = gen_multiscale_synthetic(&planted_spec(washout)).unwrap();
    let chain = coarse_chain(&config, &data).unwrap();
    let grids = config.layer_grids(data.n_rows(), data.n_cols()).unwrap();
    let masks: Vec<Vec<bool>> = chain.iter().map(|s| s.mask().to_vec()).collect();
    let layers = build_hierarchy(&config, &masks, &grids).unwrap();
    let mut worst = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let mut gap_max: f64 = 0.0;
        let n = layer.units.len();
        for i in [0, n / 3, n / 2, n - 1] {
            let res = &layer.units[i].reservoir;
            let inputs: Vec<Vec<f64>> = (0..washout)
                .map(|t| {
                    let parent = (l > 0).then(|| chain[l - 1].frame(t));
                    assemble_input(layer, i, chain[l].frame(t), parent).unwrap()
                })
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            let mut start = || ReservoirState {
                r: (0..res.d_r()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let (a, b) = (start(), start());
            let mut noise = ChaCha8Rng::seed_from_u64(0);
            let ra = res.drive(&inputs, &a, 0.0, &mut noise).unwrap();
            let rb = res.drive(&inputs, &b, 0.0, &mut noise).unwrap();
            let gap = ra[washout - 1]
                .r
                .iter()
                .zip(&rb[washout - 1].r)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(gap < 1e-6, "layer {} unit {i}: states {gap:.3e} apart after {washout} steps", l + 1);
            gap_max = gap_max.max(gap);
        }
        worst.push(gap_max);
    }
    worst
}
