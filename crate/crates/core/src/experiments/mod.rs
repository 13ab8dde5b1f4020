//! Synthetic data, hyperparameter search and the depth and principal-component
//! comparison protocols.

mod protocols;
mod sweep;
mod synth;

pub use protocols::{
    compare_depths, evaluate_windows, pca_ablation_experiment, run_once, AblationPoint, AblationSettings,
    DepthComparison, ForecastWindows,
};
pub use sweep::{
    grid_search, lin_space, log_space, normalized_scores, sweep_table_csv, CandidateScore, LayerGrid, SweepOutcome,
    SweepRow, SweepSpec,
};
pub use synth::{gen_multiscale_synthetic, Component, MaskRect, SynthSpec};
