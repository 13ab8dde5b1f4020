//! Forecast error metrics, principal-component filtering and the linear
//! modal analysis of trained reservoirs.

mod eigen;
mod linear;
mod metrics;
mod pca;

pub use eigen::{eigen_decompose, reconstruction_residual, Eigen};
pub use linear::{
    assemble_effective_layer, concat_states, effective_matrix, identity_feedback, layer_readout, linear_reconstruct,
    max_activity, modal_decomposition, state_offsets, tile_self_feedback, Feedback, ModalDecomposition,
    DEFECT_TOLERANCE,
};
pub use metrics::{mean_abs_autocorr, mean_sem, rmse_curve, rmse_map, rmse_upto, Autocorrelation, ErrorCurve};
pub use pca::{fit_pca, remove_top_pcs, total_variance, PcaProjection};
