//! Channel decomposition of the row-centered logits, autocovariance of the
//! flattened signal with the within-row/cross-row split, and the periodized
//! wavelet transform.

mod autocov;
mod channels;
mod dwt;

pub use autocov::{
    abs_mass, autocovariance, autocovariance_direct, bridge_check, cumulative_bridge, global_sum_closed_form,
    within_row_autocovariance, AutocovarianceReport,
};
pub use channels::{
    channel_covariance_matrix, channel_cross_covariance, channel_decomposition, channel_decomposition_factored,
    channel_signal, ChannelDecomposition, RANK_REL_TOL,
};
pub use dwt::{dwt, resolve_depth, DwtDepth, WaveletReport, DB4_LOWPASS};
