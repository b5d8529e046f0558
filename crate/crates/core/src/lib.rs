//! Energy-field analysis of softmax attention heads.
//!
//! A head's logits `Z = scale * Q K^T` are centered row by row over the causal
//! prefix to give the energy field `E`. Everything else builds on that field:
//! its flattened read-out and autocovariance, its singular channels, wavelet
//! energy distribution, key-side incoherence, and low-rank fidelity.

pub mod energy;
pub mod error;
pub mod fidelity;
pub mod geometry;
pub mod linalg;
pub mod numeric;
pub mod plotdata;
pub mod report;
pub mod serde_ext;
pub mod spectral;
pub mod synth;
pub mod tensor_io;

pub use energy::{
    causal_energy, clr_residual, flatten, flattened_len, logits, row_centered, softmax, CausalEnergyField,
    FlattenedSignal, LogitMatrix, RowCenteredLogit,
};
pub use error::{Error, Result};
pub use fidelity::{fidelity_table, Domain, FidelityCurve, FidelityMethod, FidelityTable};
pub use geometry::{
    delocalization_check, ipr, key_incoherence, monitor_mu_k, DelocalizationReport, KeyGeometry, KeyNormRecord,
    MuKAlert,
};
pub use report::{
    analyze_head, analyze_heads, analyze_manifest, exit_code, AggregateReport, CheckName, CheckStatus, HeadReport,
    OutputFormat, RunConfig,
};
pub use serde_ext::to_json_pretty;
pub use spectral::{bridge_check, channel_decomposition, dwt, AutocovarianceReport, ChannelDecomposition, DwtDepth};
pub use synth::{SynthKind, SynthParams, SynthSpec};
pub use tensor_io::{
    load_manifest, read_head_dump, write_head_dump, Dtype, HeadMeta, HeadTensors, Manifest, ManifestEntry,
};
