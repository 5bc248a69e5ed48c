//! Data-free backdoor scanning from final-layer weights.
//!
//! A model's final linear layer is summarized by 62 per-class indicators;
//! a calibrated [`ClueProfile`] turns a subset of them into a per-class
//! anomaly score that is compared against a clean reference by cosine
//! similarity.

pub mod calibration;
pub mod detector;
pub mod error;
pub mod fsio;
pub mod indicators;
pub mod params;
pub mod selection;
pub mod stats;
pub mod synth;

pub use calibration::{build_profile, ConfigSet, LambdaFit, ScoredConfig};
pub use detector::{
    anomaly_score, cosine_similarity, detect, detect_reference_free, ClueProfile, DetectionReport,
    ReferenceFreeRow, ReportRecord,
};
pub use error::{Error, Result};
pub use indicators::{compute_indicator_matrix, IndicatorId, IndicatorMatrix, INDICATOR_COUNT};
pub use params::{load_final_layer, save_final_layer, FinalLayerParams, LayerFormat};
pub use selection::{select, SelectOptions, SelectionMethod, SelectionResult};
pub use synth::{Attack, SynthSpec};
