//! Retrieval evaluation: feature extraction, ranking metrics, protocols and
//! activation-map export.

pub mod features;
pub mod maps;
pub mod metrics;
pub mod protocol;

pub use features::{extract_features, l2_normalize_rows, raw_features};
pub use maps::export_activation_maps;
pub use metrics::{average_precision, rank_and_score, rank_gallery, EvalReport, Labels, Protocol};
pub use protocol::{evaluate_fixed, vehicleid_on_features, vehicleid_protocol, DEFAULT_REPEATS};
