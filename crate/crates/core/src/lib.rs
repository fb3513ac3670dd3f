//! Active pairwise annotation for video person re-identification.
//!
//! The engine alternates a model-update stage with an annotation stage.
//! Each annotation round ranks tracklet pairs by set-to-set distance, picks
//! the most match-like pairs per camera view, screens them with label
//! propagation and a reciprocal-neighbor test, asks an oracle, and merges
//! pseudo-labels under the resulting must-link / cannot-link constraints.

pub mod config;
pub mod dataset;
pub mod dbscan;
pub mod eval;
pub mod kmeans;
pub mod labels;
pub mod ledger;
pub mod metric;
pub mod model_hook;
pub mod oracle;
pub mod resample;
pub mod run;
pub mod sampler;
pub mod server;
