//! Token Filtering: online skipping of redundant tokens' attention during
//! autoregressive decoding, with a toy decoder host, trace record/replay and
//! evaluation metrics.

pub mod error;
pub mod filter;
pub mod metrics;
pub mod numerics;
pub mod policy;
pub mod report;
pub mod trace;
pub mod transformer;

pub use error::{Error, Result};
pub use filter::{Decision, FilterState, SimilarityScore};
pub use policy::PruneConfig;
pub use report::StepReport;
pub use transformer::{Model, ModelConfig};
