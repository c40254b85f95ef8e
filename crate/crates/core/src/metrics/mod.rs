//! Evaluation: FLOPs accounting, similarity/attention correlation,
//! attention mass lost and per-layer aggregation.

pub mod aggregate;
pub mod correlation;
pub mod flops;
pub mod mass;

pub use aggregate::{aggregate, LayerSummary, Summary};
pub use correlation::{correlation, pearson, spearman, CorrelationEntry, CorrelationReport};
pub use flops::{FlopsLedger, FlopsModel};
pub use mass::{attention_mass_lost, FutureMass, MassLost};
