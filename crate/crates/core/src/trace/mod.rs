//! Recording, synthesis and offline replay of per-layer K/V streams.

mod format;
pub mod replay;
pub mod synth;

pub use format::{Trace, TraceEvent, TraceHeader, TraceSource, ATTN_SUM_TOL, TRACE_FORMAT_VERSION};
pub use replay::{replay, ReplayOptions, ReplayOutput};
pub use synth::{synthesize, Pattern, SynthParams};
