//! Metrics, stream fusion, participant bootstrap and rank-based significance
//! testing.

mod bootstrap;
mod metrics;
mod stats;

pub use bootstrap::*;
pub use metrics::*;
pub use stats::*;
