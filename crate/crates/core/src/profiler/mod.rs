//! Analytic cost model, latency benchmark and component reports.

pub mod bench;
pub mod cost;
pub mod hwm;
pub mod report;

pub use bench::{benchmark, synthetic_batch, BenchRun, LatencyStats, Protocol};
pub use cost::{estimate_flops, estimate_memory, model_dims, CostEstimate, CostModel, FlopConvention, LayerDims, StateBlock};
pub use report::{profile_report, state_space_ratio, ProfileReport, ProfileRequest, ProfileRow, RatioCheck};
