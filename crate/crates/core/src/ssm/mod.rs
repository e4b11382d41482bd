//! Selective state space blocks (Mamba-1 and Mamba-2) for prefill and decode.

pub mod block;
pub mod cache;
pub mod config;
pub mod io;
pub mod ops;
pub mod params;
pub mod scan;

pub use block::{block_forward, block_forward_batch, block_forward_dual, model_forward, BlockContext, ForwardHook, SequenceBatch};
pub use cache::{DecodeCache, LayerCache};
pub use config::{InputMode, ModelConfig, Variant};
pub use ops::{causal_conv1d, discretize, discretize_zoh, in_projection, rmsnorm, rmsnorm_rows, softplus_gate, Discretized, Projection, ProjectionLayout};
pub use params::{LayerParams, Model, PruningMeta};
pub use scan::{selective_scan_prefill, selective_scan_step, ssd_quadratic, QUADRATIC_GUARD};
