//! State space model inference with component profiling and activity-guided
//! state pruning.

#[cfg(feature = "openblas")]
extern crate blas_src;

pub mod activity;
pub mod component;
pub mod error;
pub mod harness;
pub mod profiler;
pub mod pruning;
pub mod scalar;
pub mod ssm;

pub use activity::{activity_scores, ActivityRecord, ActivityScores, ModeFilter};
pub use component::{Component, Mode};
pub use error::{Error, Result};
pub use pruning::{PrunedVariant, PruningPlan};
pub use scalar::{DType, Real, Scalar};
pub use ssm::{DecodeCache, ForwardHook, LayerParams, Model, ModelConfig, SequenceBatch, Variant};
