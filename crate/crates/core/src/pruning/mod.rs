//! Activity-guided state pruning.
//!
//! Each layer keeps its `floor(N (1 - r))` most active states. The result can
//! be applied three ways: zeroed in place (sparse), removed with an explicit
//! scatter back to full width (bridged), or removed with that scatter folded
//! into the read-out projection (optimized). Because the scatter is a fixed
//! selection matrix, all three compute the same function.

pub mod plan;
pub mod select;
pub mod surgery;

pub use plan::{plan_from_activity, select_heads, HeadMode, LayerPlan, PruningPlan, Provenance};
pub use select::{keep_count, make_bridge, select_states};
pub use surgery::{apply_bridged, apply_optimized, apply_plan, apply_sparse, fold_bridge, PrunedVariant};
