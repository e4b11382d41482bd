//! Experiment driver: pruning sweeps, fidelity, zones and report tables.

pub mod fidelity;
pub mod marginal;
pub mod render;
pub mod sweep;
pub mod zone;

pub use fidelity::{choice_accuracy, eval_set, fidelity, load_choice_items, seeded_inputs, ChoiceItem, FidelityMetrics};
pub use marginal::marginal_drop;
pub use sweep::{reduction_pct, run_sweep, synthetic_scores, SweepConfig, SweepResult, SweepRow, DEFAULT_RATIOS, DEFAULT_SEQLENS};
pub use zone::{classify_zone, PruningZone};
