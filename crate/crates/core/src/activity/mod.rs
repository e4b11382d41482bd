//! State activity: mean post-softplus step size per state channel.
//!
//! [`ActivityRecord`] accumulates exact column sums of every layer's step
//! sizes as forwards run, tagged by mode. [`activity_scores`] turns them into
//! per-state and per-head means, and [`export_heatmap`] lays them out as a
//! layer x state matrix.

pub mod exact;
pub mod heatmap;
pub mod record;
pub mod scores;

pub use exact::ExactSum;
pub use heatmap::{export_heatmap, matrix_to_csv, normalize_rows, parse_matrix_csv, render_ppm, Heatmap};
pub use record::{collect_activity, ActivityRecord, LayerActivity, ModeFilter, Recorder, Reservoir, StateSums};
pub use scores::{activity_scores, head_means, ActivityMeta, ActivityScores, LayerScores};
