//! Pruning sweeps over sequence length x ratio.

use serde::{Deserialize, Serialize};

use super::fidelity::{eval_set, fidelity, seeded_inputs, ChoiceItem, FidelityMetrics};
use super::zone::{classify_zone, PruningZone};
use crate::activity::{activity_scores, collect_activity, ActivityMeta, ActivityRecord, ActivityScores, ModeFilter};
use crate::component::{Component, Mode};
use crate::error::{Error, Result};
use crate::profiler::bench::{benchmark, Protocol};
use crate::profiler::cost::{model_dims, CostModel};
use crate::profiler::hwm::measure_peak;
use crate::profiler::report::hardware_string;
use crate::pruning::{apply_plan, plan_from_activity, HeadMode, PrunedVariant, PruningPlan};
use crate::scalar::{DType, Real};
use crate::ssm::block::SequenceBatch;
use crate::ssm::config::{ModelConfig, Variant};
use crate::ssm::params::Model;

pub const DEFAULT_SEQLENS: [usize; 6] = [64, 512, 2048, 4096, 8192, 16384];
pub const DEFAULT_RATIOS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub seqlens: Vec<usize>,
    pub ratios: Vec<f64>,
    pub variant: PrunedVariant,
    pub head_mode: HeadMode,
    pub batch: usize,
    pub mode: Mode,
    /// Latency protocol; no timing when `None`.
    pub protocol: Option<Protocol>,
    /// Also record process peak memory around one forward per cell.
    pub measure_hwm: bool,
    pub seed: u64,
    /// Sequences in the fidelity evaluation set; zero skips fidelity.
    pub eval_sequences: usize,
    pub eval_len: usize,
    /// Tokens of synthetic data used when no activity scores are supplied.
    pub activity_len: usize,
    pub cost: CostModel,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seqlens: DEFAULT_SEQLENS.to_vec(),
            ratios: DEFAULT_RATIOS.to_vec(),
            variant: PrunedVariant::Optimized,
            head_mode: HeadMode::PerState,
            batch: 1,
            mode: Mode::Prefill,
            protocol: Some(Protocol::STANDARD),
            measure_hwm: true,
            seed: 0,
            eval_sequences: 4,
            eval_len: 64,
            activity_len: 256,
            cost: CostModel::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seqlen: usize,
    pub ratio: f64,
    pub zone: PruningZone,
    /// Kept states summed over layers.
    pub kept_states: usize,
    pub dense_latency_ms: Option<f64>,
    pub pruned_latency_ms: Option<f64>,
    pub speedup: Option<f64>,
    /// Cost-model bytes (activations plus parameters).
    pub mem_dense_bytes: u64,
    pub mem_pruned_bytes: u64,
    pub mem_reduction_pct: f64,
    /// Reduction of the state-space component's cost-model bytes alone.
    pub state_space_mem_reduction_pct: f64,
    /// Process peak-RSS growth over one forward.
    pub hwm_dense_bytes: Option<u64>,
    pub hwm_pruned_bytes: Option<u64>,
    pub hwm_reduction_pct: Option<f64>,
    pub fidelity: Option<FidelityMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub config: ModelConfig,
    pub sweep: SweepConfig,
    pub dtype: DType,
    pub hardware: String,
    pub timestamp: String,
    pub activity: ActivityMeta,
    pub scores_sha256: String,
    pub plans: Vec<PlanSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub ratio: f64,
    pub sha256: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub meta: SweepMeta,
    pub rows: Vec<SweepRow>,
}

pub fn reduction_pct(dense: f64, pruned: f64) -> f64 {
    if dense == 0.0 {
        0.0
    } else {
        100.0 * (1.0 - pruned / dense)
    }
}

/// Activity scores from seeded unit-Gaussian inputs (uniform tokens for
/// embedded models), recorded over prefill.
pub fn synthetic_scores<T: Real>(model: &Model<T>, seq_len: usize, seed: u64) -> Result<ActivityScores> {
    let mut record = ActivityRecord::for_model(model);
    let batch = seeded_inputs(model, 1, seq_len.max(1), seed);
    collect_activity(model, &mut record, &batch, 0)?;
    let heads = (model.config.variant == Variant::Mamba2).then_some(model.config.n_heads);
    let dataset = match batch {
        SequenceBatch::Vectors(_) => "synthetic-gaussian",
        SequenceBatch::Tokens(_) => "synthetic-uniform-tokens",
    };
    Ok(activity_scores(&record, ModeFilter::Both, heads)?.with_source(dataset, Some(seed)))
}

struct CostMemory {
    total: u64,
    state_space: u64,
}

fn cost_memory<T: Real>(model: &Model<T>, cfg: &SweepConfig, seqlen: usize) -> CostMemory {
    let dims = model_dims(model);
    let bytes = T::DTYPE.size_of() as u64;
    let mut total = 0;
    let mut state_space = 0;
    for c in Component::ALL {
        let e = cfg.cost.estimate_layers(&dims, c, cfg.batch as u64, seqlen as u64, cfg.mode, bytes);
        total += e.activation_bytes + e.parameter_bytes;
        if c == Component::StateSpace {
            state_space = e.activation_bytes + e.parameter_bytes;
        }
    }
    CostMemory { total, state_space }
}

struct Timed {
    latency: Option<f64>,
    hwm: Option<u64>,
}

fn time_model<T: Real>(model: &Model<T>, batch: &SequenceBatch<T>, cfg: &SweepConfig) -> Result<Timed> {
    let latency = match cfg.protocol {
        Some(p) => Some(benchmark(model, batch, cfg.mode, p)?.stats.mean_ms),
        None => None,
    };
    let hwm = if cfg.measure_hwm {
        let (run, peak) = measure_peak(|| benchmark(model, batch, cfg.mode, Protocol::new(0, 1)).map(|r| r.stats));
        run?;
        peak
    } else {
        None
    };
    Ok(Timed { latency, hwm })
}

struct Prepared {
    ratio: f64,
    plan: std::result::Result<PruningPlan, String>,
    fidelity: std::result::Result<Option<FidelityMetrics>, String>,
}

fn describe(e: Error) -> String {
    format!("{}: {e}", e.code())
}

/// Run every `(seqlen, ratio)` cell.
///
/// Plans come from `scores`, or from activity collected on seeded synthetic
/// data when `scores` is `None`. The dense model is timed once per sequence
/// length and shared by that length's cells. A failure inside a cell is
/// written to that row and the sweep moves on.
pub fn run_sweep<T: Real>(
    model: &Model<T>,
    scores: Option<&ActivityScores>,
    cfg: &SweepConfig,
    items: Option<&[ChoiceItem]>,
) -> Result<SweepResult> {
    model.validate()?;
    if cfg.seqlens.iter().any(|&l| l == 0) || cfg.batch == 0 {
        return Err(Error::InvalidConfig("sequence lengths and batch must be at least 1".into()));
    }
    let owned;
    let scores = match scores {
        Some(s) => s,
        None => {
            owned = synthetic_scores(model, cfg.activity_len, cfg.seed)?;
            &owned
        }
    };
    let eval = eval_set(model, cfg.eval_sequences, cfg.eval_len.max(1), cfg.seed ^ 0x5eed);

    let prepared: Vec<Prepared> = cfg
        .ratios
        .iter()
        .map(|&ratio| {
            let plan = plan_from_activity(scores, ratio, cfg.head_mode, &model.config).map_err(describe);
            let fidelity = match &plan {
                Ok(p) if cfg.eval_sequences > 0 => apply_plan(model, p, cfg.variant)
                    .and_then(|pruned| fidelity(model, &pruned, &eval, items))
                    .map(Some)
                    .map_err(describe),
                _ => Ok(None),
            };
            Prepared { ratio, plan, fidelity }
        })
        .collect();

    let mut rows = Vec::new();
    for &seqlen in &cfg.seqlens {
        let batch = seeded_inputs(model, cfg.batch, seqlen, cfg.seed.wrapping_add(seqlen as u64));
        let dense_mem = cost_memory(model, cfg, seqlen);
        let dense = time_model(model, &batch, cfg).map_err(describe);
        for prep in &prepared {
            let mut row = SweepRow {
                seqlen,
                ratio: prep.ratio,
                zone: classify_zone(prep.ratio),
                kept_states: 0,
                dense_latency_ms: None,
                pruned_latency_ms: None,
                speedup: None,
                mem_dense_bytes: dense_mem.total,
                mem_pruned_bytes: dense_mem.total,
                mem_reduction_pct: 0.0,
                state_space_mem_reduction_pct: 0.0,
                hwm_dense_bytes: None,
                hwm_pruned_bytes: None,
                hwm_reduction_pct: None,
                fidelity: prep.fidelity.clone().unwrap_or(None),
                error: None,
            };
            let outcome = (|| -> std::result::Result<(), String> {
                let plan = prep.plan.as_ref().map_err(Clone::clone)?;
                prep.fidelity.as_ref().map_err(Clone::clone)?;
                let pruned = apply_plan(model, plan, cfg.variant).map_err(describe)?;
                row.kept_states = pruned.layers.iter().map(|l| l.n_active()).sum();
                let mem = cost_memory(&pruned, cfg, seqlen);
                row.mem_pruned_bytes = mem.total;
                row.mem_reduction_pct = reduction_pct(dense_mem.total as f64, mem.total as f64);
                row.state_space_mem_reduction_pct = reduction_pct(dense_mem.state_space as f64, mem.state_space as f64);
                let dense = dense.as_ref().map_err(Clone::clone)?;
                row.dense_latency_ms = dense.latency;
                row.hwm_dense_bytes = dense.hwm;
                let timed = time_model(&pruned, &batch, cfg).map_err(describe)?;
                row.pruned_latency_ms = timed.latency;
                row.hwm_pruned_bytes = timed.hwm;
                if let (Some(d), Some(p)) = (dense.latency, timed.latency) {
                    row.speedup = Some(d / p);
                }
                if let (Some(d), Some(p)) = (dense.hwm, timed.hwm) {
                    row.hwm_reduction_pct = Some(reduction_pct(d as f64, p as f64));
                }
                Ok(())
            })();
            row.error = outcome.err();
            rows.push(row);
        }
    }

    Ok(SweepResult {
        meta: SweepMeta {
            config: model.config.clone(),
            sweep: cfg.clone(),
            dtype: T::DTYPE,
            hardware: hardware_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            activity: scores.meta.clone(),
            scores_sha256: scores.sha256(),
            plans: prepared
                .iter()
                .map(|p| PlanSummary {
                    ratio: p.ratio,
                    sha256: p.plan.as_ref().ok().map(PruningPlan::sha256),
                    error: p.plan.as_ref().err().cloned(),
                })
                .collect(),
        },
        rows,
    })
}

impl SweepResult {
    pub fn row(&self, seqlen: usize, ratio: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.seqlen == seqlen && r.ratio == ratio)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format("sweep result", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("sweep result", e))
    }
}
