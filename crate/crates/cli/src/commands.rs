use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use ssmprune_core::activity::{collect_activity, export_heatmap, matrix_to_csv};
use ssmprune_core::harness::{load_choice_items, run_sweep, seeded_inputs, SweepConfig, SweepResult};
use ssmprune_core::profiler::cost::{CostModel, FlopConvention, StateBlock};
use ssmprune_core::profiler::{profile_report, ProfileRequest, Protocol};
use ssmprune_core::pruning::{apply_plan, plan_from_activity};
use ssmprune_core::ssm::io::{save_model, WeightFormat};
use ssmprune_core::ssm::InputMode;
use ssmprune_core::{activity_scores, ActivityRecord, ActivityScores, Model, ModelConfig, Real, SequenceBatch, Variant};

use crate::args::{
    ActivityArgs, Convention, Format, InitArgs, Preset, ProfileArgs, PruneArgs, ReportArgs, SweepArgs, TimingArgs,
    WeightsFormat,
};
use crate::config::RunConfig;
use crate::error::CliError;

/// Output directory plus what has been written to it.
pub struct Run {
    pub out: PathBuf,
    pub format: Format,
    pub seed: u64,
    pub written: Vec<PathBuf>,
}

impl Run {
    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.written.push(path.clone());
        Ok(path)
    }

    fn emit(&self, csv: impl FnOnce() -> Result<String, CliError>, text: impl FnOnce() -> String, json: impl FnOnce() -> Result<String, CliError>) -> Result<(), CliError> {
        let s = match self.format {
            Format::Csv => csv()?,
            Format::Text => text(),
            Format::Structured => json()?,
        };
        print!("{s}");
        if !s.ends_with('\n') {
            println!();
        }
        Ok(())
    }
}

fn protocol(t: &TimingArgs, default: Protocol) -> Protocol {
    Protocol::new(t.warmup.unwrap_or(default.n_warmup), t.iters.unwrap_or(default.n_iters))
}

pub fn profile<T: Real>(run: &mut Run, cfg: &RunConfig, a: &ProfileArgs) -> Result<(), CliError> {
    let model: Model<T> = cfg.build(run.seed)?;
    let convention = match a.convention {
        Convention::Executed => FlopConvention::Executed,
        Convention::ReferenceKernels => FlopConvention::ReferenceKernels,
    };
    let state_block = a.state_block.map_or(StateBlock::Step, StateBlock::Chunk);
    let req = ProfileRequest {
        seqlens: a.seqlens.clone(),
        batch: a.batch,
        modes: a.modes.clone(),
        components: (!a.components.is_empty()).then(|| a.components.clone()),
        measure: a.measure.then(|| protocol(&a.timing, Protocol::PROFILING)),
        cost: CostModel::new(convention, state_block),
        seed: run.seed,
    };
    let report = profile_report(&model, &req)?;
    let (csv, text, json) = (report.to_csv()?, report.to_text(), report.to_json()?);
    run.write("profile.csv", &csv)?;
    run.write("profile.txt", &text)?;
    run.write("profile.json", &json)?;
    run.emit(|| Ok(csv), || text, || Ok(json))
}

/// One sequence per line: token ids for embedded models, `d_model`-wide rows otherwise.
fn read_sequences<T: Real>(path: &Path, cfg: &ModelConfig) -> Result<Vec<SequenceBatch<T>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |i: usize, msg: String| CliError::Data(format!("{}:{}: {msg}", path.display(), i + 1));
    let mut out = vec![];
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let batch = match cfg.input {
            InputMode::EmbeddedTokens { vocab_size } => {
                let ids: Vec<usize> = serde_json::from_str(line).map_err(|e| bad(i, e.to_string()))?;
                if let Some(t) = ids.iter().find(|&&t| t >= vocab_size) {
                    return Err(bad(i, format!("token {t} outside vocabulary of {vocab_size}")));
                }
                let len = ids.len();
                SequenceBatch::Tokens(Array2::from_shape_vec((1, len), ids).map_err(|e| bad(i, e.to_string()))?)
            }
            InputMode::RawVectors => {
                let rows: Vec<Vec<f64>> = serde_json::from_str(line).map_err(|e| bad(i, e.to_string()))?;
                if let Some(r) = rows.iter().find(|r| r.len() != cfg.d_model) {
                    return Err(bad(i, format!("row of width {} for d_model {}", r.len(), cfg.d_model)));
                }
                let flat: Vec<T> = rows.iter().flatten().map(|&v| T::from_f64(v)).collect();
                SequenceBatch::Vectors(Array3::from_shape_vec((1, rows.len(), cfg.d_model), flat).map_err(|e| bad(i, e.to_string()))?)
            }
        };
        if batch.seq_len() == 0 {
            return Err(bad(i, "empty sequence".into()));
        }
        out.push(batch);
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("{}: no sequences", path.display())));
    }
    Ok(out)
}

fn collect_scores<T: Real>(model: &Model<T>, a: &ActivityArgs, seed: u64) -> Result<ActivityScores, CliError> {
    let mut record = ActivityRecord::for_model(model);
    if a.reservoir > 0 {
        record = record.with_reservoir(a.reservoir, seed);
    }
    let (batches, dataset) = match &a.data {
        Some(path) => (read_sequences(path, &model.config)?, path.display().to_string()),
        None => {
            let name = match model.config.input {
                InputMode::RawVectors => "synthetic-gaussian",
                InputMode::EmbeddedTokens { .. } => "synthetic-uniform-tokens",
            };
            (vec![seeded_inputs(model, a.batch, a.len, seed)], name.to_string())
        }
    };
    for b in &batches {
        collect_activity(model, &mut record, b, a.decode_steps.min(b.seq_len().saturating_sub(1)))?;
    }
    let heads = (model.config.variant == Variant::Mamba2).then_some(model.config.n_heads);
    let seed = a.data.is_none().then_some(seed);
    Ok(activity_scores(&record, a.modes, heads)?.with_source(dataset, seed))
}

pub fn activity<T: Real>(run: &mut Run, cfg: &RunConfig, a: &ActivityArgs) -> Result<(), CliError> {
    let model: Model<T> = cfg.build(run.seed)?;
    let scores = collect_scores(&model, a, run.seed)?;
    let heatmap = export_heatmap(&scores)?;
    let json = scores.to_json()?;
    run.write("activity/scores.json", &json)?;
    let dir = run.out.join("activity");
    heatmap.write_dir(&dir, a.cell.max(1))?;
    for f in ["heatmap_raw.csv", "heatmap_normalized.csv", "heatmap.ppm"] {
        run.written.push(dir.join(f));
    }
    let text = || {
        let mut s = format!(
            "activity over {} steps per layer ({}, modes {:?})\nlayer      min     mean      max\n",
            scores.layers.first().map_or(0, |l| l.n_samples),
            scores.meta.dataset,
            scores.meta.modes
        );
        for l in &scores.layers {
            let min = l.scores.iter().copied().fold(f64::INFINITY, f64::min);
            let max = l.scores.iter().copied().fold(0.0, f64::max);
            let mean = l.scores.iter().sum::<f64>() / l.scores.len() as f64;
            s.push_str(&format!("{:>5} {min:>8.4} {mean:>8.4} {max:>8.4}\n", l.layer));
        }
        s
    };
    run.emit(|| Ok(matrix_to_csv(&heatmap.raw)), text, || Ok(json))
}

fn load_or_collect<T: Real>(model: &Model<T>, scores: Option<&Path>, len: usize, seed: u64) -> Result<ActivityScores, CliError> {
    match scores {
        Some(p) => Ok(ActivityScores::load(p)?),
        None => Ok(ssmprune_core::harness::synthetic_scores(model, len, seed)?),
    }
}

pub fn prune<T: Real>(run: &mut Run, cfg: &RunConfig, a: &PruneArgs) -> Result<(), CliError> {
    let model: Model<T> = cfg.build(run.seed)?;
    let scores = load_or_collect(&model, a.scores.as_deref(), a.activity_len, run.seed)?;
    let plan = plan_from_activity(&scores, a.ratio, a.head_mode, &model.config)?;
    let pruned = apply_plan(&model, &plan, a.variant)?;
    let plan_json = plan.to_json()?;
    run.write("plans/plan.json", &plan_json)?;
    let (name, format) = match a.weights_format {
        WeightsFormat::Binary => ("model.bin", WeightFormat::Binary),
        WeightsFormat::Json => ("model.json", WeightFormat::Json),
    };
    let dir = run.out.join("plans");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let path = dir.join(name);
    save_model(&pruned, &path, format)?;
    run.written.push(path.clone());
    let kept = plan.kept_total();
    let total: usize = plan.layers.iter().map(|l| l.n_state).sum();
    let text = || {
        let mut s = format!(
            "ratio {} ({:?}), {} variant: kept {kept} of {total} states\nplan {}\nmodel {}\n",
            a.ratio,
            plan.head_mode,
            a.variant,
            plan.sha256(),
            path.display()
        );
        for (i, l) in plan.layers.iter().enumerate() {
            s.push_str(&format!("layer {i}: keep {:?}\n", l.keep));
        }
        s
    };
    let csv = || {
        let mut s = String::from("layer,n_state,kept,keep\n");
        for (i, l) in plan.layers.iter().enumerate() {
            let ids: Vec<String> = l.keep.iter().map(|k| k.to_string()).collect();
            s.push_str(&format!("{i},{},{},{}\n", l.n_state, l.keep.len(), ids.join(" ")));
        }
        Ok(s)
    };
    run.emit(csv, text, || Ok(plan_json.clone()))
}

pub fn sweep<T: Real>(run: &mut Run, cfg: &RunConfig, a: &SweepArgs) -> Result<(), CliError> {
    let model: Model<T> = cfg.build(run.seed)?;
    let scores = a.scores.as_deref().map(ActivityScores::load).transpose()?;
    let items = a.items.as_deref().map(load_choice_items).transpose()?;
    let sweep_cfg = SweepConfig {
        seqlens: a.seqlens.clone(),
        ratios: a.ratios.clone(),
        variant: a.variant,
        head_mode: a.head_mode,
        batch: a.batch,
        mode: a.mode,
        protocol: (!a.no_timing).then(|| protocol(&a.timing, Protocol::STANDARD)),
        measure_hwm: a.hwm,
        seed: run.seed,
        eval_sequences: a.eval_sequences,
        eval_len: a.eval_len,
        activity_len: a.activity_len,
        ..SweepConfig::default()
    };
    let result = run_sweep(&model, scores.as_ref(), &sweep_cfg, items.as_deref())?;
    render(run, &result)
}

fn render(run: &mut Run, result: &SweepResult) -> Result<(), CliError> {
    std::fs::create_dir_all(&run.out).map_err(|e| CliError::io(&run.out, e))?;
    run.written.extend(result.write_outputs(&run.out)?);
    run.emit(|| Ok(result.table2_csv()?), || result.table2_text(), || Ok(result.to_json()?))
}

pub fn report(run: &mut Run, a: &ReportArgs) -> Result<(), CliError> {
    let input = a.input.clone().unwrap_or_else(|| run.out.join("sweep.json"));
    let text = std::fs::read_to_string(&input).map_err(|e| CliError::io(&input, e))?;
    let result = SweepResult::from_json(&text)?;
    render(run, &result)
}

pub fn init<T: Real>(run: &mut Run, a: &InitArgs) -> Result<(), CliError> {
    let model = match a.preset {
        Preset::Desk => ModelConfig::desk(),
        Preset::Mamba1 => ModelConfig::scale_130m(Variant::Mamba1),
        Preset::Mamba2 => ModelConfig::scale_130m(Variant::Mamba2),
    };
    let mut cfg = RunConfig { model, weights: None };
    if a.weights {
        let weights: Model<T> = Model::random(cfg.model.clone(), run.seed)?;
        std::fs::create_dir_all(&run.out).map_err(|e| CliError::io(&run.out, e))?;
        let path = run.out.join("weights.bin");
        save_model(&weights, &path, WeightFormat::Binary)?;
        run.written.push(path);
        cfg.weights = Some("weights.bin".into());
    }
    let toml = cfg.to_toml()?;
    let path = run.write("config.toml", &toml)?;
    run.emit(
        || Ok(format!("path\n{}\n", path.display())),
        || format!("wrote {}\n\n{toml}", path.display()),
        || Ok(serde_json::to_string_pretty(&cfg).expect("config serializes")),
    )
}
