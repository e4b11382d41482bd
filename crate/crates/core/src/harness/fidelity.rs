//! How far a pruned model's outputs drift from the dense model's.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiler::bench::synthetic_batch;
use crate::scalar::Real;
use crate::ssm::block::SequenceBatch;
use crate::ssm::config::InputMode;
use crate::ssm::params::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityMetrics {
    /// Mean over sequences of `||y_pruned - y_dense|| / ||y_dense||`.
    pub mean_rel_l2: f64,
    pub max_rel_l2: f64,
    pub n_sequences: usize,
    /// Multiple-choice accuracy of the pruned model, when items are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_accuracy: Option<f64>,
}

/// One multiple-choice item over token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceItem {
    pub context: Vec<usize>,
    pub choices: Vec<Vec<usize>>,
    pub label: usize,
}

/// Read one JSON item per non-empty line.
pub fn load_choice_items(path: &Path) -> Result<Vec<ChoiceItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format("choice item", format!("line {}: {e}", i + 1))))
        .collect()
}

/// Seeded `batch x seq_len` input: unit-Gaussian vectors, or uniform token
/// ids for models with an embedding table.
pub fn seeded_inputs<T: Real>(model: &Model<T>, batch: usize, seq_len: usize, seed: u64) -> SequenceBatch<T> {
    match model.config.input {
        InputMode::RawVectors => synthetic_batch(batch, seq_len, model.config.d_model, seed),
        InputMode::EmbeddedTokens { vocab_size } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            SequenceBatch::Tokens(Array2::from_shape_simple_fn((batch, seq_len), || rng.random_range(0..vocab_size)))
        }
    }
}

/// `n_sequences` single-sequence batches with consecutive seeds.
pub fn eval_set<T: Real>(model: &Model<T>, n_sequences: usize, seq_len: usize, seed: u64) -> Vec<SequenceBatch<T>> {
    (0..n_sequences)
        .map(|i| seeded_inputs(model, 1, seq_len, seed.wrapping_add(i as u64)))
        .collect()
}

fn rel_l2<T: Real>(pruned: ArrayView2<'_, T>, dense: ArrayView2<'_, T>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (p, d) in pruned.iter().zip(dense.iter()) {
        let (p, d) = (p.to_f64(), d.to_f64());
        num += (p - d) * (p - d);
        den += d * d;
    }
    match (num, den) {
        (n, _) if n == 0.0 => 0.0,
        (_, d) if d == 0.0 => f64::INFINITY,
        (n, d) => (n / d).sqrt(),
    }
}

fn check_shapes<T: Real>(dense: &Model<T>, pruned: &Model<T>) -> Result<()> {
    let (a, b) = (&dense.config, &pruned.config);
    if a.d_model != b.d_model || a.n_layers != b.n_layers || a.input != b.input {
        return Err(Error::shape(format!(
            "dense (D={}, layers={}) and pruned (D={}, layers={}) models differ",
            a.d_model, a.n_layers, b.d_model, b.n_layers
        )));
    }
    Ok(())
}

/// Compare final-layer outputs on identical inputs; each sequence of each
/// batch counts once.
pub fn fidelity<T: Real>(
    dense: &Model<T>,
    pruned: &Model<T>,
    eval: &[SequenceBatch<T>],
    items: Option<&[ChoiceItem]>,
) -> Result<FidelityMetrics> {
    check_shapes(dense, pruned)?;
    let mut divs = Vec::new();
    for batch in eval {
        let (yd, _) = dense.prefill(batch)?;
        let (yp, _) = pruned.prefill(batch)?;
        for (p, d) in yp.outer_iter().zip(yd.outer_iter()) {
            divs.push(rel_l2(p, d));
        }
    }
    let n = divs.len();
    let mean = if n == 0 { 0.0 } else { divs.iter().sum::<f64>() / n as f64 };
    let max = divs.iter().copied().fold(0.0, f64::max);
    let (accuracy, dense_accuracy) = match items {
        Some(items) => (Some(choice_accuracy(pruned, items)?), Some(choice_accuracy(dense, items)?)),
        None => (None, None),
    };
    Ok(FidelityMetrics {
        mean_rel_l2: mean,
        max_rel_l2: max,
        n_sequences: n,
        accuracy,
        dense_accuracy,
    })
}

/// Log-likelihood of `choice` after `context`, reading logits off the final
/// hidden states through the (tied) embedding table.
pub fn choice_log_likelihood<T: Real>(model: &Model<T>, context: &[usize], choice: &[usize]) -> Result<f64> {
    let table = model
        .embedding
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("multiple-choice scoring needs a token embedding".into()))?;
    if context.is_empty() || choice.is_empty() {
        return Err(Error::shape("context and choice must both be non-empty"));
    }
    let ids: Vec<usize> = context.iter().chain(choice).copied().collect();
    let batch = SequenceBatch::Tokens(Array2::from_shape_vec((1, ids.len()), ids.clone()).map_err(|e| Error::shape(e.to_string()))?);
    let (y, _) = model.prefill(&batch)?;
    let hidden = y.index_axis(Axis(0), 0);
    let start = context.len() - 1;
    let logits = hidden.slice(s![start..ids.len() - 1, ..]).dot(&table.t());
    let mut total = 0.0;
    for (row, &target) in logits.outer_iter().zip(&ids[context.len()..]) {
        let vals: Vec<f64> = row.iter().map(|v| v.to_f64()).collect();
        let peak = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = peak + vals.iter().map(|v| (v - peak).exp()).sum::<f64>().ln();
        total += vals[target] - lse;
    }
    Ok(total)
}

/// Fraction of items whose highest-likelihood choice is the labelled one.
/// Ties go to the lower choice index.
pub fn choice_accuracy<T: Real>(model: &Model<T>, items: &[ChoiceItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::shape("no multiple-choice items"));
    }
    let mut correct = 0;
    for item in items {
        if item.label >= item.choices.len() {
            return Err(Error::shape(format!("label {} for {} choices", item.label, item.choices.len())));
        }
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, c) in item.choices.iter().enumerate() {
            let ll = choice_log_likelihood(model, &item.context, c)?;
            if ll > best.0 {
                best = (ll, i);
            }
        }
        correct += (best.1 == item.label) as usize;
    }
    Ok(correct as f64 / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::{apply_optimized, select_states, LayerPlan, PruningPlan};
    use crate::ssm::config::{ModelConfig, Variant};

    fn model(seed: u64) -> Model<f64> {
        Model::random(ModelConfig::new(Variant::Mamba2, 16, 12, 2).with_heads(2), seed).unwrap()
    }

    fn pruned(m: &Model<f64>, ratio: f64) -> Model<f64> {
        let layers = m
            .layers
            .iter()
            .map(|l| LayerPlan {
                n_state: l.n_state(),
                keep: select_states(&vec![1.0; l.n_state()], ratio).unwrap(),
                ratio: None,
            })
            .collect();
        apply_optimized(m, &PruningPlan::from_keep(ratio, layers).unwrap()).unwrap()
    }

    #[test]
    fn unpruned_model_has_zero_divergence() {
        let m = model(1);
        let f = fidelity(&m, &pruned(&m, 0.0), &eval_set(&m, 3, 16, 2), None).unwrap();
        assert_eq!((f.mean_rel_l2, f.max_rel_l2, f.n_sequences), (0.0, 0.0, 3));
    }

    #[test]
    fn matches_direct_recomputation() {
        let m = model(3);
        let p = pruned(&m, 0.5);
        let eval = eval_set(&m, 2, 10, 4);
        let f = fidelity(&m, &p, &eval, None).unwrap();
        let mut divs = vec![];
        for b in &eval {
            let yd = m.prefill(b).unwrap().0;
            let yp = p.prefill(b).unwrap().0;
            let num: f64 = yd.iter().zip(&yp).map(|(a, b)| (a - b).powi(2)).sum();
            let den: f64 = yd.iter().map(|a| a * a).sum();
            divs.push((num / den).sqrt());
        }
        assert!((f.mean_rel_l2 - (divs[0] + divs[1]) / 2.0).abs() < 1e-15);
        assert_eq!(f.max_rel_l2, divs[0].max(divs[1]));
    }

    #[test]
    fn one_state_drifts_more_than_light_pruning() {
        let mut wins = 0;
        for seed in 0..5 {
            let m = model(seed);
            let eval = eval_set(&m, 2, 32, seed + 100);
            let light = fidelity(&m, &pruned(&m, 0.1), &eval, None).unwrap().mean_rel_l2;
            let heavy = fidelity(&m, &pruned(&m, 0.9), &eval, None).unwrap().mean_rel_l2;
            wins += (heavy > light) as usize;
        }
        assert!(wins >= 3, "{wins}/5");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = model(1);
        let b = Model::<f64>::random(ModelConfig::new(Variant::Mamba2, 8, 12, 2).with_heads(2), 1).unwrap();
        assert!(matches!(fidelity(&a, &b, &[], None), Err(Error::Shape(_))));
    }

    #[test]
    fn choice_accuracy_on_token_model() {
        let mut cfg = ModelConfig::new(Variant::Mamba1, 8, 4, 1);
        cfg.input = InputMode::EmbeddedTokens { vocab_size: 11 };
        let m = Model::<f64>::random(cfg, 5).unwrap();
        let items: Vec<ChoiceItem> = (0..4)
            .map(|i| ChoiceItem {
                context: vec![1, 2, i],
                choices: vec![vec![3], vec![4, 5], vec![i + 6]],
                label: i % 3,
            })
            .collect();
        let f = fidelity(&m, &m.clone(), &eval_set(&m, 1, 5, 1), Some(&items)).unwrap();
        assert_eq!(f.accuracy, f.dense_accuracy);
        let acc = f.accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let ll = choice_log_likelihood(&m, &[1, 2], &[3]).unwrap();
        assert!(ll < 0.0 && ll > -(11f64).ln() * 10.0);
        assert!(choice_accuracy(&model(1), &items).is_err());
    }

    #[test]
    fn items_parse_from_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        std::fs::write(&path, "{\"context\":[1],\"choices\":[[2],[3]],\"label\":1}\n\n").unwrap();
        let items = load_choice_items(&path).unwrap();
        assert_eq!(items, vec![ChoiceItem { context: vec![1], choices: vec![vec![2], vec![3]], label: 1 }]);
    }
}
