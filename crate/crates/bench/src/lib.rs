//! Fixtures shared by the criterion benches.

use ndarray::{Array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssmprune_core::pruning::{apply_plan, select_states, LayerPlan};
use ssmprune_core::{Model, ModelConfig, PrunedVariant, PruningPlan, Real, Variant};

/// Raw scan operands: `u` is `L x d`, `b`, `c` and `delta` are `L x n`.
pub struct ScanCase {
    pub u: Array2<f32>,
    pub b: Array2<f32>,
    pub c: Array2<f32>,
    pub delta: Array2<f32>,
    pub a: Array1<f32>,
    pub h0: Array2<f32>,
}

pub fn scan_case(len: usize, n: usize, d: usize, seed: u64) -> ScanCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |r: usize, c: usize, lo: f32, hi: f32| Array::from_shape_fn((r, c), |_| rng.random_range(lo..hi));
    ScanCase {
        u: m(len, d, -1.0, 1.0),
        b: m(len, n, -1.0, 1.0),
        c: m(len, n, -1.0, 1.0),
        delta: m(len, n, 0.01, 1.0),
        a: Array1::from_shape_fn(n, |s| -((s + 1) as f32)),
        h0: Array2::zeros((d, n)),
    }
}

/// Mamba-2 block sized like one layer of the 130M checkpoints.
pub fn layer_130m() -> ModelConfig {
    let mut cfg = ModelConfig::scale_130m(Variant::Mamba2);
    cfg.n_layers = 1;
    cfg
}

/// Keep the lowest-index `floor(N (1 - ratio))` states of every layer.
pub fn pruned<T: Real>(model: &Model<T>, ratio: f64, variant: PrunedVariant) -> Model<T> {
    let layers = model
        .layers
        .iter()
        .map(|l| {
            let n = l.n_state();
            let scores: Vec<f64> = (0..n).rev().map(|s| s as f64).collect();
            LayerPlan {
                n_state: n,
                keep: select_states(&scores, ratio).expect("ratio keeps a state"),
                ratio: None,
            }
        })
        .collect();
    let plan = PruningPlan::from_keep(ratio, layers).expect("valid plan");
    apply_plan(model, &plan, variant).expect("plan fits model")
}
