//! Rewriting layer weights to follow a plan.

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::plan::PruningPlan;
use super::select::make_bridge;
use crate::error::{Error, Result};
use crate::scalar::{Real, Scalar};
use crate::ssm::ops::ProjectionLayout;
use crate::ssm::params::{LayerParams, Model, PruningMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrunedVariant {
    /// Untouched weights.
    Dense,
    /// Pruned states frozen at zero; every tensor keeps its shape.
    Sparse,
    /// Pruned states removed from the projection and `A`.
    Optimized,
}

impl PrunedVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            PrunedVariant::Dense => "dense",
            PrunedVariant::Sparse => "sparse",
            PrunedVariant::Optimized => "optimized",
        }
    }
}

impl std::fmt::Display for PrunedVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PrunedVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(PrunedVariant::Dense),
            "sparse" => Ok(PrunedVariant::Sparse),
            "optimized" => Ok(PrunedVariant::Optimized),
            other => Err(Error::format("pruned variant", format!("unknown variant {other:?}"))),
        }
    }
}

fn check_plan<T: Real>(model: &Model<T>, plan: &PruningPlan) -> Result<()> {
    plan.validate()?;
    if model.pruning.is_some() {
        return Err(Error::PlanMismatch("model is already pruned".into()));
    }
    if plan.layers.len() != model.layers.len() {
        return Err(Error::PlanMismatch(format!(
            "plan has {} layers, model has {}",
            plan.layers.len(),
            model.layers.len()
        )));
    }
    for (i, (lp, layer)) in plan.layers.iter().zip(&model.layers).enumerate() {
        if layer.bridge.is_some() || layer.state_mask.is_some() {
            return Err(Error::PlanMismatch(format!("layer {i} is already pruned")));
        }
        if lp.n_state != layer.n_state() {
            return Err(Error::PlanMismatch(format!(
                "layer {i}: plan for {} states, layer has {}",
                lp.n_state,
                layer.n_state()
            )));
        }
    }
    Ok(())
}

fn meta(variant: &str, plan: &PruningPlan, model_n: usize) -> PruningMeta {
    PruningMeta {
        variant: variant.into(),
        ratio: plan.ratio,
        original_state: model_n,
        plan_sha256: plan.sha256(),
    }
}

fn select_rows<T: Real>(w: &Array2<T>, rows: &[usize]) -> Array2<T> {
    w.select(Axis(0), rows)
}

/// Rows of `w_in` to keep: gate and input in full, then the kept rows of
/// B, the C rows listed in `c_rows`, and the kept rows of delta.
fn projection_rows(layout: ProjectionLayout, keep: &[usize], c_rows: &[usize]) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..2 * layout.d_inner).collect();
    rows.extend(keep.iter().map(|s| layout.b().start + s));
    rows.extend(c_rows.iter().map(|s| layout.c().start + s));
    rows.extend(keep.iter().map(|s| layout.delta().start + s));
    rows
}

/// Zero the B, C and delta rows of pruned states and freeze them.
///
/// A plan that keeps every state leaves the weights bit-identical.
pub fn apply_sparse<T: Real>(model: &Model<T>, plan: &PruningPlan) -> Result<Model<T>> {
    check_plan(model, plan)?;
    let mut out = model.clone();
    for (layer, lp) in out.layers.iter_mut().zip(&plan.layers) {
        if lp.is_identity() {
            continue;
        }
        let layout = layer.layout();
        let mask = lp.kept_mask();
        for (s, _) in mask.iter().enumerate().filter(|(_, &k)| !k) {
            for row in [layout.b().start + s, layout.c().start + s, layout.delta().start + s] {
                layer.w_in.row_mut(row).fill(<T as Scalar>::zero());
            }
        }
        layer.state_mask = Some(mask);
    }
    out.pruning = Some(meta("sparse", plan, model.config.d_state));
    Ok(out)
}

/// Remove pruned states from B, delta and `A`, keep C at full width, and
/// scatter the kept states back through an explicit `N x k` bridge.
pub fn apply_bridged<T: Real>(model: &Model<T>, plan: &PruningPlan) -> Result<Model<T>> {
    check_plan(model, plan)?;
    let mut out = model.clone();
    for (layer, lp) in out.layers.iter_mut().zip(&plan.layers) {
        let layout = layer.layout();
        let all: Vec<usize> = (0..lp.n_state).collect();
        layer.w_in = select_rows(&layer.w_in, &projection_rows(layout, &lp.keep, &all));
        layer.a_diag = layer.a_diag.select(Axis(0), &lp.keep);
        layer.bridge = Some(make_bridge(&lp.keep, lp.n_state)?);
    }
    out.pruning = Some(meta("bridged", plan, model.config.d_state));
    Ok(out)
}

/// Fold a layer's bridge into its C projection: `W_C' = bridge^T W_C`.
pub fn fold_bridge<T: Real>(layer: &LayerParams<T>) -> LayerParams<T> {
    let Some(bridge) = &layer.bridge else {
        return layer.clone();
    };
    let layout = layer.layout();
    let (k, di) = (layer.n_state(), layer.d_inner());
    let w_c = layer.w_in.slice(s![layout.c(), ..]);
    let folded = bridge.t().dot(&w_c);
    let mut w_in = Array2::from_elem((ProjectionLayout::dense(di, k).rows(), layer.w_in.ncols()), <T as Scalar>::zero());
    let new = ProjectionLayout::dense(di, k);
    w_in.slice_mut(s![..new.c().start, ..]).assign(&layer.w_in.slice(s![..layout.c().start, ..]));
    w_in.slice_mut(s![new.c(), ..]).assign(&folded);
    w_in.slice_mut(s![new.delta(), ..]).assign(&layer.w_in.slice(s![layout.delta(), ..]));
    LayerParams {
        w_in,
        bridge: None,
        ..layer.clone()
    }
}

/// Physically remove pruned states; the bridge is folded into C, so no
/// scatter remains at run time.
pub fn apply_optimized<T: Real>(model: &Model<T>, plan: &PruningPlan) -> Result<Model<T>> {
    let mut out = apply_bridged(model, plan)?;
    for layer in out.layers.iter_mut() {
        *layer = fold_bridge(layer);
    }
    out.pruning = Some(meta("optimized", plan, model.config.d_state));
    Ok(out)
}

/// Dispatch on `variant`; `Dense` returns an unmodified copy.
pub fn apply_plan<T: Real>(model: &Model<T>, plan: &PruningPlan, variant: PrunedVariant) -> Result<Model<T>> {
    match variant {
        PrunedVariant::Dense => {
            check_plan(model, plan)?;
            Ok(model.clone())
        }
        PrunedVariant::Sparse => apply_sparse(model, plan),
        PrunedVariant::Optimized => apply_optimized(model, plan),
    }
}

/// Kept-state count of every layer, for reports.
pub fn kept_states<T: Real>(model: &Model<T>) -> Array1<usize> {
    model.layers.iter().map(|l| l.n_active()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::plan::LayerPlan;
    use crate::pruning::select::select_states;
    use crate::profiler::bench::synthetic_batch;
    use crate::profiler::cost::{CostModel, LayerDims};
    use crate::component::{Component, Mode};
    use crate::ssm::config::{ModelConfig, Variant};
    use crate::ssm::params::default_a;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(variant: Variant, n: usize, seed: u64) -> Model<f64> {
        let cfg = match variant {
            Variant::Mamba1 => ModelConfig::new(variant, 12, n, 2),
            Variant::Mamba2 => ModelConfig::new(variant, 12, n, 2).with_heads(2),
        };
        Model::random(cfg, seed).unwrap()
    }

    fn random_plan(m: &Model<f64>, ratio: f64, seed: u64) -> PruningPlan {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = m
            .layers
            .iter()
            .map(|l| {
                let scores: Vec<f64> = (0..l.n_state()).map(|_| rng.random::<f64>()).collect();
                LayerPlan {
                    n_state: l.n_state(),
                    keep: select_states(&scores, ratio).unwrap(),
                    ratio: None,
                }
            })
            .collect();
        PruningPlan::from_keep(ratio, layers).unwrap()
    }

    fn run(m: &Model<f64>, seed: u64) -> ndarray::Array3<f64> {
        m.prefill(&synthetic_batch(2, 9, m.config.d_model, seed)).unwrap().0
    }

    fn max_diff(a: &ndarray::Array3<f64>, b: &ndarray::Array3<f64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn zero_ratio_is_identity() {
        for variant in [Variant::Mamba1, Variant::Mamba2] {
            let m = model(variant, 8, 1);
            let plan = PruningPlan::identity(&[8, 8]);
            let dense = run(&m, 2);
            for v in [PrunedVariant::Sparse, PrunedVariant::Optimized] {
                let p = apply_plan(&m, &plan, v).unwrap();
                assert_eq!(p.layers, m.layers, "{v}");
                assert_eq!(run(&p, 2), dense);
            }
        }
    }

    #[test]
    fn sparse_keeps_shapes_and_zeroes_rows() {
        let m = model(Variant::Mamba1, 6, 3);
        let plan = random_plan(&m, 0.5, 4);
        let p = apply_sparse(&m, &plan).unwrap();
        for ((a, b), lp) in m.layers.iter().zip(&p.layers).zip(&plan.layers) {
            assert_eq!(a.w_in.dim(), b.w_in.dim());
            let layout = b.layout();
            for s in (0..6).filter(|s| !lp.keep.contains(s)) {
                assert!(b.w_in.row(layout.b().start + s).iter().all(|&v| v == 0.0));
                assert!(b.w_in.row(layout.delta().start + s).iter().all(|&v| v == 0.0));
            }
            assert_eq!(b.n_active(), 3);
        }
        assert_eq!(p.pruning.as_ref().unwrap().variant, "sparse");
    }

    #[test]
    fn pruned_rows_are_never_read() {
        let m = model(Variant::Mamba2, 8, 5);
        let plan = random_plan(&m, 0.5, 6);
        let mut noisy = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (layer, lp) in noisy.layers.iter_mut().zip(&plan.layers) {
            let layout = layer.layout();
            for s in (0..8).filter(|s| !lp.keep.contains(s)) {
                for row in [layout.b().start + s, layout.c().start + s, layout.delta().start + s] {
                    layer.w_in.row_mut(row).mapv_inplace(|_| rng.random_range(-5.0..5.0));
                }
            }
        }
        let a = run(&apply_sparse(&m, &plan).unwrap(), 8);
        let b = run(&apply_sparse(&noisy, &plan).unwrap(), 8);
        assert_eq!(a, b);
    }

    #[test]
    fn single_kept_state_matches_hand_built_layer() {
        let m = model(Variant::Mamba1, 5, 9);
        let keep = 3;
        let plan = PruningPlan::from_keep(
            0.8,
            vec![
                LayerPlan {
                    n_state: 5,
                    keep: vec![keep],
                    ratio: None
                };
                2
            ],
        )
        .unwrap();
        let mut hand = m.clone();
        for layer in hand.layers.iter_mut() {
            let lay = layer.layout();
            let di = layer.d_inner();
            let mut w_in = Array2::zeros((2 * di + 3, layer.w_in.ncols()));
            w_in.slice_mut(s![..2 * di, ..]).assign(&layer.w_in.slice(s![..2 * di, ..]));
            w_in.row_mut(2 * di).assign(&layer.w_in.row(lay.b().start + keep));
            w_in.row_mut(2 * di + 1).assign(&layer.w_in.row(lay.c().start + keep));
            w_in.row_mut(2 * di + 2).assign(&layer.w_in.row(lay.delta().start + keep));
            layer.w_in = w_in;
            layer.a_diag = Array1::from_elem(1, default_a::<f64>(5)[keep]);
        }
        let sparse = run(&apply_sparse(&m, &plan).unwrap(), 10);
        assert!(max_diff(&sparse, &run(&hand, 10)) < 1e-12);
    }

    #[test]
    fn bridged_and_folded_agree_with_sparse() {
        for variant in [Variant::Mamba1, Variant::Mamba2] {
            let m = model(variant, 10, 11);
            for ratio in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let plan = random_plan(&m, ratio, 12);
                let sparse = run(&apply_sparse(&m, &plan).unwrap(), 13);
                let bridged = run(&apply_bridged(&m, &plan).unwrap(), 13);
                let opt = apply_optimized(&m, &plan).unwrap();
                assert!(opt.layers.iter().all(|l| l.bridge.is_none()));
                let opt = run(&opt, 13);
                assert!(max_diff(&sparse, &bridged) < 1e-10, "{variant:?} r={ratio}");
                assert!(max_diff(&sparse, &opt) < 1e-10, "{variant:?} r={ratio}");
            }
        }
    }

    #[test]
    fn optimized_shrinks_tensors_and_records_metadata() {
        let m = model(Variant::Mamba2, 8, 14);
        let plan = random_plan(&m, 0.5, 15);
        let p = apply_optimized(&m, &plan).unwrap();
        p.validate().unwrap();
        for l in &p.layers {
            assert_eq!(l.n_state(), 4);
            assert_eq!(l.w_in.nrows(), ProjectionLayout::dense(l.d_inner(), 4).rows());
        }
        let meta = p.pruning.as_ref().unwrap();
        assert_eq!((meta.variant.as_str(), meta.ratio, meta.original_state), ("optimized", 0.5, 8));
        assert_eq!(meta.plan_sha256, plan.sha256());
    }

    #[test]
    fn optimized_state_space_cost_scales_with_kept_fraction() {
        let m = model(Variant::Mamba1, 8, 16);
        let plan = random_plan(&m, 0.7, 17);
        let p = apply_optimized(&m, &plan).unwrap();
        let cost = CostModel::default();
        for (a, b) in m.layers.iter().zip(&p.layers) {
            let dense = cost.layer_flops(&LayerDims::from_layer(&m.config, a), Component::StateSpace, 1, 64, Mode::Prefill);
            let pruned = cost.layer_flops(&LayerDims::from_layer(&p.config, b), Component::StateSpace, 1, 64, Mode::Prefill);
            assert_eq!(pruned * 8, dense * b.n_state() as u64);
        }
    }

    #[test]
    fn mismatched_plans_are_rejected() {
        let m = model(Variant::Mamba1, 6, 18);
        assert!(matches!(apply_sparse(&m, &PruningPlan::identity(&[6])), Err(Error::PlanMismatch(_))));
        assert!(matches!(apply_optimized(&m, &PruningPlan::identity(&[5, 5])), Err(Error::PlanMismatch(_))));
        let once = apply_sparse(&m, &random_plan(&m, 0.5, 1)).unwrap();
        assert!(matches!(apply_sparse(&once, &PruningPlan::identity(&[6, 6])), Err(Error::PlanMismatch(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn sparse_equals_optimized(seed in any::<u64>(), permille in 0u32..800, mamba2 in any::<bool>()) {
            let variant = if mamba2 { Variant::Mamba2 } else { Variant::Mamba1 };
            let m = model(variant, 6, seed);
            let ratio = permille as f64 / 1000.0;
            let plan = random_plan(&m, ratio, seed ^ 1);
            let a = run(&apply_sparse(&m, &plan).unwrap(), seed);
            let b = run(&apply_optimized(&m, &plan).unwrap(), seed);
            prop_assert!(max_diff(&a, &b) < 1e-10);
            prop_assert_eq!(a.dim(), b.dim());
        }
    }
}
