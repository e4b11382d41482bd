//! Closed-form FLOP and activation-memory counts per component.
//!
//! One multiply-add is two FLOPs; every activation, exponential, square
//! root and division is one FLOP per element. Counts are totals over all
//! layers for `B` sequences of `L` tokens; decode counts one token.
//!
//! Per layer and token, with `D` model width, `d` inner width, `n` state
//! channels, `r` read-out width (`n` unless bridged), `k` kernel width:
//!
//! | component   | executed FLOPs                                   |
//! |-------------|--------------------------------------------------|
//! | RMSNorm     | `4D + 4`                                         |
//! | Gated MLP   | `2D(2d + 2n + r) + 2d` (+ `4d + 4` output norm)  |
//! | Conv        | `2dk + d`                                        |
//! | State Space | `n(3d + 4) + 2rd` (+ `2rnd` bridge)              |
//! | Final Lin.  | `2Dd + D`                                        |
//!
//! For a dense layer the state-space term is `n(5d + 4)`: softplus, `delta a`,
//! `exp`, `delta B` per state and five operations per (channel, state) pair.

use serde::{Deserialize, Serialize};

use crate::component::{Component, Mode};
use crate::scalar::Real;
use crate::ssm::config::{ModelConfig, Variant};
use crate::ssm::ops::ProjectionLayout;
use crate::ssm::params::{LayerParams, Model};

/// How the state-space term is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// Exactly the arithmetic this crate's scan performs (shared step size).
    #[default]
    Executed,
    /// Per-channel step sizes as in the reference selective-scan kernels:
    /// `8dn + d` for Mamba-1, `5dn + Hn + 3H` for Mamba-2 with `H` scalar-decay
    /// heads. Other components are counted as in `Executed`.
    ReferenceKernels,
}

impl FlopConvention {
    pub fn describe(self) -> &'static str {
        match self {
            FlopConvention::Executed => {
                "executed: 1 multiply-add = 2 FLOPs, 1 FLOP per activation/exp/sqrt/div element; state space n(5d+4) per token and layer"
            }
            FlopConvention::ReferenceKernels => {
                "reference kernels: as executed, but state space 8dn+d (Mamba-1) or 5dn+Hn+3H (Mamba-2) per token and layer"
            }
        }
    }
}

/// Number of timesteps whose states are materialized at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "len")]
pub enum StateBlock {
    /// One state per sequence, as in the recurrent scan.
    #[default]
    Step,
    /// Chunks of the given length.
    Chunk(usize),
    /// One state per token.
    Full,
}

impl StateBlock {
    fn len(self, seq_len: u64) -> u64 {
        match self {
            StateBlock::Step => seq_len.min(1),
            StateBlock::Chunk(c) => seq_len.min(c as u64),
            StateBlock::Full => seq_len,
        }
    }
}

/// Shape of one layer as seen by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub variant: Variant,
    pub d_model: u64,
    pub d_inner: u64,
    pub n_state: u64,
    pub n_readout: u64,
    pub d_conv: u64,
    pub n_heads: u64,
    pub bridged: bool,
    pub out_norm: bool,
}

impl LayerDims {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        LayerDims {
            variant: cfg.variant,
            d_model: cfg.d_model as u64,
            d_inner: cfg.d_inner() as u64,
            n_state: cfg.d_state as u64,
            n_readout: cfg.d_state as u64,
            d_conv: cfg.d_conv as u64,
            n_heads: cfg.n_heads as u64,
            bridged: false,
            out_norm: cfg.variant == Variant::Mamba2,
        }
    }

    pub fn from_layer<T: Real>(cfg: &ModelConfig, layer: &LayerParams<T>) -> Self {
        LayerDims {
            n_state: layer.n_state() as u64,
            n_readout: layer.n_readout() as u64,
            d_conv: layer.w_conv.ncols() as u64,
            bridged: layer.bridge.is_some(),
            out_norm: layer.w_out_norm.is_some(),
            ..LayerDims::from_config(cfg)
        }
    }

    fn projection_rows(&self) -> u64 {
        ProjectionLayout {
            d_inner: self.d_inner as usize,
            n_state: self.n_state as usize,
            n_readout: self.n_readout as usize,
        }
        .rows() as u64
    }
}

/// One component's cost for a `(B, L, mode)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub component: Component,
    pub mode: Mode,
    pub flops: u64,
    pub activation_bytes: u64,
    pub parameter_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostModel {
    pub convention: FlopConvention,
    pub state_block: StateBlock,
}

fn tokens(batch: u64, seq_len: u64, mode: Mode) -> u64 {
    match mode {
        Mode::Prefill => batch * seq_len,
        Mode::Decode => batch,
    }
}

impl CostModel {
    pub fn new(convention: FlopConvention, state_block: StateBlock) -> Self {
        CostModel {
            convention,
            state_block,
        }
    }

    /// FLOPs of one token through one layer.
    pub fn token_flops(&self, dims: &LayerDims, component: Component) -> u64 {
        let LayerDims {
            d_model: dm,
            d_inner: d,
            n_state: n,
            n_readout: r,
            d_conv: k,
            n_heads: h,
            ..
        } = *dims;
        match component {
            Component::RMSNorm => 4 * dm + 4,
            Component::GatedMLP => {
                let norm = if dims.out_norm { 4 * d + 4 } else { 0 };
                2 * dm * dims.projection_rows() + 2 * d + norm
            }
            Component::ConvTransform => 2 * d * k + d,
            Component::StateSpace => match self.convention {
                FlopConvention::Executed => {
                    let bridge = if dims.bridged { 2 * r * n * d } else { 0 };
                    n * (3 * d + 4) + 2 * r * d + bridge
                }
                FlopConvention::ReferenceKernels => match dims.variant {
                    Variant::Mamba1 => 8 * d * n + d,
                    Variant::Mamba2 => 5 * d * n + h * n + 3 * h,
                },
            },
            Component::FinalLinear => 2 * dm * d + dm,
        }
    }

    pub fn layer_flops(&self, dims: &LayerDims, component: Component, batch: u64, seq_len: u64, mode: Mode) -> u64 {
        tokens(batch, seq_len, mode) * self.token_flops(dims, component)
    }

    /// Activation elements a layer's component holds live for one call.
    pub fn layer_activation_elems(&self, dims: &LayerDims, component: Component, batch: u64, seq_len: u64, mode: Mode) -> u64 {
        let bl = tokens(batch, seq_len, mode);
        let len = if mode == Mode::Decode { 1 } else { seq_len };
        let LayerDims {
            d_model: dm,
            d_inner: d,
            n_state: n,
            d_conv: k,
            ..
        } = *dims;
        match component {
            Component::RMSNorm => bl * (dm + 1),
            Component::GatedMLP => bl * dims.projection_rows() + bl * d,
            Component::ConvTransform => bl * d + batch * d * (k - 1),
            Component::StateSpace => 3 * bl * n + bl * d + batch * self.state_block.len(len) * d * n,
            Component::FinalLinear => bl * dm,
        }
    }

    pub fn layer_parameter_elems(&self, dims: &LayerDims, component: Component) -> u64 {
        let LayerDims {
            d_model: dm,
            d_inner: d,
            n_state: n,
            n_readout: r,
            d_conv: k,
            ..
        } = *dims;
        match component {
            Component::RMSNorm => dm,
            Component::GatedMLP => dims.projection_rows() * dm + if dims.out_norm { d } else { 0 },
            Component::ConvTransform => d * k + d,
            Component::StateSpace => n + if dims.bridged { r * n } else { 0 },
            Component::FinalLinear => dm * d,
        }
    }

    fn sum_layers(dims: &[LayerDims], f: impl Fn(&LayerDims) -> u64) -> u64 {
        dims.iter().map(f).sum()
    }

    /// Whole-model estimate over explicit per-layer shapes.
    pub fn estimate_layers(
        &self,
        dims: &[LayerDims],
        component: Component,
        batch: u64,
        seq_len: u64,
        mode: Mode,
        bytes_per_element: u64,
    ) -> CostEstimate {
        CostEstimate {
            component,
            mode,
            flops: Self::sum_layers(dims, |l| self.layer_flops(l, component, batch, seq_len, mode)),
            activation_bytes: bytes_per_element
                * Self::sum_layers(dims, |l| self.layer_activation_elems(l, component, batch, seq_len, mode)),
            parameter_bytes: bytes_per_element * Self::sum_layers(dims, |l| self.layer_parameter_elems(l, component)),
        }
    }

    pub fn flops(&self, cfg: &ModelConfig, component: Component, batch: u64, seq_len: u64, mode: Mode) -> u64 {
        cfg.n_layers as u64 * self.layer_flops(&LayerDims::from_config(cfg), component, batch, seq_len, mode)
    }

    pub fn memory(&self, cfg: &ModelConfig, component: Component, batch: u64, seq_len: u64, mode: Mode, bytes_per_element: u64) -> u64 {
        cfg.n_layers as u64
            * bytes_per_element
            * self.layer_activation_elems(&LayerDims::from_config(cfg), component, batch, seq_len, mode)
    }
}

/// Per-layer shapes of an actual (possibly pruned) model.
pub fn model_dims<T: Real>(model: &Model<T>) -> Vec<LayerDims> {
    model.layers.iter().map(|l| LayerDims::from_layer(&model.config, l)).collect()
}

/// Executed-convention FLOPs of one component over all layers.
pub fn estimate_flops(cfg: &ModelConfig, component: Component, batch: u64, seq_len: u64, mode: Mode) -> u64 {
    CostModel::default().flops(cfg, component, batch, seq_len, mode)
}

/// Activation bytes of one component over all layers, one state per sequence.
pub fn estimate_memory(cfg: &ModelConfig, component: Component, batch: u64, seq_len: u64, mode: Mode, bytes_per_element: u64) -> u64 {
    CostModel::default().memory(cfg, component, batch, seq_len, mode, bytes_per_element)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Scalar;
    use crate::ssm::ops::softplus_gate;
    use crate::ssm::scan::{selective_scan_prefill, selective_scan_step};
    use ndarray::{Array, Array1, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;
    use std::ops::{Add, Div, Mul, Neg, Sub};

    thread_local! {
        static OPS: Cell<u64> = const { Cell::new(0) };
    }

    fn tick() {
        OPS.with(|c| c.set(c.get() + 1));
    }

    fn take_ops() -> u64 {
        OPS.with(|c| c.replace(0))
    }

    /// f64 wrapper that counts every arithmetic operation.
    #[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
    struct Counted(f64);

    macro_rules! counted_binop {
        ($tr:ident, $m:ident, $op:tt) => {
            impl $tr for Counted {
                type Output = Counted;
                fn $m(self, o: Counted) -> Counted {
                    tick();
                    Counted(self.0 $op o.0)
                }
            }
        };
    }
    counted_binop!(Add, add, +);
    counted_binop!(Sub, sub, -);
    counted_binop!(Mul, mul, *);
    counted_binop!(Div, div, /);

    impl Neg for Counted {
        type Output = Counted;
        fn neg(self) -> Counted {
            tick();
            Counted(-self.0)
        }
    }

    impl Scalar for Counted {
        const SOFTPLUS_LINEAR_ABOVE: f64 = 40.0;
        fn zero() -> Self {
            Counted(0.0)
        }
        fn one() -> Self {
            Counted(1.0)
        }
        fn from_f64(v: f64) -> Self {
            Counted(v)
        }
        fn to_f64(self) -> f64 {
            self.0
        }
        fn exp(self) -> Self {
            tick();
            Counted(self.0.exp())
        }
        fn sqrt(self) -> Self {
            tick();
            Counted(self.0.sqrt())
        }
        fn softplus(self) -> Self {
            tick();
            Counted(Scalar::softplus(self.0))
        }
        fn silu(self) -> Self {
            tick();
            Counted(Scalar::silu(self.0))
        }
        fn is_finite(self) -> bool {
            self.0.is_finite()
        }
    }

    fn counted(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array2<Counted> {
        Array::from_shape_simple_fn((rows, cols), || Counted(rng.random_range(lo..hi)))
    }

    /// Operations of the state-space phase: softplus gate, discretization, scan.
    fn count_state_space(len: usize, n: usize, d: usize, seed: u64) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = counted(len, d, -1.0, 1.0, &mut rng);
        let b = counted(len, n, -1.0, 1.0, &mut rng);
        let c = counted(len, n, -1.0, 1.0, &mut rng);
        let raw = counted(len, n, -2.0, 2.0, &mut rng);
        let a = Array1::from_shape_fn(n, |s| Counted(-((s + 1) as f64)));
        let h0 = Array2::from_elem((d, n), Counted(0.0));
        take_ops();
        let delta = softplus_gate(raw.view()).unwrap();
        selective_scan_prefill(u.view(), b.view(), c.view(), delta.view(), a.view(), h0.view()).unwrap();
        take_ops()
    }

    fn dims(d: usize, n: usize) -> LayerDims {
        LayerDims::from_config(&ModelConfig::new(Variant::Mamba1, d / 2, n, 1))
    }

    #[test]
    fn state_space_formula_matches_counted_scan() {
        for &(len, n, d) in &[(1, 1, 2), (7, 4, 6), (16, 8, 10), (33, 3, 4)] {
            let counted = count_state_space(len, n, d, len as u64);
            let model = CostModel::default().layer_flops(&dims(d, n), Component::StateSpace, 1, len as u64, Mode::Prefill);
            assert_eq!(counted, model, "L={len} n={n} d={d}");
        }
    }

    #[test]
    fn decode_step_cost_is_position_independent() {
        let (n, d) = (4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Array1::from_shape_fn(n, |s| Counted(-((s + 1) as f64)));
        let mut h = Array2::from_elem((d, n), Counted(0.0));
        let per_step = CostModel::default().layer_flops(&dims(d, n), Component::StateSpace, 1, 1, Mode::Decode);
        for _ in 0..50 {
            let u = counted(1, d, -1.0, 1.0, &mut rng);
            let b = counted(1, n, -1.0, 1.0, &mut rng);
            let c = counted(1, n, -1.0, 1.0, &mut rng);
            let raw = counted(1, n, -2.0, 2.0, &mut rng);
            take_ops();
            let delta = softplus_gate(raw.view()).unwrap();
            selective_scan_step(u.row(0), b.row(0), c.row(0), delta.row(0), a.view(), &mut h).unwrap();
            assert_eq!(take_ops(), per_step);
        }
    }

    #[test]
    fn rmsnorm_same_for_both_variants() {
        let m1 = ModelConfig::scale_130m(Variant::Mamba1);
        let m2 = ModelConfig::scale_130m(Variant::Mamba2);
        for conv in [FlopConvention::Executed, FlopConvention::ReferenceKernels] {
            let cm = CostModel::new(conv, StateBlock::Step);
            assert_eq!(
                cm.flops(&m1, Component::RMSNorm, 1, 2048, Mode::Prefill),
                cm.flops(&m2, Component::RMSNorm, 1, 2048, Mode::Prefill)
            );
        }
    }

    #[test]
    fn rmsnorm_memory_ratio() {
        let cfg = ModelConfig::scale_130m(Variant::Mamba1);
        let small = estimate_memory(&cfg, Component::RMSNorm, 1, 64, Mode::Prefill, 4);
        let large = estimate_memory(&cfg, Component::RMSNorm, 1, 2048, Mode::Prefill, 4);
        assert_eq!(large, 32 * small);
        assert!(((large as f64 / small as f64) / 31.5 - 1.0).abs() < 0.05);
    }

    #[test]
    fn zero_batch_costs_nothing() {
        let cfg = ModelConfig::scale_130m(Variant::Mamba2);
        for c in Component::ALL {
            for mode in [Mode::Prefill, Mode::Decode] {
                assert_eq!(estimate_memory(&cfg, c, 0, 512, mode, 2), 0);
                assert_eq!(estimate_flops(&cfg, c, 0, 512, mode), 0);
            }
        }
    }

    #[test]
    fn state_block_knob() {
        let cfg = ModelConfig::new(Variant::Mamba1, 4, 3, 1);
        let dims = LayerDims::from_config(&cfg);
        let at = |sb| CostModel::new(FlopConvention::Executed, sb).layer_activation_elems(&dims, Component::StateSpace, 2, 10, Mode::Prefill);
        let states = |blk: u64| 2 * blk * 8 * 3;
        let base = 3 * 20 * 3 + 20 * 8;
        assert_eq!(at(StateBlock::Step), base + states(1));
        assert_eq!(at(StateBlock::Chunk(4)), base + states(4));
        assert_eq!(at(StateBlock::Chunk(64)), base + states(10));
        assert_eq!(at(StateBlock::Full), base + states(10));
    }

    #[test]
    fn reference_ratio_at_130m_dims() {
        let cm = CostModel::new(FlopConvention::ReferenceKernels, StateBlock::Step);
        let m1 = cm.flops(&ModelConfig::scale_130m(Variant::Mamba1), Component::StateSpace, 1, 2048, Mode::Prefill);
        let m2 = cm.flops(&ModelConfig::scale_130m(Variant::Mamba2), Component::StateSpace, 1, 2048, Mode::Prefill);
        let ratio = m2 as f64 / m1 as f64;
        assert!((ratio / (1566.55 / 2193.73) - 1.0).abs() < 0.15, "{ratio}");
    }

    #[test]
    fn pruned_state_space_scales_with_kept_states() {
        let cfg = ModelConfig::scale_130m(Variant::Mamba1);
        let dense = LayerDims::from_config(&cfg);
        let cm = CostModel::default();
        for k in [1u64, 13, 64, 115, 128] {
            let pruned = LayerDims {
                n_state: k,
                n_readout: k,
                ..dense
            };
            let full = cm.layer_flops(&dense, Component::StateSpace, 1, 4096, Mode::Prefill);
            let small = cm.layer_flops(&pruned, Component::StateSpace, 1, 4096, Mode::Prefill);
            assert_eq!(small * 128, full * k);
        }
    }

    proptest! {
        #[test]
        fn flops_linear_in_length(
            d in 1usize..64, n in 1usize..32, k in 1usize..6, b in 0u64..4, l in 1u64..5000,
            conv in prop_oneof![Just(FlopConvention::Executed), Just(FlopConvention::ReferenceKernels)],
        ) {
            let cfg = ModelConfig::new(Variant::Mamba1, d, n, 3).with_conv(k);
            let cm = CostModel::new(conv, StateBlock::Step);
            for c in Component::ALL {
                prop_assert_eq!(cm.flops(&cfg, c, b, 2 * l, Mode::Prefill), 2 * cm.flops(&cfg, c, b, l, Mode::Prefill));
                prop_assert_eq!(cm.flops(&cfg, c, b, l, Mode::Decode), cm.flops(&cfg, c, b, 1, Mode::Prefill));
            }
        }

        #[test]
        fn state_costs_shrink_with_fewer_states(d in 1u64..64, n in 2u64..64, l in 1u64..1000, cut in 1u64..64) {
            let cfg = ModelConfig::new(Variant::Mamba1, d as usize, n as usize, 1);
            let dense = LayerDims::from_config(&cfg);
            let k = n - cut.min(n - 1);
            let pruned = LayerDims { n_state: k, n_readout: k, ..dense };
            for sb in [StateBlock::Step, StateBlock::Full] {
                let cm = CostModel::new(FlopConvention::Executed, sb);
                prop_assert!(cm.layer_flops(&pruned, Component::StateSpace, 1, l, Mode::Prefill) < cm.layer_flops(&dense, Component::StateSpace, 1, l, Mode::Prefill));
                prop_assert!(cm.layer_activation_elems(&pruned, Component::StateSpace, 1, l, Mode::Prefill) < cm.layer_activation_elems(&dense, Component::StateSpace, 1, l, Mode::Prefill));
            }
        }
    }
}
