use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Real, Scalar};
use crate::ssm::config::{InputMode, ModelConfig, Variant};
use crate::ssm::ops::ProjectionLayout;

/// Weights of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    /// RMSNorm scale, length `D`.
    pub w_norm: Array1<T>,
    /// Fused projection, `(2 d_inner + 2 n + n_readout) x D`, rows `[z | u | B | C | delta]`.
    pub w_in: Array2<T>,
    /// Depthwise kernel `d_inner x k`; column 0 is the current-token tap.
    pub w_conv: Array2<T>,
    pub conv_bias: Array1<T>,
    /// Diagonal of `A`, one strictly negative entry per state.
    pub a_diag: Array1<T>,
    /// Output projection `D x d_inner`.
    pub w_out: Array2<T>,
    /// Post-scan normalization scale (Mamba-2 only), length `d_inner`.
    pub w_out_norm: Option<Array1<T>>,
    /// `N x n` scatter from kept states back to the original read-out width.
    pub bridge: Option<Array2<T>>,
    /// `false` marks a state frozen at zero.
    pub state_mask: Option<Vec<bool>>,
}

impl<T: Real> LayerParams<T> {
    pub fn n_state(&self) -> usize {
        self.a_diag.len()
    }

    pub fn d_inner(&self) -> usize {
        self.w_conv.nrows()
    }

    pub fn n_readout(&self) -> usize {
        self.bridge.as_ref().map_or(self.n_state(), |b| b.nrows())
    }

    pub fn layout(&self) -> ProjectionLayout {
        ProjectionLayout {
            d_inner: self.d_inner(),
            n_state: self.n_state(),
            n_readout: self.n_readout(),
        }
    }

    /// States that actually evolve: all of them unless masked.
    pub fn n_active(&self) -> usize {
        self.state_mask
            .as_ref()
            .map_or(self.n_state(), |m| m.iter().filter(|&&k| k).count())
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, di, n, k) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.d_conv);
        LayerParams {
            w_norm: Array1::zeros(d),
            w_in: Array2::zeros((ProjectionLayout::dense(di, n).rows(), d)),
            w_conv: Array2::zeros((di, k)),
            conv_bias: Array1::zeros(di),
            a_diag: default_a(n),
            w_out: Array2::zeros((d, di)),
            w_out_norm: (cfg.variant == Variant::Mamba2).then(|| Array1::zeros(di)),
            bridge: None,
            state_mask: None,
        }
    }

    pub fn random<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, di, n, k) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.d_conv);
        let rows = ProjectionLayout::dense(di, n).rows();
        let in_dist = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("positive std");
        let out_dist = Normal::new(0.0, (1.0 / di as f64).sqrt()).expect("positive std");
        let conv_bound = 1.0 / (k as f64).sqrt();
        let w_in = Array2::from_shape_simple_fn((rows, d), || T::from_f64(in_dist.sample(rng)));
        let w_conv = Array2::from_shape_simple_fn((di, k), || T::from_f64(rng.random_range(-conv_bound..conv_bound)));
        let conv_bias = Array1::from_shape_simple_fn(di, || T::from_f64(rng.random_range(-conv_bound..conv_bound)));
        let w_out = Array2::from_shape_simple_fn((d, di), || T::from_f64(out_dist.sample(rng)));
        LayerParams {
            w_norm: Array1::ones(d),
            w_in,
            w_conv,
            conv_bias,
            a_diag: default_a(n),
            w_out,
            w_out_norm: (cfg.variant == Variant::Mamba2).then(|| Array1::ones(di)),
            bridge: None,
            state_mask: None,
        }
    }

    pub fn cast<U: Real>(&self) -> LayerParams<U> {
        let c1 = |a: &Array1<T>| a.mapv(|v| U::from_f64(v.to_f64()));
        let c2 = |a: &Array2<T>| a.mapv(|v| U::from_f64(v.to_f64()));
        LayerParams {
            w_norm: c1(&self.w_norm),
            w_in: c2(&self.w_in),
            w_conv: c2(&self.w_conv),
            conv_bias: c1(&self.conv_bias),
            a_diag: c1(&self.a_diag),
            w_out: c2(&self.w_out),
            w_out_norm: self.w_out_norm.as_ref().map(c1),
            bridge: self.bridge.as_ref().map(c2),
            state_mask: self.state_mask.clone(),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig, index: usize) -> Result<()> {
        let bad = |what: String| Err(Error::shape(format!("layer {index}: {what}")));
        let (d, di, k) = (cfg.d_model, cfg.d_inner(), cfg.d_conv);
        let n = self.n_state();
        if n == 0 {
            return bad("no state channels".into());
        }
        if self.w_norm.len() != d {
            return bad(format!("w_norm length {} != {d}", self.w_norm.len()));
        }
        if self.w_in.dim() != (self.layout().rows(), d) {
            return bad(format!("w_in {:?} != ({}, {d})", self.w_in.dim(), self.layout().rows()));
        }
        if self.w_conv.dim() != (di, k) || self.conv_bias.len() != di {
            return bad(format!("conv {:?} / bias {} vs ({di}, {k})", self.w_conv.dim(), self.conv_bias.len()));
        }
        if self.w_out.dim() != (d, di) {
            return bad(format!("w_out {:?} != ({d}, {di})", self.w_out.dim()));
        }
        if let Some(w) = &self.w_out_norm {
            if w.len() != di {
                return bad(format!("w_out_norm length {} != {di}", w.len()));
            }
        }
        if let Some(m) = &self.state_mask {
            if m.len() != n {
                return bad(format!("state mask length {} != {n}", m.len()));
            }
        }
        if let Some(b) = &self.bridge {
            if b.ncols() != n || b.nrows() < n {
                return bad(format!("bridge {:?} for {n} kept states", b.dim()));
            }
        }
        if let Some((s, a)) = self.a_diag.iter().enumerate().find(|(_, a)| !(**a < <T as Scalar>::zero())) {
            return Err(Error::UnstableTransition(format!("layer {index}: a[{s}] = {a} must be negative")));
        }
        Ok(())
    }
}

/// `a_s = -(s + 1)`.
pub fn default_a<T: Real>(n: usize) -> Array1<T> {
    Array1::from_shape_fn(n, |s| T::from_f64(-((s + 1) as f64)))
}

/// Record attached to a model produced by state pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningMeta {
    /// `sparse`, `bridged` or `optimized`.
    pub variant: String,
    pub ratio: f64,
    /// State count before pruning.
    pub original_state: usize,
    /// Hash of the plan that produced the model.
    pub plan_sha256: String,
}

/// A stack of blocks plus optional token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    /// `vocab x D`, present in embedded-token mode.
    pub embedding: Option<Array2<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub pruning: Option<PruningMeta>,
}

impl<T: Real> Model<T> {
    /// Seeded random weights: `w_in ~ N(0, 1/D)`, `w_out ~ N(0, 1/d_inner)`,
    /// unit norm scales, conv taps `U(-1/sqrt(k), 1/sqrt(k))`, `a_s = -(s+1)`.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = match config.input {
            InputMode::RawVectors => None,
            InputMode::EmbeddedTokens { vocab_size } => {
                let dist = Normal::new(0.0, 1.0).expect("unit std");
                Some(Array2::from_shape_simple_fn((vocab_size, config.d_model), || {
                    T::from_f64(dist.sample(&mut rng))
                }))
            }
        };
        let layers = (0..config.n_layers).map(|_| LayerParams::random(&config, &mut rng)).collect();
        Ok(Model {
            config,
            embedding,
            layers,
            pruning: None,
        })
    }

    /// All-zero weights (with the default stable `a`); every block is the identity.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let embedding = match config.input {
            InputMode::RawVectors => None,
            InputMode::EmbeddedTokens { vocab_size } => Some(Array2::zeros((vocab_size, config.d_model))),
        };
        let layers = (0..config.n_layers).map(|_| LayerParams::zeros(&config)).collect();
        Ok(Model {
            config,
            embedding,
            layers,
            pruning: None,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            embedding: self.embedding.as_ref().map(|e| e.mapv(|v| U::from_f64(v.to_f64()))),
            layers: self.layers.iter().map(LayerParams::cast).collect(),
            pruning: self.pruning.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.n_layers {
            return Err(Error::shape(format!(
                "{} layers stored, config says {}",
                self.layers.len(),
                self.config.n_layers
            )));
        }
        match (self.config.input, &self.embedding) {
            (InputMode::RawVectors, None) => {}
            (InputMode::EmbeddedTokens { vocab_size }, Some(e)) if e.dim() == (vocab_size, self.config.d_model) => {}
            _ => return Err(Error::shape("embedding table does not match input mode")),
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(&self.config, i)?;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let per_layer: usize = self
            .layers
            .iter()
            .map(|l| {
                l.w_norm.len()
                    + l.w_in.len()
                    + l.w_conv.len()
                    + l.conv_bias.len()
                    + l.a_diag.len()
                    + l.w_out.len()
                    + l.w_out_norm.as_ref().map_or(0, |w| w.len())
                    + l.bridge.as_ref().map_or(0, |b| b.len())
            })
            .sum();
        per_layer + self.embedding.as_ref().map_or(0, |e| e.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_model_is_valid_and_seeded() {
        let cfg = ModelConfig::new(Variant::Mamba2, 8, 4, 2).with_heads(2);
        let a = Model::<f64>::random(cfg.clone(), 3).unwrap();
        a.validate().unwrap();
        assert_eq!(a, Model::random(cfg.clone(), 3).unwrap());
        assert_ne!(a, Model::random(cfg, 4).unwrap());
        assert_eq!(a.layers[0].w_in.dim(), (2 * 16 + 3 * 4, 8));
        assert!(a.layers[0].w_out_norm.is_some());
    }

    #[test]
    fn mamba1_has_no_output_norm() {
        let m = Model::<f32>::random(ModelConfig::new(Variant::Mamba1, 4, 2, 1), 0).unwrap();
        assert!(m.layers[0].w_out_norm.is_none());
    }

    #[test]
    fn positive_transition_rejected() {
        let mut m = Model::<f64>::zeros(ModelConfig::new(Variant::Mamba1, 4, 3, 1)).unwrap();
        m.layers[0].a_diag[1] = 0.0;
        assert!(matches!(m.validate(), Err(Error::UnstableTransition(_))));
    }

    #[test]
    fn cast_round_trip_f64_f32_f64() {
        let m = Model::<f64>::random(ModelConfig::new(Variant::Mamba1, 4, 2, 1), 9).unwrap();
        let back: Model<f64> = m.cast::<f32>().cast();
        for (a, b) in m.layers[0].w_in.iter().zip(&back.layers[0].w_in) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn embedding_follows_input_mode() {
        let mut cfg = ModelConfig::new(Variant::Mamba1, 4, 2, 1);
        cfg.input = InputMode::EmbeddedTokens { vocab_size: 10 };
        let m = Model::<f64>::random(cfg, 1).unwrap();
        assert_eq!(m.embedding.as_ref().unwrap().dim(), (10, 4));
        m.validate().unwrap();
    }
}
