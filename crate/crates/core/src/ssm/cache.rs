use ndarray::Array2;

use crate::scalar::{Real, Scalar};
use crate::ssm::params::Model;
use crate::ssm::scan::zero_state;

/// Recurrent state of one block for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<T> {
    /// `d_inner x n`, stored state-major.
    pub h: Array2<T>,
    /// The `k - 1` most recent pre-convolution inputs, `d_inner x (k - 1)`, oldest first.
    pub conv_tail: Array2<T>,
}

impl<T: Real> LayerCache<T> {
    pub fn new(d_inner: usize, n_state: usize, d_conv: usize) -> Self {
        LayerCache {
            h: zero_state(d_inner, n_state),
            conv_tail: Array2::zeros((d_inner, d_conv - 1)),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.h.iter().chain(&self.conv_tail).all(|&v| v == <T as Scalar>::zero())
    }
}

/// Per-sequence decode state for every block.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeCache<T> {
    pub layers: Vec<LayerCache<T>>,
    /// Tokens consumed so far.
    pub position: usize,
}

impl<T: Real> DecodeCache<T> {
    /// Zeroed cache sized for `model`, including pruned state widths.
    pub fn new(model: &Model<T>) -> Self {
        let cfg = &model.config;
        DecodeCache {
            layers: model
                .layers
                .iter()
                .map(|l| LayerCache::new(cfg.d_inner(), l.n_state(), cfg.d_conv))
                .collect(),
            position: 0,
        }
    }

    pub fn batch(model: &Model<T>, batch: usize) -> Vec<Self> {
        vec![DecodeCache::new(model); batch]
    }

    /// Bytes held by the recurrent and convolution buffers.
    pub fn bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| (l.h.len() + l.conv_tail.len()) * std::mem::size_of::<T>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::config::{ModelConfig, Variant};

    #[test]
    fn fresh_cache_is_zero_and_sized() {
        let m = Model::<f32>::random(ModelConfig::new(Variant::Mamba1, 4, 3, 2), 0).unwrap();
        let c = DecodeCache::new(&m);
        assert_eq!(c.layers.len(), 2);
        assert!(c.layers.iter().all(LayerCache::is_zero));
        assert_eq!(c.layers[0].h.dim(), (8, 3));
        assert_eq!(c.layers[0].conv_tail.dim(), (8, 3));
        assert_eq!(c.bytes(), 2 * (24 + 24) * 4);
    }
}
