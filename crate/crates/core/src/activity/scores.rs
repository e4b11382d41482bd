//! Mean step size per state and per head group.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::record::{ActivityRecord, ModeFilter};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub layer: usize,
    /// Mean step size of each state.
    pub scores: Vec<f64>,
    /// Mean of `scores` within each contiguous head group.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_scores: Option<Vec<f64>>,
    pub n_samples: u64,
}

/// Where the scored activity came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityMeta {
    pub dataset: String,
    pub seed: Option<u64>,
    pub modes: ModeFilter,
    pub n_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityScores {
    pub n_layers: usize,
    /// Scored layers in index order; layers without samples are absent.
    pub layers: Vec<LayerScores>,
    pub meta: ActivityMeta,
}

/// Average each layer's recorded step sizes.
///
/// With `n_heads`, states are also grouped into `n_heads` contiguous blocks
/// and each block's scores averaged. Layers with no samples under `filter`
/// are left out; a record with no samples at all is an error.
pub fn activity_scores(record: &ActivityRecord, filter: ModeFilter, n_heads: Option<usize>) -> Result<ActivityScores> {
    let mut layers = Vec::new();
    for (i, layer) in record.layers().iter().enumerate() {
        let sums = layer.sums(filter);
        let Some(scores) = sums.means() else { continue };
        let head_scores = n_heads.map(|h| head_means(&scores, h)).transpose()?;
        layers.push(LayerScores {
            layer: i,
            scores,
            head_scores,
            n_samples: sums.count,
        });
    }
    if layers.is_empty() {
        return Err(Error::NoActivity);
    }
    let n_samples = layers.iter().map(|l| l.n_samples).sum();
    Ok(ActivityScores {
        n_layers: record.n_layers(),
        layers,
        meta: ActivityMeta {
            dataset: "unspecified".into(),
            seed: None,
            modes: filter,
            n_samples,
        },
    })
}

/// Mean of each of `n_heads` equal contiguous slices of `scores`.
pub fn head_means(scores: &[f64], n_heads: usize) -> Result<Vec<f64>> {
    if n_heads == 0 || scores.len() % n_heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "{} states do not split into {n_heads} equal head groups",
            scores.len()
        )));
    }
    let size = scores.len() / n_heads;
    Ok(scores.chunks(size).map(|g| g.iter().sum::<f64>() / size as f64).collect())
}

impl ActivityScores {
    pub fn with_source(mut self, dataset: impl Into<String>, seed: Option<u64>) -> Self {
        self.meta.dataset = dataset.into();
        self.meta.seed = seed;
        self
    }

    pub fn layer(&self, index: usize) -> Option<&LayerScores> {
        self.layers.iter().find(|l| l.layer == index)
    }

    /// Indices in `0..n_layers` with no scores.
    pub fn missing_layers(&self) -> Vec<usize> {
        (0..self.n_layers).filter(|&i| self.layer(i).is_none()).collect()
    }

    /// Scores for every layer in order, or the indices that have none.
    pub fn complete(&self) -> Result<Vec<&LayerScores>> {
        let missing = self.missing_layers();
        if !missing.is_empty() {
            return Err(Error::MissingLayers(missing));
        }
        Ok((0..self.n_layers).map(|i| self.layer(i).expect("checked")).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format("activity scores", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: ActivityScores = serde_json::from_str(text).map_err(|e| Error::format("activity scores", e))?;
        if let Some(l) = s.layers.iter().find(|l| l.layer >= s.n_layers) {
            return Err(Error::format("activity scores", format!("layer {} of {}", l.layer, s.n_layers)));
        }
        Ok(s)
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scores serialize");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
