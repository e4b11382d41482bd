//! Which states each layer keeps, and why.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::select::{check_ratio, keep_count, rank_desc, select_states};
use crate::activity::scores::{head_means, ActivityScores};
use crate::error::{Error, Result};
use crate::ssm::config::{ModelConfig, Variant};

pub const PLAN_FORMAT: &str = "ssmprune-plan";
pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    #[default]
    PerState,
    PerHead,
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-state" => Ok(HeadMode::PerState),
            "per-head" => Ok(HeadMode::PerHead),
            other => Err(Error::format("head mode", format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub n_state: usize,
    /// Kept state indices, strictly increasing.
    pub keep: Vec<usize>,
    /// Layer-specific ratio, when it differs from the plan's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
}

impl LayerPlan {
    pub fn is_identity(&self) -> bool {
        self.keep.len() == self.n_state
    }

    pub fn kept_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.n_state];
        for &s in &self.keep {
            m[s] = true;
        }
        m
    }

    fn validate(&self, layer: usize) -> Result<()> {
        let bad = |why: String| Err(Error::PlanMismatch(format!("layer {layer}: {why}")));
        if self.keep.is_empty() {
            return bad("keeps no state".into());
        }
        for w in self.keep.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DuplicateIndex(w[0]));
            }
            if w[0] > w[1] {
                return bad(format!("keep list not increasing at {} > {}", w[0], w[1]));
            }
        }
        if let Some(&s) = self.keep.iter().find(|&&s| s >= self.n_state) {
            return bad(format!("state {s} out of range for {} states", self.n_state));
        }
        Ok(())
    }
}

/// What the scores behind a plan were computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scores_sha256: String,
    pub dataset: String,
    pub seed: Option<u64>,
    pub n_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub format: String,
    pub version: u32,
    pub ratio: f64,
    pub head_mode: HeadMode,
    /// Always `selection-transpose`: column `j` of the bridge is the unit
    /// vector of state `keep[j]`.
    pub bridge: String,
    pub layers: Vec<LayerPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl PruningPlan {
    /// Plan from explicit keep lists.
    pub fn from_keep(ratio: f64, layers: Vec<LayerPlan>) -> Result<Self> {
        let plan = PruningPlan {
            format: PLAN_FORMAT.into(),
            version: PLAN_VERSION,
            ratio,
            head_mode: HeadMode::PerState,
            bridge: "selection-transpose".into(),
            layers,
            provenance: None,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Keep every state of every layer.
    pub fn identity(n_state: &[usize]) -> Self {
        let layers = n_state
            .iter()
            .map(|&n| LayerPlan {
                n_state: n,
                keep: (0..n).collect(),
                ratio: None,
            })
            .collect();
        PruningPlan::from_keep(0.0, layers).expect("identity plan is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != PLAN_FORMAT || self.version != PLAN_VERSION {
            return Err(Error::format("pruning plan", format!("unsupported {} v{}", self.format, self.version)));
        }
        if self.bridge != "selection-transpose" {
            return Err(Error::format("pruning plan", format!("unsupported bridge {:?}", self.bridge)));
        }
        check_ratio(self.ratio)?;
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(i)?;
        }
        Ok(())
    }

    pub fn kept_total(&self) -> usize {
        self.layers.iter().map(|l| l.keep.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format("pruning plan", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: PruningPlan = serde_json::from_str(text).map_err(|e| Error::format("pruning plan", e))?;
        plan.validate()?;
        Ok(plan)
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("plan serializes")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Head groups kept when `floor(H r)` of the `H` lowest-scoring are dropped.
pub fn select_heads(head_scores: &[f64], ratio: f64) -> Result<Vec<usize>> {
    check_ratio(ratio)?;
    let h = head_scores.len();
    let pruned = (h as f64 * ratio + super::select::KEEP_SNAP).floor() as usize;
    if pruned >= h {
        return Err(Error::RatioTooAggressive { ratio, n: h });
    }
    let mut keep = rank_desc(head_scores);
    keep.truncate(h - pruned);
    keep.sort_unstable();
    Ok(keep)
}

/// One shared ratio applied to every layer's scores.
///
/// Per-state mode keeps each layer's top `floor(N (1 - r))` states. Per-head
/// mode (Mamba-2 only) drops whole contiguous head groups, so the kept states
/// stay aligned to heads.
pub fn plan_from_activity(scores: &ActivityScores, ratio: f64, head_mode: HeadMode, cfg: &ModelConfig) -> Result<PruningPlan> {
    check_ratio(ratio)?;
    if head_mode == HeadMode::PerHead && cfg.variant != Variant::Mamba2 {
        return Err(Error::HeadModeUnsupported);
    }
    let layers = scores.complete()?;
    if scores.n_layers != cfg.n_layers {
        return Err(Error::PlanMismatch(format!(
            "scores cover {} layers, model has {}",
            scores.n_layers, cfg.n_layers
        )));
    }
    let mut out = Vec::with_capacity(layers.len());
    for ls in layers {
        let n = ls.scores.len();
        let keep = match head_mode {
            HeadMode::PerState => select_states(&ls.scores, ratio)?,
            HeadMode::PerHead => {
                let heads = match &ls.head_scores {
                    Some(h) if h.len() == cfg.n_heads => h.clone(),
                    _ => head_means(&ls.scores, cfg.n_heads)?,
                };
                let size = n / cfg.n_heads;
                select_heads(&heads, ratio)?
                    .into_iter()
                    .flat_map(|h| h * size..(h + 1) * size)
                    .collect()
            }
        };
        out.push(LayerPlan {
            n_state: n,
            keep,
            ratio: None,
        });
    }
    let mut plan = PruningPlan::from_keep(ratio, out)?;
    plan.head_mode = head_mode;
    plan.provenance = Some(Provenance {
        scores_sha256: scores.sha256(),
        dataset: scores.meta.dataset.clone(),
        seed: scores.meta.seed,
        n_samples: scores.meta.n_samples,
    });
    Ok(plan)
}

/// Sanity check used before surgery: the plan's per-layer keep count
/// matches `floor(N (1 - r))` unless the layer carries its own ratio.
pub fn expected_keep(layer: &LayerPlan, plan_ratio: f64) -> Result<usize> {
    keep_count(layer.n_state, layer.ratio.unwrap_or(plan_ratio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activity::record::ModeFilter;
    use crate::activity::scores::{ActivityMeta, LayerScores};

    fn scores_of(rows: Vec<Vec<f64>>, heads: Option<usize>) -> ActivityScores {
        ActivityScores {
            n_layers: rows.len(),
            layers: rows
                .into_iter()
                .enumerate()
                .map(|(layer, scores)| LayerScores {
                    layer,
                    head_scores: heads.map(|h| head_means(&scores, h).unwrap()),
                    scores,
                    n_samples: 10,
                })
                .collect(),
            meta: ActivityMeta {
                dataset: "unit".into(),
                seed: Some(3),
                modes: ModeFilter::Both,
                n_samples: 10,
            },
        }
    }

    fn m2(n: usize, heads: usize, layers: usize) -> ModelConfig {
        ModelConfig::new(Variant::Mamba2, 8, n, layers).with_heads(heads)
    }

    #[test]
    fn head_example_prunes_lowest_heads() {
        assert_eq!(select_heads(&[0.1, 0.9, 0.8, 0.2], 0.5).unwrap(), vec![1, 2]);
        assert_eq!(select_heads(&[0.5, 0.7, 0.7, 0.1], 0.99).unwrap(), vec![1]);
    }

    #[test]
    fn per_head_keeps_whole_groups() {
        let s = scores_of(vec![vec![0.1, 0.1, 0.9, 0.9, 0.8, 0.8, 0.2, 0.2]], Some(4));
        let plan = plan_from_activity(&s, 0.5, HeadMode::PerHead, &m2(8, 4, 1)).unwrap();
        assert_eq!(plan.layers[0].keep, vec![2, 3, 4, 5]);
        assert_eq!(plan.head_mode, HeadMode::PerHead);
    }

    #[test]
    fn per_head_on_mamba1_is_rejected() {
        let s = scores_of(vec![vec![1.0; 4]], None);
        let cfg = ModelConfig::new(Variant::Mamba1, 8, 4, 1);
        assert!(matches!(
            plan_from_activity(&s, 0.5, HeadMode::PerHead, &cfg),
            Err(Error::HeadModeUnsupported)
        ));
    }

    #[test]
    fn per_state_uniform_keeps_lowest_half() {
        let s = scores_of(vec![vec![0.5; 6], vec![0.5; 6]], None);
        let plan = plan_from_activity(&s, 0.5, HeadMode::PerState, &m2(6, 1, 2)).unwrap();
        for l in &plan.layers {
            assert_eq!(l.keep, vec![0, 1, 2]);
        }
        let prov = plan.provenance.as_ref().unwrap();
        assert_eq!((prov.dataset.as_str(), prov.seed, prov.scores_sha256.clone()), ("unit", Some(3), s.sha256()));
    }

    #[test]
    fn missing_layers_block_planning() {
        let mut s = scores_of(vec![vec![1.0; 4]; 3], None);
        s.layers.remove(1);
        assert!(matches!(
            plan_from_activity(&s, 0.5, HeadMode::PerState, &m2(4, 1, 3)),
            Err(Error::MissingLayers(v)) if v == vec![1]
        ));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let s = scores_of(vec![vec![0.3, 0.9, 0.1, 0.5], vec![0.2, 0.2, 0.8, 0.1]], None);
        let mut plan = plan_from_activity(&s, 0.5, HeadMode::PerState, &m2(4, 1, 2)).unwrap();
        plan.layers[1].ratio = Some(0.25);
        let text = plan.to_json().unwrap();
        assert!(text.contains("\"bridge\": \"selection-transpose\""));
        assert!(text.contains("\"head_mode\": \"per-state\""));
        assert_eq!(PruningPlan::from_json(&text).unwrap(), plan);

        let mut bad = plan.clone();
        bad.layers[0].keep = vec![1, 1];
        assert!(matches!(PruningPlan::from_json(&bad.to_json().unwrap()), Err(Error::DuplicateIndex(1))));
        bad.layers[0].keep = vec![2, 1];
        assert!(PruningPlan::from_json(&bad.to_json().unwrap()).is_err());
        bad.layers[0].keep = vec![4];
        assert!(PruningPlan::from_json(&bad.to_json().unwrap()).is_err());
    }

    #[test]
    fn identical_inputs_give_identical_plans() {
        let s = scores_of(vec![vec![0.4, 0.4, 0.1, 0.9, 0.4, 0.2]], Some(3));
        let a = plan_from_activity(&s, 0.3, HeadMode::PerState, &m2(6, 3, 1)).unwrap();
        let b = plan_from_activity(&s, 0.3, HeadMode::PerState, &m2(6, 3, 1)).unwrap();
        assert_eq!(a.sha256(), b.sha256());
        assert_eq!(a.layers[0].keep.len(), expected_keep(&a.layers[0], a.ratio).unwrap());
    }

    #[test]
    fn identity_plan() {
        let p = PruningPlan::identity(&[3, 5]);
        assert!(p.layers.iter().all(LayerPlan::is_identity));
        assert_eq!(p.kept_total(), 8);
    }
}
