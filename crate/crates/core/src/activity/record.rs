//! Streaming accumulation of per-state step sizes.

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::exact::ExactSum;
use crate::component::Mode;
use crate::error::{Error, Result};
use crate::scalar::{Real, Scalar};
use crate::ssm::block::{model_forward, ForwardHook, SequenceBatch};
use crate::ssm::cache::DecodeCache;
use crate::ssm::params::Model;

/// Which recorded samples an aggregate draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeFilter {
    Prefill,
    Decode,
    #[default]
    Both,
}

impl ModeFilter {
    pub fn admits(self, mode: Mode) -> bool {
        matches!(
            (self, mode),
            (ModeFilter::Both, _) | (ModeFilter::Prefill, Mode::Prefill) | (ModeFilter::Decode, Mode::Decode)
        )
    }
}

impl std::str::FromStr for ModeFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefill" => Ok(ModeFilter::Prefill),
            "decode" => Ok(ModeFilter::Decode),
            "both" => Ok(ModeFilter::Both),
            other => Err(Error::format("mode filter", format!("unknown mode {other:?}"))),
        }
    }
}

/// Column sums of one layer's step sizes and the number of rows seen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSums {
    pub sums: Vec<ExactSum>,
    pub count: u64,
}

impl StateSums {
    fn new(n: usize) -> Self {
        StateSums {
            sums: vec![ExactSum::new(); n],
            count: 0,
        }
    }

    pub fn merge(&mut self, other: &StateSums) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            a.merge(b);
        }
        self.count += other.count;
    }

    /// Correctly rounded mean per state; `None` before any sample.
    pub fn means(&self) -> Option<Vec<f64>> {
        (self.count > 0).then(|| self.sums.iter().map(|s| s.mean(self.count)).collect())
    }
}

/// Uniform sample of raw rows (Algorithm R).
#[derive(Debug, Clone)]
pub struct Reservoir {
    capacity: usize,
    seen: u64,
    rows: Vec<(Mode, Vec<f64>)>,
    rng: ChaCha8Rng,
}

impl Reservoir {
    fn new(capacity: usize, seed: u64) -> Self {
        Reservoir {
            capacity,
            seen: 0,
            rows: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn offer(&mut self, mode: Mode, row: Vec<f64>) {
        self.seen += 1;
        if self.rows.len() < self.capacity {
            self.rows.push((mode, row));
        } else {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.rows[j as usize] = (mode, row);
            }
        }
    }

    fn merge(&mut self, other: &Reservoir) {
        let total = self.seen + other.seen;
        if self.rows.len() + other.rows.len() <= self.capacity {
            self.rows.extend(other.rows.iter().cloned());
        } else {
            // Each kept row stands for `seen / len` rows of its stream; draw
            // without replacement with probability proportional to that weight.
            let mut mine = std::mem::take(&mut self.rows);
            let mut theirs = other.rows.clone();
            let wa = self.seen as f64 / mine.len().max(1) as f64;
            let wb = other.seen as f64 / theirs.len().max(1) as f64;
            while self.rows.len() < self.capacity && !(mine.is_empty() && theirs.is_empty()) {
                let (ma, mb) = (mine.len() as f64 * wa, theirs.len() as f64 * wb);
                let pool = if self.rng.random::<f64>() * (ma + mb) < ma { &mut mine } else { &mut theirs };
                let i = self.rng.random_range(0..pool.len());
                self.rows.push(pool.swap_remove(i));
            }
        }
        self.seen = total;
    }

    pub fn rows(&self) -> impl Iterator<Item = (Mode, &[f64])> {
        self.rows.iter().map(|(m, r)| (*m, r.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows offered so far, kept or not.
    pub fn seen(&self) -> u64 {
        self.seen
    }
}

#[derive(Debug, Clone)]
pub struct LayerActivity {
    pub prefill: StateSums,
    pub decode: StateSums,
    pub reservoir: Option<Reservoir>,
}

impl LayerActivity {
    pub fn n_state(&self) -> usize {
        self.prefill.sums.len()
    }

    /// Sums restricted to `filter`, merged exactly.
    pub fn sums(&self, filter: ModeFilter) -> StateSums {
        match filter {
            ModeFilter::Prefill => self.prefill.clone(),
            ModeFilter::Decode => self.decode.clone(),
            ModeFilter::Both => {
                let mut s = self.prefill.clone();
                s.merge(&self.decode);
                s
            }
        }
    }
}

/// Per-layer activity accumulated over any number of forwards.
#[derive(Debug, Clone)]
pub struct ActivityRecord {
    layers: Vec<LayerActivity>,
}

impl ActivityRecord {
    /// Empty record for layers with the given state counts.
    pub fn new(n_state: &[usize]) -> Self {
        ActivityRecord {
            layers: n_state
                .iter()
                .map(|&n| LayerActivity {
                    prefill: StateSums::new(n),
                    decode: StateSums::new(n),
                    reservoir: None,
                })
                .collect(),
        }
    }

    pub fn for_model<T: Real>(model: &Model<T>) -> Self {
        let n: Vec<usize> = model.layers.iter().map(|l| l.n_state()).collect();
        Self::new(&n)
    }

    /// Keep up to `capacity` raw rows per layer, sampled uniformly.
    pub fn with_reservoir(mut self, capacity: usize, seed: u64) -> Self {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.reservoir = Some(Reservoir::new(capacity, seed.wrapping_add(i as u64)));
        }
        self
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, index: usize) -> Option<&LayerActivity> {
        self.layers.get(index)
    }

    pub fn layers(&self) -> &[LayerActivity] {
        &self.layers
    }

    /// Rows seen by every layer under `filter`.
    pub fn total_count(&self, filter: ModeFilter) -> u64 {
        self.layers.iter().map(|l| l.sums(filter).count).sum()
    }

    /// Add one layer's `(B * L) x N` step sizes.
    ///
    /// Entries must be finite and non-negative. On error nothing is recorded.
    pub fn record_delta<T: Scalar>(&mut self, layer: usize, mode: Mode, delta: ArrayView2<'_, T>) -> Result<()> {
        let n_layers = self.layers.len();
        let entry = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::shape(format!("layer {layer} out of range for {n_layers} recorded layers")))?;
        let n = entry.n_state();
        if delta.ncols() != n {
            return Err(Error::ActivityShape {
                layer,
                expected: n,
                got: delta.ncols(),
            });
        }
        if let Some(bad) = delta.iter().map(|v| v.to_f64()).find(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(if bad.is_finite() {
                Error::format("step sizes", format!("negative value {bad} in layer {layer}"))
            } else {
                Error::NonFinite {
                    layer: Some(layer),
                    step: None,
                }
            });
        }
        let sums = match mode {
            Mode::Prefill => &mut entry.prefill,
            Mode::Decode => &mut entry.decode,
        };
        for (acc, col) in sums.sums.iter_mut().zip(delta.columns()) {
            for v in col {
                acc.add(v.to_f64());
            }
        }
        sums.count += delta.nrows() as u64;
        if let Some(res) = entry.reservoir.as_mut() {
            for row in delta.rows() {
                res.offer(mode, row.iter().map(|v| v.to_f64()).collect());
            }
        }
        Ok(())
    }

    /// Fold `other` into `self`. Associative and commutative on the sums.
    pub fn merge(&mut self, other: &ActivityRecord) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(format!(
                "cannot merge records with {} and {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.n_state() != b.n_state() {
                return Err(Error::ActivityShape {
                    layer: i,
                    expected: a.n_state(),
                    got: b.n_state(),
                });
            }
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.prefill.merge(&b.prefill);
            a.decode.merge(&b.decode);
            match (a.reservoir.as_mut(), b.reservoir.as_ref()) {
                (Some(ra), Some(rb)) => ra.merge(rb),
                (None, Some(rb)) => a.reservoir = Some(rb.clone()),
                _ => {}
            }
        }
        Ok(())
    }

    /// Hook that records every layer's step sizes during a forward.
    pub fn recorder(&mut self) -> Recorder<'_> {
        Recorder {
            record: self,
            error: None,
        }
    }
}

/// [`ForwardHook`] feeding an [`ActivityRecord`]; keeps the first error.
pub struct Recorder<'a> {
    record: &'a mut ActivityRecord,
    error: Option<Error>,
}

impl Recorder<'_> {
    pub fn finish(self) -> Result<()> {
        self.error.map_or(Ok(()), Err)
    }
}

impl<T: Scalar> ForwardHook<T> for Recorder<'_> {
    fn on_delta(&mut self, layer: usize, mode: Mode, delta: ArrayView2<'_, T>) {
        if self.error.is_none() {
            if let Err(e) = self.record.record_delta(layer, mode, delta) {
                self.error = Some(e);
            }
        }
    }
}

/// Run `batch` through `model` and record its step sizes.
///
/// The first `L - decode_steps` tokens go through one prefill, the rest
/// through single-token decode steps on the resulting cache.
pub fn collect_activity<T: Real>(
    model: &Model<T>,
    record: &mut ActivityRecord,
    batch: &SequenceBatch<T>,
    decode_steps: usize,
) -> Result<()> {
    let l = batch.seq_len();
    if decode_steps > l {
        return Err(Error::shape(format!("{decode_steps} decode steps requested from {l} tokens")));
    }
    let mut caches = DecodeCache::batch(model, batch.batch_size());
    let mut hook = record.recorder();
    let split = l - decode_steps;
    if split > 0 {
        model_forward(model, &batch.slice(0, split), Mode::Prefill, &mut caches, &mut hook)?;
    }
    for t in split..l {
        model_forward(model, &batch.slice(t, t + 1), Mode::Decode, &mut caches, &mut hook)?;
    }
    hook.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiler::bench::synthetic_batch;
    use crate::ssm::config::{ModelConfig, Variant};
    use ndarray::{Array2, Axis};
    use proptest::prelude::*;
    use rand_distr::{Distribution, Exp};

    fn random_delta(rng: &mut ChaCha8Rng, rows: usize, n: usize) -> Array2<f64> {
        let d = Exp::new(2.0).unwrap();
        Array2::from_shape_simple_fn((rows, n), || d.sample(rng) + 1e-3)
    }

    #[test]
    fn empty_delta_leaves_record_unchanged() {
        let mut r = ActivityRecord::new(&[3]);
        r.record_delta(0, Mode::Prefill, Array2::<f64>::zeros((0, 3)).view()).unwrap();
        assert_eq!(r.layer(0).unwrap().prefill, StateSums::new(3));
    }

    #[test]
    fn order_of_batches_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_delta(&mut rng, 7, 4);
        let b = random_delta(&mut rng, 5, 4);
        let mut r1 = ActivityRecord::new(&[4]);
        r1.record_delta(0, Mode::Prefill, a.view()).unwrap();
        r1.record_delta(0, Mode::Prefill, b.view()).unwrap();
        let mut r2 = ActivityRecord::new(&[4]);
        r2.record_delta(0, Mode::Prefill, b.view()).unwrap();
        r2.record_delta(0, Mode::Prefill, a.view()).unwrap();
        assert_eq!(r1.layer(0).unwrap().prefill, r2.layer(0).unwrap().prefill);
    }

    #[test]
    fn stream_mean_matches_reservoir_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut r = ActivityRecord::new(&[6]).with_reservoir(1000, 3);
        let mut left = 1000;
        while left > 0 {
            let rows = rng.random_range(1..=left.min(37));
            r.record_delta(0, Mode::Prefill, random_delta(&mut rng, rows, 6).view()).unwrap();
            left -= rows;
        }
        let layer = r.layer(0).unwrap();
        let res = layer.reservoir.as_ref().unwrap();
        assert_eq!((res.len(), layer.prefill.count), (1000, 1000));
        let rows: Vec<&[f64]> = res.rows().map(|(_, row)| row).collect();
        let means = layer.prefill.means().unwrap();
        for s in 0..6 {
            let brute = rows.iter().map(|row| row[s]).sum::<f64>() / rows.len() as f64;
            assert!((means[s] - brute).abs() <= 1e-12 * brute, "{} vs {}", means[s], brute);
        }
    }

    #[test]
    fn width_mismatch_is_an_activity_error() {
        let mut r = ActivityRecord::new(&[4, 4]);
        let err = r.record_delta(1, Mode::Decode, Array2::<f32>::ones((2, 3)).view()).unwrap_err();
        assert!(matches!(err, Error::ActivityShape { layer: 1, expected: 4, got: 3 }));
    }

    #[test]
    fn rejects_negative_and_nan_without_side_effects() {
        let mut r = ActivityRecord::new(&[2]);
        let mut d = Array2::<f64>::ones((3, 2));
        d[[2, 1]] = -0.5;
        assert!(r.record_delta(0, Mode::Prefill, d.view()).is_err());
        d[[2, 1]] = f64::NAN;
        assert!(matches!(r.record_delta(0, Mode::Prefill, d.view()), Err(Error::NonFinite { layer: Some(0), .. })));
        assert_eq!(r.total_count(ModeFilter::Both), 0);
    }

    #[test]
    fn modes_are_kept_apart() {
        let mut r = ActivityRecord::new(&[1]);
        r.record_delta(0, Mode::Prefill, Array2::from_elem((2, 1), 0.2).view()).unwrap();
        r.record_delta(0, Mode::Decode, Array2::from_elem((1, 1), 0.5).view()).unwrap();
        let l = r.layer(0).unwrap();
        assert_eq!(l.sums(ModeFilter::Prefill).means().unwrap(), vec![0.2]);
        assert_eq!(l.sums(ModeFilter::Decode).means().unwrap(), vec![0.5]);
        assert_eq!(l.sums(ModeFilter::Both).count, 3);
    }

    #[test]
    fn forward_collection_counts_every_step() {
        let m = Model::<f64>::random(ModelConfig::new(Variant::Mamba2, 16, 8, 3).with_heads(2), 4).unwrap();
        let batch = synthetic_batch(2, 10, 16, 5);
        let mut r = ActivityRecord::for_model(&m);
        collect_activity(&m, &mut r, &batch, 3).unwrap();
        for layer in r.layers() {
            assert_eq!(layer.prefill.count, 2 * 7);
            assert_eq!(layer.decode.count, 2 * 3);
            assert!(layer.sums(ModeFilter::Both).means().unwrap().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn prefill_and_decode_collection_see_the_same_deltas() {
        let m = Model::<f64>::random(ModelConfig::new(Variant::Mamba1, 16, 4, 2), 6).unwrap();
        let batch = synthetic_batch(1, 8, 16, 7);
        let mut a = ActivityRecord::for_model(&m);
        collect_activity(&m, &mut a, &batch, 0).unwrap();
        let mut b = ActivityRecord::for_model(&m);
        collect_activity(&m, &mut b, &batch, 8).unwrap();
        for (x, y) in a.layers().iter().zip(b.layers()) {
            let (mx, my) = (x.prefill.means().unwrap(), y.decode.means().unwrap());
            for (p, q) in mx.iter().zip(&my) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reservoir_is_bounded_and_merge_keeps_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut a = ActivityRecord::new(&[3]).with_reservoir(10, 1);
        let mut b = ActivityRecord::new(&[3]).with_reservoir(10, 2);
        a.record_delta(0, Mode::Prefill, random_delta(&mut rng, 40, 3).view()).unwrap();
        b.record_delta(0, Mode::Decode, random_delta(&mut rng, 25, 3).view()).unwrap();
        a.merge(&b).unwrap();
        let res = a.layer(0).unwrap().reservoir.as_ref().unwrap();
        assert_eq!((res.len(), res.seen()), (10, 65));
        assert_eq!(a.total_count(ModeFilter::Both), 65);
    }

    proptest! {
        #[test]
        fn streaming_equals_one_shot(seed in any::<u64>(), cuts in proptest::collection::vec(0usize..50, 1..6)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let total: usize = cuts.iter().sum();
            let all = random_delta(&mut rng, total, 5);
            let mut streamed = ActivityRecord::new(&[5]);
            let mut start = 0;
            for c in &cuts {
                streamed.record_delta(0, Mode::Prefill, all.slice(ndarray::s![start..start + c, ..])).unwrap();
                start += c;
            }
            let mut once = ActivityRecord::new(&[5]);
            once.record_delta(0, Mode::Prefill, all.view()).unwrap();
            prop_assert_eq!(&streamed.layer(0).unwrap().prefill, &once.layer(0).unwrap().prefill);
            if total > 0 {
                let brute = all.mean_axis(Axis(0)).unwrap();
                for (m, b) in once.layer(0).unwrap().prefill.means().unwrap().iter().zip(brute.iter()) {
                    prop_assert!((m - b).abs() <= 1e-12 * b);
                }
            }
        }

        #[test]
        fn merge_is_commutative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = ActivityRecord::new(&[3, 2]);
            let mut b = ActivityRecord::new(&[3, 2]);
            a.record_delta(0, Mode::Prefill, random_delta(&mut rng, 4, 3).view()).unwrap();
            b.record_delta(0, Mode::Prefill, random_delta(&mut rng, 6, 3).view()).unwrap();
            b.record_delta(1, Mode::Decode, random_delta(&mut rng, 2, 2).view()).unwrap();
            let mut ab = a.clone();
            ab.merge(&b).unwrap();
            let mut ba = b.clone();
            ba.merge(&a).unwrap();
            for (x, y) in ab.layers().iter().zip(ba.layers()) {
                prop_assert_eq!(&x.prefill, &y.prefill);
                prop_assert_eq!(&x.decode, &y.decode);
            }
        }
    }
}
