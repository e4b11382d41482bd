//! Wall-clock latency measurement with warm-up and per-component attribution.

use std::collections::BTreeMap;
use std::hint::black_box;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::component::{Component, Mode};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::ssm::block::{model_forward, ForwardHook, SequenceBatch};
use crate::ssm::cache::DecodeCache;
use crate::ssm::params::Model;

/// Only one benchmark runs at a time in a process.
static BENCH_LOCK: Mutex<()> = Mutex::new(());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub n_warmup: usize,
    pub n_iters: usize,
}

impl Protocol {
    /// 10 unmeasured warm-up forwards, then 100 measured.
    pub const STANDARD: Protocol = Protocol {
        n_warmup: 10,
        n_iters: 100,
    };

    /// 3 warm-up forwards, then 10 measured.
    pub const PROFILING: Protocol = Protocol {
        n_warmup: 3,
        n_iters: 10,
    };

    pub fn new(n_warmup: usize, n_iters: usize) -> Self {
        Protocol { n_warmup, n_iters }
    }
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::STANDARD
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    /// Sample standard deviation; zero for a single iteration.
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub n_warmup: usize,
    pub n_iters: usize,
    /// Mean per-iteration time inside each component's phases.
    pub components: BTreeMap<Component, f64>,
    /// `mean_ms` minus the attributed component time.
    pub unattributed_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &[f64], n_warmup: usize, components: BTreeMap<Component, f64>) -> Self {
        let n = samples_ms.len();
        let mean = samples_ms.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let min = samples_ms.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let attributed: f64 = components.values().sum();
        LatencyStats {
            // Rounding can push the mean of identical samples off by an ulp.
            mean_ms: mean.clamp(min, max),
            std_ms: var.sqrt(),
            min_ms: min,
            max_ms: max,
            n_warmup,
            n_iters: n,
            components,
            unattributed_ms: mean - attributed,
        }
    }

    pub fn attributed_ms(&self) -> f64 {
        self.components.values().sum()
    }
}

#[derive(Default)]
struct PhaseTimer {
    totals: BTreeMap<Component, Duration>,
}

impl<T> ForwardHook<T> for PhaseTimer {
    fn timing_enabled(&self) -> bool {
        true
    }

    fn on_phase(&mut self, _layer: usize, component: Component, elapsed: Duration) {
        *self.totals.entry(component).or_default() += elapsed;
    }
}

/// Timing summary plus the output of the last measured forward.
#[derive(Debug, Clone)]
pub struct BenchRun<T> {
    pub stats: LatencyStats,
    pub output: Array3<T>,
}

/// Seeded unit-Gaussian `B x L x D` input.
pub fn synthetic_batch<T: Real>(batch: usize, seq_len: usize, d_model: usize, seed: u64) -> SequenceBatch<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SequenceBatch::Vectors(Array3::from_shape_simple_fn((batch, seq_len, d_model), || {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::from_f64(v)
    }))
}

/// Time full forwards of `model` over `batch`.
///
/// Prefill times the whole batch from empty caches. Decode prefills all but
/// the last token once, untimed, then times single-token steps from copies
/// of that cache. Each iteration's output passes through `black_box` before
/// the clock stops, so the work is complete when it is read.
pub fn benchmark<T: Real>(model: &Model<T>, batch: &SequenceBatch<T>, mode: Mode, protocol: Protocol) -> Result<BenchRun<T>> {
    if protocol.n_iters == 0 {
        return Err(Error::Benchmark("at least one measured iteration is required".into()));
    }
    let _guard = BENCH_LOCK.lock().unwrap_or_else(|p| p.into_inner());
    let b = batch.batch_size();
    let l = batch.seq_len();
    if l == 0 {
        return Err(Error::shape("sequence length must be at least 1"));
    }

    let (step_input, base_caches) = match mode {
        Mode::Prefill => (batch.clone(), DecodeCache::batch(model, b)),
        Mode::Decode => {
            let mut caches = DecodeCache::batch(model, b);
            if l > 1 {
                model_forward(model, &batch.slice(0, l - 1), Mode::Prefill, &mut caches, &mut ())?;
            }
            (batch.slice(l - 1, l), caches)
        }
    };

    let run_once = |timer: Option<&mut PhaseTimer>| -> Result<(Duration, Array3<T>)> {
        let mut caches = base_caches.clone();
        let start = Instant::now();
        let out = match timer {
            Some(t) => model_forward(model, &step_input, mode, &mut caches, t)?,
            None => model_forward(model, &step_input, mode, &mut caches, &mut ())?,
        };
        let out = black_box(out);
        Ok((start.elapsed(), out))
    };

    for _ in 0..protocol.n_warmup {
        run_once(None)?;
    }
    let mut timer = PhaseTimer::default();
    let mut samples = Vec::with_capacity(protocol.n_iters);
    let mut last = None;
    for _ in 0..protocol.n_iters {
        let (elapsed, out) = run_once(Some(&mut timer))?;
        samples.push(elapsed.as_secs_f64() * 1e3);
        last = Some(out);
    }
    let n = protocol.n_iters as f64;
    let components = timer
        .totals
        .into_iter()
        .map(|(c, d)| (c, d.as_secs_f64() * 1e3 / n))
        .collect();
    Ok(BenchRun {
        stats: LatencyStats::from_samples(&samples, protocol.n_warmup, components),
        output: last.expect("n_iters >= 1"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::config::{ModelConfig, Variant};

    fn model() -> Model<f32> {
        Model::random(ModelConfig::new(Variant::Mamba2, 32, 8, 2).with_heads(2), 1).unwrap()
    }

    #[test]
    fn single_iteration_stats_collapse() {
        let m = model();
        let batch = synthetic_batch(1, 16, 32, 2);
        let run = benchmark(&m, &batch, Mode::Prefill, Protocol::new(0, 1)).unwrap();
        let s = run.stats;
        assert_eq!(s.mean_ms, s.min_ms);
        assert_eq!(s.mean_ms, s.max_ms);
        assert_eq!(s.std_ms, 0.0);
    }

    #[test]
    fn default_protocol_constants() {
        assert_eq!(Protocol::default(), Protocol::new(10, 100));
        assert_eq!(Protocol::PROFILING, Protocol::new(3, 10));
    }

    #[test]
    fn zero_iterations_rejected() {
        let m = model();
        let batch = synthetic_batch(1, 4, 32, 2);
        assert!(matches!(benchmark(&m, &batch, Mode::Prefill, Protocol::new(1, 0)), Err(Error::Benchmark(_))));
    }

    #[test]
    fn stats_ordering_and_counts() {
        let m = model();
        let batch = synthetic_batch(2, 32, 32, 3);
        for mode in [Mode::Prefill, Mode::Decode] {
            let run = benchmark(&m, &batch, mode, Protocol::new(2, 7)).unwrap();
            let s = &run.stats;
            assert!(s.min_ms <= s.mean_ms && s.mean_ms <= s.max_ms);
            assert_eq!((s.n_warmup, s.n_iters), (2, 7));
            assert_eq!(s.components.len(), 5);
            let expected_len = if mode == Mode::Decode { 1 } else { 32 };
            assert_eq!(run.output.dim(), (2, expected_len, 32));
        }
    }

    #[test]
    fn decode_output_matches_full_prefill_tail() {
        let m = model().cast::<f64>();
        let batch = synthetic_batch::<f64>(1, 9, 32, 4);
        let run = benchmark(&m, &batch, Mode::Decode, Protocol::new(0, 2)).unwrap();
        let (full, _) = m.prefill(&batch).unwrap();
        for (a, b) in run.output.iter().zip(full.slice(ndarray::s![.., 8.., ..])) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn attribution_covers_most_of_the_forward() {
        let m = Model::<f32>::random(ModelConfig::new(Variant::Mamba1, 128, 16, 2), 5).unwrap();
        let batch = synthetic_batch(1, 256, 128, 6);
        let s = benchmark(&m, &batch, Mode::Prefill, Protocol::new(1, 5)).unwrap().stats;
        let gap = (s.mean_ms - s.attributed_ms()).abs() / s.mean_ms;
        assert!(gap < 0.10, "unattributed share {gap:.3}");
        assert!((s.unattributed_ms - (s.mean_ms - s.attributed_ms())).abs() < 1e-12);
    }

    #[test]
    fn synthetic_batch_is_seeded() {
        let a = synthetic_batch::<f32>(2, 3, 4, 9);
        assert_eq!(a, synthetic_batch(2, 3, 4, 9));
        assert_ne!(a, synthetic_batch(2, 3, 4, 10));
    }
}
