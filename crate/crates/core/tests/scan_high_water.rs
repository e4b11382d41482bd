//! Peak heap use of the step-size gate plus recurrent scan against the cost
//! model's state-space activation estimate.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssmprune_core::profiler::cost::{CostModel, LayerDims};
use ssmprune_core::ssm::{selective_scan_prefill, softplus_gate};
use ssmprune_core::{Component, Mode, ModelConfig, Variant};

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let live = LIVE.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(live, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size(), Ordering::SeqCst);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

const TOLERANCE: f64 = 0.25;

#[test]
fn state_space_estimate_tracks_scan_peak() {
    for (len, n, d_model) in [(32, 4, 4), (64, 8, 8), (128, 16, 8), (256, 8, 16)] {
        let cfg = ModelConfig::new(Variant::Mamba1, d_model, n, 1);
        let d = cfg.d_inner();
        let mut rng = ChaCha8Rng::seed_from_u64(len as u64);
        let mut m = |r: usize, c: usize, lo: f64, hi: f64| Array::from_shape_fn((r, c), |_| rng.random_range(lo..hi));
        let (u, b, c, delta) = (m(len, d, -1.0, 1.0), m(len, n, -1.0, 1.0), m(len, n, -1.0, 1.0), m(len, n, -3.0, 1.0));
        let a = Array1::from_shape_fn(n, |s| -((s + 1) as f64));
        let h0 = Array2::<f64>::zeros((d, n));

        let base = LIVE.load(Ordering::SeqCst);
        PEAK.store(base, Ordering::SeqCst);
        let gated = softplus_gate(delta.view()).unwrap();
        let out = selective_scan_prefill(u.view(), b.view(), c.view(), gated.view(), a.view(), h0.view()).unwrap();
        let measured = (PEAK.load(Ordering::SeqCst) - base) as f64;
        drop((gated, out));

        let dims = LayerDims::from_config(&cfg);
        let estimate = CostModel::default()
            .estimate_layers(&[dims], Component::StateSpace, 1, len as u64, Mode::Prefill, 8)
            .activation_bytes as f64;
        let rel = estimate / measured - 1.0;
        assert!(
            rel.abs() <= TOLERANCE,
            "L={len} N={n} d={d}: estimate {estimate} B, measured peak {measured} B ({:+.1}%)",
            rel * 100.0
        );
    }
}
