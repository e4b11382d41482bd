//! Block and model forward passes.

use std::time::{Duration, Instant};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::component::{Component, Mode};
use crate::error::{Error, Result};
use crate::scalar::{Real, Scalar};
use crate::ssm::cache::{DecodeCache, LayerCache};
use crate::ssm::config::{ModelConfig, Variant};
use crate::ssm::ops::{causal_conv1d, discretize, in_projection, rmsnorm_rows, softplus_gate, DEFAULT_NORM_EPS};
use crate::ssm::params::{LayerParams, Model};
use crate::ssm::scan::{final_state_closed_form, scan_discretized, ssd_quadratic_discretized, ScanInputs};

/// Observer called from inside the forward pass.
pub trait ForwardHook<T> {
    /// Post-softplus step sizes of one layer, `(B * L) x n`.
    fn on_delta(&mut self, _layer: usize, _mode: Mode, _delta: ArrayView2<'_, T>) {}

    /// Whether [`ForwardHook::on_phase`] should receive timings.
    fn timing_enabled(&self) -> bool {
        false
    }

    fn on_phase(&mut self, _layer: usize, _component: Component, _elapsed: Duration) {}
}

impl<T> ForwardHook<T> for () {}

/// Input to [`model_forward`].
#[derive(Debug, Clone, PartialEq)]
pub enum SequenceBatch<T> {
    /// `B x L x D` vectors fed straight to the first block.
    Vectors(Array3<T>),
    /// `B x L` token ids looked up in the model's embedding table.
    Tokens(Array2<usize>),
}

impl<T: Real> SequenceBatch<T> {
    pub fn batch_size(&self) -> usize {
        match self {
            SequenceBatch::Vectors(x) => x.dim().0,
            SequenceBatch::Tokens(t) => t.nrows(),
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            SequenceBatch::Vectors(x) => x.dim().1,
            SequenceBatch::Tokens(t) => t.ncols(),
        }
    }

    /// Token positions `start..end` of every sequence.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        match self {
            SequenceBatch::Vectors(x) => SequenceBatch::Vectors(x.slice(s![.., start..end, ..]).to_owned()),
            SequenceBatch::Tokens(t) => SequenceBatch::Tokens(t.slice(s![.., start..end]).to_owned()),
        }
    }

    fn embed(&self, model: &Model<T>) -> Result<Array3<T>> {
        match self {
            SequenceBatch::Vectors(x) => {
                if x.dim().2 != model.config.d_model {
                    return Err(Error::shape(format!("input width {} != d_model {}", x.dim().2, model.config.d_model)));
                }
                Ok(x.clone())
            }
            SequenceBatch::Tokens(ids) => {
                let table = model
                    .embedding
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("token input needs an embedding table".into()))?;
                let (b, l) = ids.dim();
                let mut x = Array3::zeros((b, l, model.config.d_model));
                for ((i, j), &id) in ids.indexed_iter() {
                    if id >= table.nrows() {
                        return Err(Error::shape(format!("token id {id} outside vocabulary of {}", table.nrows())));
                    }
                    x.slice_mut(s![i, j, ..]).assign(&table.row(id));
                }
                Ok(x)
            }
        }
    }
}

struct Stopwatch {
    enabled: bool,
    last: Option<Instant>,
}

impl Stopwatch {
    fn new(enabled: bool) -> Self {
        Stopwatch {
            enabled,
            last: enabled.then(Instant::now),
        }
    }

    fn lap<T, H: ForwardHook<T> + ?Sized>(&mut self, hook: &mut H, layer: usize, component: Component) {
        if self.enabled {
            let now = Instant::now();
            if let Some(prev) = self.last {
                hook.on_phase(layer, component, now - prev);
            }
            self.last = Some(now);
        }
    }

    /// Drop the time since `since` from the running phase.
    fn exclude(&mut self, since: Instant) {
        if let Some(last) = self.last.as_mut() {
            *last += since.elapsed();
        }
    }

    fn restart(&mut self) {
        if self.enabled {
            self.last = Some(Instant::now());
        }
    }
}

#[derive(Clone, Copy)]
enum ScanPath {
    Recurrent,
    Quadratic { guard: usize },
}

/// Per-call settings of a block.
#[derive(Debug, Clone, Copy)]
pub struct BlockContext {
    pub layer: usize,
    pub mode: Mode,
    pub norm_eps: f64,
}

/// One block over a single sequence: `x + w_out (silu(z) * ssm(conv(u)))`.
///
/// Prefill continues from whatever state `cache` holds; decode requires
/// exactly one row.
pub fn block_forward<T: Real>(
    x: ArrayView2<T>,
    layer: &LayerParams<T>,
    mode: Mode,
    cache: &mut LayerCache<T>,
) -> Result<Array2<T>> {
    let ctx = BlockContext {
        layer: 0,
        mode,
        norm_eps: DEFAULT_NORM_EPS,
    };
    block_forward_batch(x, x.nrows(), layer, ctx, &mut [cache], &mut ())
}

/// One block over `B` stacked sequences of length `seq_len`.
///
/// `x` is `(B * seq_len) x D`; normalization and projections run on the whole
/// stack, convolution and scan run per sequence with `caches[b]`.
pub fn block_forward_batch<T: Real, H: ForwardHook<T> + ?Sized>(
    x: ArrayView2<T>,
    seq_len: usize,
    layer: &LayerParams<T>,
    ctx: BlockContext,
    caches: &mut [&mut LayerCache<T>],
    hook: &mut H,
) -> Result<Array2<T>> {
    forward_impl(x, seq_len, layer, ctx, caches, hook, ScanPath::Recurrent)
}

/// Mamba-2 prefill through the quadratic dual form instead of the recurrence.
///
/// Starts from an empty cache and leaves it in the same state a recurrent
/// prefill would. Intended for short sequences only.
pub fn block_forward_dual<T: Real>(
    x: ArrayView2<T>,
    layer: &LayerParams<T>,
    config: &ModelConfig,
    cache: &mut LayerCache<T>,
    guard: usize,
) -> Result<Array2<T>> {
    if config.variant != Variant::Mamba2 {
        return Err(Error::InvalidConfig("the dual form is only defined for Mamba-2 layers".into()));
    }
    if layer.bridge.is_some() {
        return Err(Error::InvalidConfig("the dual form does not support bridged read-out".into()));
    }
    if !cache.is_zero() {
        return Err(Error::InvalidConfig("the dual form starts from an empty cache".into()));
    }
    let ctx = BlockContext {
        layer: 0,
        mode: Mode::Prefill,
        norm_eps: config.norm_eps,
    };
    forward_impl(x, x.nrows(), layer, ctx, &mut [cache], &mut (), ScanPath::Quadratic { guard })
}

fn forward_impl<T: Real, H: ForwardHook<T> + ?Sized>(
    x: ArrayView2<T>,
    seq_len: usize,
    layer: &LayerParams<T>,
    ctx: BlockContext,
    caches: &mut [&mut LayerCache<T>],
    hook: &mut H,
    path: ScanPath,
) -> Result<Array2<T>> {
    let batch = caches.len();
    if seq_len == 0 || x.nrows() != batch * seq_len {
        return Err(Error::shape(format!(
            "{} rows for {batch} sequences of length {seq_len}",
            x.nrows()
        )));
    }
    if ctx.mode == Mode::Decode && seq_len != 1 {
        return Err(Error::DecodeLength(seq_len));
    }
    let layout = layer.layout();
    let (d_inner, n) = (layout.d_inner, layout.n_state);
    for c in caches.iter() {
        if c.h.dim() != (d_inner, n) {
            return Err(Error::shape(format!("cache state {:?}, layer needs ({d_inner}, {n})", c.h.dim())));
        }
    }
    let li = ctx.layer;
    let mut clock = Stopwatch::new(hook.timing_enabled());

    let x_norm = rmsnorm_rows(x, layer.w_norm.view(), ctx.norm_eps).map_err(|e| e.in_layer(li))?;
    clock.lap(hook, li, Component::RMSNorm);

    let proj = in_projection(x_norm.view(), layer.w_in.view(), layout)?;
    clock.lap(hook, li, Component::GatedMLP);

    let mut conv_out = Array2::zeros((x.nrows(), d_inner));
    for (bi, cache) in caches.iter_mut().enumerate() {
        let rows = bi * seq_len..(bi + 1) * seq_len;
        let (y, tail) = causal_conv1d(
            proj.u().slice(s![rows.clone(), ..]),
            layer.w_conv.view(),
            layer.conv_bias.view(),
            cache.conv_tail.view(),
        )?;
        conv_out.slice_mut(s![rows, ..]).assign(&y);
        cache.conv_tail = tail;
    }
    clock.lap(hook, li, Component::ConvTransform);

    let delta = softplus_gate(proj.delta_raw()).map_err(|e| e.in_layer(li))?;
    let observed = Instant::now();
    hook.on_delta(li, ctx.mode, delta.view());
    clock.exclude(observed);

    let mask = layer.state_mask.as_deref();
    let mut y = Array2::zeros((x.nrows(), d_inner));
    for (bi, cache) in caches.iter_mut().enumerate() {
        let rows = bi * seq_len..(bi + 1) * seq_len;
        let disc = discretize(delta.slice(s![rows.clone(), ..]), layer.a_diag.view(), mask)
            .map_err(|e| e.in_layer(li))?;
        let u = conv_out.slice(s![rows.clone(), ..]);
        let b = proj.b().slice_move(s![rows.clone(), ..]);
        let c = proj.c().slice_move(s![rows.clone(), ..]);
        let ys = match path {
            ScanPath::Recurrent => scan_discretized(
                ScanInputs {
                    u,
                    b,
                    c,
                    bridge: layer.bridge.as_ref().map(|w| w.view()),
                },
                &disc,
                &mut cache.h,
            ),
            ScanPath::Quadratic { guard } => {
                let ys = ssd_quadratic_discretized(u, b, c, &disc, guard)?;
                cache.h = final_state_closed_form(u, b, &disc);
                Ok(ys)
            }
        }
        .map_err(|e| e.in_layer(li))?;
        y.slice_mut(s![rows, ..]).assign(&ys);
    }
    clock.lap(hook, li, Component::StateSpace);

    ndarray::Zip::from(&mut y)
        .and(proj.z())
        .for_each(|yv, &zv| *yv = Scalar::silu(zv) * *yv);
    let gated = match &layer.w_out_norm {
        Some(w) => rmsnorm_rows(y.view(), w.view(), ctx.norm_eps).map_err(|e| e.in_layer(li))?,
        None => y,
    };
    clock.lap(hook, li, Component::GatedMLP);

    let mut out = gated.dot(&layer.w_out.t());
    ndarray::Zip::from(&mut out).and(&x).for_each(|o, &xv| *o = *o + xv);
    clock.lap(hook, li, Component::FinalLinear);
    clock.restart();
    Ok(out)
}

/// Run every block over `batch`, advancing one cache per sequence.
///
/// Returns the last block's outputs, `B x L x D`.
pub fn model_forward<T: Real, H: ForwardHook<T> + ?Sized>(
    model: &Model<T>,
    batch: &SequenceBatch<T>,
    mode: Mode,
    caches: &mut [DecodeCache<T>],
    hook: &mut H,
) -> Result<Array3<T>> {
    let (b, l) = (batch.batch_size(), batch.seq_len());
    if l == 0 {
        return Err(Error::shape("sequence length must be at least 1"));
    }
    if caches.len() != b {
        return Err(Error::shape(format!("{} caches for batch of {b}", caches.len())));
    }
    for cache in caches.iter() {
        if cache.layers.len() != model.layers.len() {
            return Err(Error::shape(format!(
                "cache has {} layers, model has {}",
                cache.layers.len(),
                model.layers.len()
            )));
        }
    }
    let d = model.config.d_model;
    let x = batch.embed(model)?;
    let mut h = x.into_shape_with_order((b * l, d)).map_err(|e| Error::shape(e.to_string()))?;
    for (i, layer) in model.layers.iter().enumerate() {
        let ctx = BlockContext {
            layer: i,
            mode,
            norm_eps: model.config.norm_eps,
        };
        let mut refs: Vec<&mut LayerCache<T>> = caches.iter_mut().map(|c| &mut c.layers[i]).collect();
        h = block_forward_batch(h.view(), l, layer, ctx, &mut refs, hook)?;
    }
    for cache in caches.iter_mut() {
        cache.position += l;
    }
    h.into_shape_with_order((b, l, d)).map_err(|e| Error::shape(e.to_string()))
}

impl<T: Real> Model<T> {
    /// Prefill from empty caches; returns outputs and the caches for decoding.
    pub fn prefill(&self, batch: &SequenceBatch<T>) -> Result<(Array3<T>, Vec<DecodeCache<T>>)> {
        let mut caches = DecodeCache::batch(self, batch.batch_size());
        let out = model_forward(self, batch, Mode::Prefill, &mut caches, &mut ())?;
        Ok((out, caches))
    }

    /// Prefill the first `prompt` tokens, then decode the rest one at a time.
    ///
    /// Output rows line up with the input positions.
    pub fn prefill_then_decode(&self, batch: &SequenceBatch<T>, prompt: usize) -> Result<Array3<T>> {
        let l = batch.seq_len();
        if prompt == 0 || prompt > l {
            return Err(Error::shape(format!("prompt length {prompt} for sequence of {l}")));
        }
        let (head, mut caches) = self.prefill(&batch.slice(0, prompt))?;
        let mut parts = vec![head];
        for t in prompt..l {
            parts.push(model_forward(self, &batch.slice(t, t + 1), Mode::Decode, &mut caches, &mut ())?);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(1), &views).map_err(|e| Error::shape(e.to_string()))
    }
}
