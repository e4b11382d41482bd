//! Element-wise and projection stages of the block pipeline.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::{Real, Scalar};

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

fn check_finite<'a, S: Scalar>(values: impl IntoIterator<Item = &'a S>) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer: None,
            step: None,
        })
    }
}

/// `y_i = w_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm<T: Real>(x: ArrayView1<T>, w_norm: ArrayView1<T>, eps: f64) -> Result<Array1<T>> {
    let rows = x.insert_axis(Axis(0));
    Ok(rmsnorm_rows(rows, w_norm, eps)?.remove_axis(Axis(0)))
}

/// Row-wise [`rmsnorm`] over an `L x D` matrix.
pub fn rmsnorm_rows<T: Real>(x: ArrayView2<T>, w_norm: ArrayView1<T>, eps: f64) -> Result<Array2<T>> {
    if x.ncols() != w_norm.len() {
        return Err(Error::shape(format!(
            "rmsnorm input width {} vs weight {}",
            x.ncols(),
            w_norm.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("rmsnorm eps must be positive, got {eps}")));
    }
    check_finite(x.iter())?;
    let eps = T::from_f64(eps);
    let width = T::from_f64(x.ncols() as f64);
    let mut out = Array2::zeros(x.raw_dim());
    for (row, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
        let sum_sq = row.iter().fold(<T as Scalar>::zero(), |acc, &v| acc + v * v);
        let inv = <T as Scalar>::one() / (sum_sq / width + eps).sqrt();
        for ((d, &v), &w) in dst.iter_mut().zip(row).zip(w_norm) {
            *d = w * (v * inv);
        }
    }
    Ok(out)
}

/// Overflow-safe `ln(1 + e^x)` applied element-wise.
pub fn softplus_gate<S: Scalar>(delta_raw: ArrayView2<S>) -> Result<Array2<S>> {
    check_finite(delta_raw.iter())?;
    Ok(delta_raw.mapv(Scalar::softplus))
}

/// Per-step transition factors `a_bar = exp(delta * a)` and input scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretized<S> {
    /// `L x N` decay factors, each in `[0, 1]`.
    pub a_bar: Array2<S>,
    /// `L x N` input scaling; equal to `delta` under the Euler input rule.
    pub scale: Array2<S>,
}

/// Discretize with `a_bar = exp(delta * a)` and Euler input scaling `delta`.
///
/// States flagged `false` in `active` are frozen: their decay and input
/// scaling are forced to zero so they stay at zero.
pub fn discretize<S: Scalar>(
    delta: ArrayView2<S>,
    a_diag: ArrayView1<S>,
    active: Option<&[bool]>,
) -> Result<Discretized<S>> {
    let n = a_diag.len();
    if delta.ncols() != n {
        return Err(Error::shape(format!(
            "delta has {} states, transition has {n}",
            delta.ncols()
        )));
    }
    if let Some(mask) = active {
        if mask.len() != n {
            return Err(Error::shape(format!("state mask has {} entries, expected {n}", mask.len())));
        }
    }
    for (s, &a) in a_diag.iter().enumerate() {
        if !(a < S::zero()) {
            return Err(Error::UnstableTransition(format!(
                "a[{s}] = {} must be negative",
                a.to_f64()
            )));
        }
    }
    check_finite(delta.iter())?;

    let mut a_bar = Array2::from_elem(delta.raw_dim(), S::zero());
    let mut scale = delta.to_owned();
    for (t, (drow, mut arow)) in delta.rows().into_iter().zip(a_bar.rows_mut()).enumerate() {
        for (s, (&d, out)) in drow.iter().zip(arow.iter_mut()).enumerate() {
            let v = (d * a_diag[s]).exp();
            // exp underflow to 0 is fine; anything above 1 means delta < 0.
            if !(v >= S::zero() && v <= S::one()) {
                return Err(Error::UnstableTransition(format!(
                    "a_bar[{t}, {s}] = {} from delta {}",
                    v.to_f64(),
                    d.to_f64()
                )));
            }
            *out = v;
        }
    }
    if let Some(mask) = active {
        for (s, keep) in mask.iter().enumerate() {
            if !keep {
                a_bar.column_mut(s).fill(S::zero());
                scale.column_mut(s).fill(S::zero());
            }
        }
    }
    Ok(Discretized { a_bar, scale })
}

/// Exact zero-order-hold pair for one scalar state: `(exp(delta a),
/// (delta a)^-1 (exp(delta a) - 1) delta)`. Reference only; the engine uses
/// the Euler input term.
pub fn discretize_zoh(delta: f64, a: f64) -> (f64, f64) {
    let x = delta * a;
    let input = if x == 0.0 { delta } else { x.exp_m1() / a };
    (x.exp(), input)
}

/// Row layout of the fused input projection: `[z | u | B | C | delta]`.
///
/// `n_readout` equals `n_state` except when a bridge maps a reduced state
/// back to the original width, in which case C keeps the original width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionLayout {
    pub d_inner: usize,
    pub n_state: usize,
    pub n_readout: usize,
}

impl ProjectionLayout {
    pub fn dense(d_inner: usize, n_state: usize) -> Self {
        ProjectionLayout {
            d_inner,
            n_state,
            n_readout: n_state,
        }
    }

    pub fn rows(&self) -> usize {
        2 * self.d_inner + 2 * self.n_state + self.n_readout
    }

    pub fn z(&self) -> Range<usize> {
        0..self.d_inner
    }

    pub fn u(&self) -> Range<usize> {
        self.d_inner..2 * self.d_inner
    }

    pub fn b(&self) -> Range<usize> {
        let start = 2 * self.d_inner;
        start..start + self.n_state
    }

    pub fn c(&self) -> Range<usize> {
        let start = 2 * self.d_inner + self.n_state;
        start..start + self.n_readout
    }

    pub fn delta(&self) -> Range<usize> {
        let start = 2 * self.d_inner + self.n_state + self.n_readout;
        start..start + self.n_state
    }
}

/// Output of the fused projection, split lazily by column block.
#[derive(Debug, Clone)]
pub struct Projection<T> {
    pub layout: ProjectionLayout,
    pub all: Array2<T>,
}

impl<T: Real> Projection<T> {
    pub fn z(&self) -> ArrayView2<'_, T> {
        self.all.slice(s![.., self.layout.z()])
    }

    pub fn u(&self) -> ArrayView2<'_, T> {
        self.all.slice(s![.., self.layout.u()])
    }

    pub fn b(&self) -> ArrayView2<'_, T> {
        self.all.slice(s![.., self.layout.b()])
    }

    pub fn c(&self) -> ArrayView2<'_, T> {
        self.all.slice(s![.., self.layout.c()])
    }

    pub fn delta_raw(&self) -> ArrayView2<'_, T> {
        self.all.slice(s![.., self.layout.delta()])
    }
}

/// One matrix product `x_norm . w_in^T`, then a split by [`ProjectionLayout`].
pub fn in_projection<T: Real>(
    x_norm: ArrayView2<T>,
    w_in: ArrayView2<T>,
    layout: ProjectionLayout,
) -> Result<Projection<T>> {
    if w_in.nrows() != layout.rows() {
        return Err(Error::shape(format!(
            "w_in has {} rows, layout needs {}",
            w_in.nrows(),
            layout.rows()
        )));
    }
    if x_norm.ncols() != w_in.ncols() {
        return Err(Error::shape(format!(
            "input width {} vs w_in width {}",
            x_norm.ncols(),
            w_in.ncols()
        )));
    }
    Ok(Projection {
        layout,
        all: x_norm.dot(&w_in.t()),
    })
}

/// Depthwise causal convolution followed by SiLU.
///
/// `w_conv[d, i]` multiplies the input `i` steps back, so column 0 is the
/// current-token tap. `tail` holds the `k - 1` inputs preceding the first row
/// of `u`, oldest in column 0. Returns the activated output and the new tail.
pub fn causal_conv1d<T: Real>(
    u: ArrayView2<T>,
    w_conv: ArrayView2<T>,
    bias: ArrayView1<T>,
    tail: ArrayView2<T>,
) -> Result<(Array2<T>, Array2<T>)> {
    let (len, d_inner) = u.dim();
    let k = w_conv.ncols();
    if w_conv.nrows() != d_inner || bias.len() != d_inner {
        return Err(Error::shape(format!(
            "conv weights {:?} / bias {} vs {d_inner} channels",
            w_conv.dim(),
            bias.len()
        )));
    }
    if k == 0 || tail.dim() != (d_inner, k - 1) {
        return Err(Error::shape(format!(
            "conv tail {:?}, expected ({d_inner}, {})",
            tail.dim(),
            k.saturating_sub(1)
        )));
    }

    // Rows 0..k-1 are the carried tail, row k-1+t is input t.
    let mut ext = Array2::<T>::zeros((len + k - 1, d_inner));
    ext.slice_mut(s![..k - 1, ..]).assign(&tail.t());
    ext.slice_mut(s![k - 1.., ..]).assign(&u);
    let taps = w_conv.t().as_standard_layout().into_owned();

    let mut y = Array2::<T>::zeros((len, d_inner));
    for (t, mut out) in y.rows_mut().into_iter().enumerate() {
        out.assign(&bias);
        for (i, w) in taps.rows().into_iter().enumerate() {
            let src = ext.row(t + k - 1 - i);
            ndarray::Zip::from(&mut out)
                .and(&w)
                .and(&src)
                .for_each(|acc, &wi, &xi| *acc = *acc + wi * xi);
        }
        out.mapv_inplace(Scalar::silu);
    }
    let new_tail = ext.slice(s![len.., ..]).t().to_owned();
    Ok((y, new_tail))
}
