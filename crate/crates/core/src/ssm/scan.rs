//! Selective scan: the linear recurrence and its quadratic dual.

use ndarray::{Array2, ArrayView1, ArrayView2, ShapeBuilder, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::ssm::ops::{discretize, Discretized};

/// Default longest sequence [`ssd_quadratic`] accepts.
pub const QUADRATIC_GUARD: usize = 1024;

/// A fresh recurrent state in the state-major layout the kernels expect.
pub fn zero_state<S: Scalar>(d_inner: usize, n_state: usize) -> Array2<S> {
    Array2::from_elem((d_inner, n_state).f(), S::zero())
}

/// Copy `h` into state-major order unless it already is.
pub fn state_major<S: Scalar>(h: ArrayView2<S>) -> Array2<S> {
    if h.t().is_standard_layout() {
        h.to_owned()
    } else {
        let mut out = zero_state(h.nrows(), h.ncols());
        out.assign(&h);
        out
    }
}

/// Read-out inputs of one scan call.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a, S> {
    /// `L x d_inner` post-convolution input.
    pub u: ArrayView2<'a, S>,
    /// `L x n` input projection of the kept states.
    pub b: ArrayView2<'a, S>,
    /// `L x n_readout` read-out weights.
    pub c: ArrayView2<'a, S>,
    /// `n_readout x n` scatter matrix, `None` when `C` addresses `h` directly.
    pub bridge: Option<ArrayView2<'a, S>>,
}

/// Run the recurrence over pre-discretized factors, updating `h` in place.
///
/// `h` is `d_inner x n`. Each output row is checked for finiteness and the
/// first offending step is reported.
pub fn scan_discretized<S: Scalar>(
    inputs: ScanInputs<'_, S>,
    disc: &Discretized<S>,
    h: &mut Array2<S>,
) -> Result<Array2<S>> {
    let ScanInputs { u, b, c, bridge } = inputs;
    let (len, d_inner) = u.dim();
    let n = disc.a_bar.ncols();
    let n_read = c.ncols();
    if b.dim() != (len, n) || disc.a_bar.dim() != (len, n) || disc.scale.dim() != (len, n) || c.nrows() != len {
        return Err(Error::shape(format!(
            "scan inputs: u {:?}, B {:?}, C {:?}, a_bar {:?}",
            u.dim(),
            b.dim(),
            c.dim(),
            disc.a_bar.dim()
        )));
    }
    if h.dim() != (d_inner, n) {
        return Err(Error::shape(format!("state {:?}, expected ({d_inner}, {n})", h.dim())));
    }
    match bridge {
        Some(w) if w.dim() != (n_read, n) => {
            return Err(Error::shape(format!("bridge {:?}, expected ({n_read}, {n})", w.dim())))
        }
        None if n_read != n => {
            return Err(Error::shape(format!("C has {n_read} states but h has {n}")))
        }
        _ => {}
    }
    if !h.t().is_standard_layout() {
        *h = state_major(h.view());
    }

    let mut y = Array2::from_elem((len, d_inner), S::zero());
    let mut gain = vec![S::zero(); n];
    let mut u_row = vec![S::zero(); d_inner];
    let mut a_buf = vec![S::zero(); n];
    let mut c_buf = vec![S::zero(); n_read];
    let mut full = bridge.map(|_| vec![S::zero(); n_read * d_inner]);
    let h_flat = h.as_slice_memory_order_mut().expect("state-major state is contiguous");

    for t in 0..len {
        for (s, g) in gain.iter_mut().enumerate() {
            *g = disc.scale[[t, s]] * b[[t, s]];
        }
        copy_into(&mut u_row, u.row(t));
        let a_row = disc.a_bar.row(t);
        let c_row = c.row(t);
        let mut y_row = y.row_mut(t);
        let y_out = y_row.as_slice_mut().expect("fresh output rows are contiguous");
        match (&mut full, bridge) {
            (None, _) => {
                copy_into(&mut a_buf, a_row);
                copy_into(&mut c_buf, c_row);
                S::scan_step(h_flat, &u_row, y_out, &a_buf, &gain, &c_buf);
            }
            (Some(full), Some(w)) => {
                bridged_step(h_flat, &u_row, y_out, a_row, &gain, c_row, w, full);
            }
            (Some(_), None) => unreachable!(),
        }
        if !y_out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                layer: None,
                step: Some(t),
            });
        }
    }
    Ok(y)
}

fn copy_into<S: Scalar>(dst: &mut [S], src: ArrayView1<S>) {
    match src.as_slice() {
        Some(v) => dst.copy_from_slice(v),
        None => dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v),
    }
}

#[allow(clippy::too_many_arguments)]
fn bridged_step<S: Scalar>(
    h: &mut [S],
    u: &[S],
    y: &mut [S],
    a_bar: ArrayView1<S>,
    gain: &[S],
    c: ArrayView1<S>,
    bridge: ArrayView2<S>,
    full: &mut [S],
) {
    let d = u.len();
    for (s, hs) in h.chunks_exact_mut(d).enumerate() {
        let (a, g) = (a_bar[s], gain[s]);
        for (hv, &uv) in hs.iter_mut().zip(u) {
            *hv = a * *hv + g * uv;
        }
    }
    for (r, dst) in full.chunks_exact_mut(d).enumerate() {
        dst.fill(S::zero());
        for (j, hs) in h.chunks_exact(d).enumerate() {
            let w = bridge[[r, j]];
            for (o, &hv) in dst.iter_mut().zip(hs) {
                *o = *o + w * hv;
            }
        }
        let cr = c[r];
        for (yv, &o) in y.iter_mut().zip(dst.iter()) {
            *yv = *yv + cr * o;
        }
    }
}

/// Recurrent prefill: `h <- a_bar h + delta B u`, `y = C^T h` per token.
///
/// Returns the outputs and the final state.
pub fn selective_scan_prefill<'a, S: Scalar>(
    u: ArrayView2<'a, S>,
    b: ArrayView2<'a, S>,
    c: ArrayView2<'a, S>,
    delta: ArrayView2<S>,
    a_diag: ArrayView1<S>,
    h0: ArrayView2<S>,
) -> Result<(Array2<S>, Array2<S>)> {
    let disc = discretize(delta, a_diag, None)?;
    let mut h = state_major(h0);
    let y = scan_discretized(
        ScanInputs {
            u,
            b,
            c,
            bridge: None,
        },
        &disc,
        &mut h,
    )?;
    Ok((y, h))
}

/// One decode step of the recurrence; rows are single tokens.
pub fn selective_scan_step<'a, S: Scalar>(
    u: ArrayView1<'a, S>,
    b: ArrayView1<'a, S>,
    c: ArrayView1<'a, S>,
    delta: ArrayView1<S>,
    a_diag: ArrayView1<S>,
    h: &mut Array2<S>,
) -> Result<ndarray::Array1<S>> {
    fn row<S>(v: ArrayView1<'_, S>) -> ArrayView2<'_, S> {
        v.insert_axis(ndarray::Axis(0))
    }
    let disc = discretize(row(delta), a_diag, None)?;
    let y = scan_discretized(
        ScanInputs {
            u: row(u),
            b: row(b),
            c: row(c),
            bridge: None,
        },
        &disc,
        h,
    )?;
    Ok(y.row(0).to_owned())
}

/// Quadratic (attention-like) form of the scan from a zero state.
///
/// Materializes `M[t, j] = sum_s C[t,s] (prod_{m=j+1..=t} a_bar[m,s]) delta[j,s] B[j,s]`
/// for `j <= t` and returns `M u`. Cost is `O(L^2 (N + d))`.
pub fn ssd_quadratic<S: Scalar>(
    u: ArrayView2<S>,
    b: ArrayView2<S>,
    c: ArrayView2<S>,
    delta: ArrayView2<S>,
    a_diag: ArrayView1<S>,
    guard: usize,
) -> Result<Array2<S>> {
    if u.nrows() > guard {
        return Err(Error::QuadraticGuard {
            len: u.nrows(),
            guard,
        });
    }
    let disc = discretize(delta, a_diag, None)?;
    ssd_quadratic_discretized(u, b, c, &disc, guard)
}

/// [`ssd_quadratic`] over explicit decay and input factors.
pub fn ssd_quadratic_discretized<S: Scalar>(
    u: ArrayView2<S>,
    b: ArrayView2<S>,
    c: ArrayView2<S>,
    disc: &Discretized<S>,
    guard: usize,
) -> Result<Array2<S>> {
    let (len, d_inner) = u.dim();
    if len > guard {
        return Err(Error::QuadraticGuard { len, guard });
    }
    let n = disc.a_bar.ncols();
    if b.dim() != (len, n) || c.dim() != (len, n) || disc.scale.dim() != (len, n) || disc.a_bar.nrows() != len {
        return Err(Error::shape(format!(
            "quadratic inputs: u {:?}, B {:?}, C {:?}, a_bar {:?}",
            u.dim(),
            b.dim(),
            c.dim(),
            disc.a_bar.dim()
        )));
    }

    let mut mix = Array2::from_elem((len, len), S::zero());
    for s in 0..n {
        for t in 0..len {
            let ct = c[[t, s]];
            let mut decay = S::one();
            for j in (0..=t).rev() {
                mix[[t, j]] = mix[[t, j]] + ct * decay * disc.scale[[j, s]] * b[[j, s]];
                decay = decay * disc.a_bar[[j, s]];
            }
        }
    }

    let mut y = Array2::from_elem((len, d_inner), S::zero());
    for t in 0..len {
        for j in 0..=t {
            let m = mix[[t, j]];
            Zip::from(y.row_mut(t))
                .and(u.row(j))
                .for_each(|yv, &uv| *yv = *yv + m * uv);
        }
        if !y.row(t).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                layer: None,
                step: Some(t),
            });
        }
    }
    Ok(y)
}

/// Final state of a zero-initialized scan in closed form:
/// `h_L[d, s] = sum_j (prod_{m=j+1..L-1} a_bar[m,s]) delta[j,s] B[j,s] u[j,d]`.
pub fn final_state_closed_form<S: Scalar>(u: ArrayView2<S>, b: ArrayView2<S>, disc: &Discretized<S>) -> Array2<S> {
    let (len, d_inner) = u.dim();
    let n = disc.a_bar.ncols();
    let mut h = zero_state(d_inner, n);
    for s in 0..n {
        let mut decay = S::one();
        for j in (0..len).rev() {
            let w = decay * disc.scale[[j, s]] * b[[j, s]];
            Zip::from(h.column_mut(s))
                .and(u.row(j))
                .for_each(|hv, &uv| *hv = *hv + w * uv);
            decay = decay * disc.a_bar[[j, s]];
        }
    }
    h
}
