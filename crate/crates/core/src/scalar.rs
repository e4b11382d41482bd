//! Numeric element types.
//!
//! [`Scalar`] is the arithmetic surface of the scan kernels, small enough for
//! instrumented number types to implement. [`Real`] adds what the
//! matrix-product path needs and only covers `f32` and `f64`.

use std::fmt::{Debug, Display};
use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::{LinalgScalar, ScalarOperand};
use serde::{Deserialize, Serialize};

pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Send
    + Sync
    + 'static
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    /// `ln(1 + e^x)`, returning `x` itself above [`Scalar::SOFTPLUS_LINEAR_ABOVE`].
    fn softplus(self) -> Self;
    /// `x * sigmoid(x)`.
    fn silu(self) -> Self;
    fn is_finite(self) -> bool;

    /// Advance every state by one token and accumulate the read-out.
    ///
    /// `h` is state-major (`h[s * d + i]`), `u` and `y` have length `d`, and
    /// `a_bar`, `gain`, `c` have one entry per state.
    fn scan_step(h: &mut [Self], u: &[Self], y: &mut [Self], a_bar: &[Self], gain: &[Self], c: &[Self]) {
        scan_step_portable(h, u, y, a_bar, gain, c);
    }

    /// Past this argument `ln(1 + e^x)` rounds to `x` in the type's precision.
    const SOFTPLUS_LINEAR_ABOVE: f64;
}

#[inline(always)]
fn scan_step_portable<S: Scalar>(h: &mut [S], u: &[S], y: &mut [S], a_bar: &[S], gain: &[S], c: &[S]) {
    let d = u.len();
    let y = &mut y[..d];
    for (s, hs) in h.chunks_exact_mut(d).enumerate() {
        let (a, g, cs) = (a_bar[s], gain[s], c[s]);
        for ((hv, &uv), yv) in hs.iter_mut().zip(u).zip(y.iter_mut()) {
            let next = a * *hv + g * uv;
            *hv = next;
            *yv = *yv + cs * next;
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty, $thresh:expr, $avx2:ident, $avx512:ident) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $avx2(h: &mut [$t], u: &[$t], y: &mut [$t], a_bar: &[$t], gain: &[$t], c: &[$t]) {
            scan_step_portable(h, u, y, a_bar, gain, c)
        }

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx512f")]
        unsafe fn $avx512(h: &mut [$t], u: &[$t], y: &mut [$t], a_bar: &[$t], gain: &[$t], c: &[$t]) {
            scan_step_portable(h, u, y, a_bar, gain, c)
        }

        impl Scalar for $t {
            const SOFTPLUS_LINEAR_ABOVE: f64 = $thresh;

            fn scan_step(h: &mut [Self], u: &[Self], y: &mut [Self], a_bar: &[Self], gain: &[Self], c: &[Self]) {
                #[cfg(target_arch = "x86_64")]
                {
                    // SAFETY: the features were detected at runtime.
                    if is_x86_feature_detected!("avx512f") {
                        return unsafe { $avx512(h, u, y, a_bar, gain, c) };
                    }
                    if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                        return unsafe { $avx2(h, u, y, a_bar, gain, c) };
                    }
                }
                scan_step_portable(h, u, y, a_bar, gain, c)
            }

            #[inline(always)]
            fn zero() -> Self {
                0.0
            }
            #[inline(always)]
            fn one() -> Self {
                1.0
            }
            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline(always)]
            fn softplus(self) -> Self {
                if self > $thresh {
                    self
                } else {
                    <$t>::exp(self).ln_1p()
                }
            }
            #[inline(always)]
            fn silu(self) -> Self {
                self / (1.0 + <$t>::exp(-self))
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

// e^-20 is below half an f32 ulp at 20; e^-40 is below half an f64 ulp at 40.
impl_scalar!(f32, 20.0, scan_step_f32_avx2, scan_step_f32_avx512);
impl_scalar!(f64, 40.0, scan_step_f64_avx2, scan_step_f64_avx512);

/// Element type of model weights and activations.
pub trait Real: Scalar + LinalgScalar + ScalarOperand + Display + Default {
    const DTYPE: DType;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(format!("unknown dtype `{other}` (expected f32 or f64)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_reference_points() {
        assert!((Scalar::softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((Scalar::softplus(1.0f64) - 1.313_261_687_518_222_8).abs() < 1e-15);
        let tiny = Scalar::softplus(-40.0f64);
        assert!(tiny > 0.0 && tiny < 1e-17);
    }

    #[test]
    fn softplus_is_linear_past_threshold() {
        assert_eq!(Scalar::softplus(41.0f64), 41.0);
        assert_eq!(Scalar::softplus(1e300f64), 1e300);
        assert_eq!(Scalar::softplus(25.0f32), 25.0);
        // Continuity at the switch point.
        let below = Scalar::softplus(40.0f64);
        assert!((below - 40.0).abs() < 1e-15);
        let below32 = Scalar::softplus(20.0f32);
        assert!((below32 - 20.0).abs() <= f32::EPSILON * 20.0);
    }

    #[test]
    fn silu_limits() {
        assert_eq!(Scalar::silu(0.0f64), 0.0);
        assert!((Scalar::silu(50.0f64) - 50.0).abs() < 1e-12);
        assert!(Scalar::silu(-800.0f64).abs() < 1e-300);
    }
}
