//! Floating point abstraction.
//!
//! Everything numeric in the crate is generic over [`Real`]. Training and
//! inference run in `f32`; the `f64` instantiation exists so gradients can be
//! verified against finite differences without single precision noise.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Short name used in diagnostics ("f32" / "f64").
    const NAME: &'static str;

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty, $name:literal) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, "f32");
impl_real!(f64, "f64");

/// Number of independent partial sums in [`lane_sum`] and [`lane_dot`].
pub const SUM_LANES: usize = 16;

/// Sum with `SUM_LANES` interleaved partial sums folded in a fixed order.
/// Vectorizes without reassociation, so the result does not depend on the
/// instruction set.
pub fn lane_sum<T: Real>(xs: &[T]) -> T {
    let mut acc = [T::zero(); SUM_LANES];
    let chunks = xs.chunks_exact(SUM_LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..SUM_LANES {
            acc[l] += c[l];
        }
    }
    for (a, &t) in acc.iter_mut().zip(tail) {
        *a += t;
    }
    acc.into_iter().fold(T::zero(), |s, a| s + a)
}

/// Dot product with the same summation order as [`lane_sum`].
pub fn lane_dot<T: Real>(xs: &[T], ys: &[T]) -> T {
    assert_eq!(xs.len(), ys.len(), "lane_dot length mismatch");
    let mut acc = [T::zero(); SUM_LANES];
    let xc = xs.chunks_exact(SUM_LANES);
    let yc = ys.chunks_exact(SUM_LANES);
    let (xt, yt) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..SUM_LANES {
            acc[l] += a[l] * b[l];
        }
    }
    for ((s, &a), &b) in acc.iter_mut().zip(xt).zip(yt) {
        *s += a * b;
    }
    acc.into_iter().fold(T::zero(), |s, a| s + a)
}
