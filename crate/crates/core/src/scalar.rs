//! Floating-point scalar abstraction.
//!
//! All numeric code in this crate is generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. The trait bundles the `num-traits`
//! operations the tensor engine needs plus a low-level GEMM hook so that
//! matrix products can be routed to an optimized kernel per concrete type.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for tensors, parameters and losses.
///
/// The default [`Scalar::gemm`] is a portable triple loop; the `f32`/`f64`
/// implementations override it with `matrixmultiply`'s SIMD kernels.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts from `f64` through `num_traits::NumCast`.
    ///
    /// Named with a `c` suffix to avoid colliding with
    /// `FromPrimitive::from_f64`. Panics only if the value is not
    /// representable at all (never the case for finite inputs on `f32`/`f64`).
    fn from_f64c(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("f64 value not representable in Scalar type")
    }

    /// Converts to `f64` (exact for `f32` and `f64`).
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("Scalar value not representable as f64")
    }

    /// General matrix multiply: `C = alpha * A * B + beta * C` with explicit
    /// row/column strides (in elements) for each operand.
    ///
    /// `A` is `m x k`, `B` is `k x n`, `C` is `m x n`.
    ///
    /// # Safety
    ///
    /// Every element addressed through the stride patterns must lie inside
    /// the corresponding allocation, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        for i in 0..m {
            for j in 0..n {
                let mut acc = Self::zero();
                for p in 0..k {
                    let av = *a.offset(i as isize * rsa + p as isize * csa);
                    let bv = *b.offset(p as isize * rsb + j as isize * csb);
                    acc += av * bv;
                }
                let cp = c.offset(i as isize * rsc + j as isize * csc);
                *cp = alpha * acc + beta * *cp;
            }
        }
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}
