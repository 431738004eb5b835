//! Raw slice-level math kernels shared by the forward and backward passes.
//!
//! Everything here operates on plain `&[S]` buffers in row-major layout and
//! performs `debug_assert!` bounds checks; shape validation happens earlier,
//! at op-construction time.

use crate::scalar::Scalar;

/// `C = alpha * op(A) * op(B) + beta * C` for contiguous row-major slices.
///
/// `op(A)` is `m x k`: if `a_t` is false, `a` is stored `(m, k)`; if true it
/// is stored `(k, m)` and used as its transpose. Likewise `op(B)` is `k x n`
/// with `b_t` selecting a `(n, k)` stored transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(
    c: &mut [S],
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    a_t: bool,
    b: &[S],
    b_t: bool,
    beta: S,
) {
    debug_assert_eq!(a.len(), m * k, "gemm: lhs length");
    debug_assert_eq!(b.len(), k * n, "gemm: rhs length");
    debug_assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths are checked above and the stride patterns address only
    // indices below those lengths; `c` is a distinct mutable borrow.
    unsafe {
        S::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// In-place numerically stable softmax over each row of an `(rows, cols)`
/// buffer. Rows whose maximum is `-inf` (fully masked) become uniform.
pub fn softmax_rows_inplace<S: Scalar>(x: &mut [S], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        if !max.is_finite() {
            let u = S::one() / S::from_f64c(cols as f64);
            row.fill(u);
            continue;
        }
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Log-sum-exp over each row of an `(rows, cols)` buffer; `-inf` rows stay
/// `-inf`.
pub fn logsumexp_rows<S: Scalar>(x: &[S], rows: usize, cols: usize, out: &mut [S]) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        out[r] = if max.is_finite() {
            let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
            max + sum.ln()
        } else {
            max
        };
    }
}

/// Dot product of two equal-length slices.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Euclidean (L2) norm of a slice.
pub fn norm2<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// Cosine similarity with both norms clamped below by `floor`.
pub fn cosine<S: Scalar>(a: &[S], b: &[S], floor: S) -> S {
    dot(a, b) / (norm2(a).max(floor) * norm2(b).max(floor))
}

/// Squared Euclidean distance between two equal-length slices.
pub fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Numerically stable `log(sigmoid(x))`.
pub fn log_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        -(x.neg().exp()).ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Derivative of `log(sigmoid(x))`, i.e. `sigmoid(-x)`, computed stably.
pub fn sigmoid_neg<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        let e = x.neg().exp();
        e / (S::one() + e)
    } else {
        S::one() / (S::one() + x.exp())
    }
}

/// GELU activation (tanh approximation used by transformer implementations).
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64c(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = S::from_f64c(0.044_715);
    let half = S::from_f64c(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (S::one() + u.tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64c(0.797_884_560_802_865_4);
    let k = S::from_f64c(0.044_715);
    let half = S::from_f64c(0.5);
    let three = S::from_f64c(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gemm_transpose_flags() {
        // op(A) = [[1,2],[3,4]], op(B) = [[5,6],[7,8]] under every flag combo.
        let a_n = [1.0f64, 2.0, 3.0, 4.0];
        let a_tp = [1.0f64, 3.0, 2.0, 4.0]; // stored transposed
        let b_n = [5.0f64, 6.0, 7.0, 8.0];
        let b_tp = [5.0f64, 7.0, 6.0, 8.0];
        let expect = [19.0, 22.0, 43.0, 50.0];
        for (a, a_t) in [(&a_n, false), (&a_tp, true)] {
            for (b, b_t) in [(&b_n, false), (&b_tp, true)] {
                let mut c = [0.0f64; 4];
                gemm(&mut c, 2, 2, 2, 1.0, a.as_slice(), a_t, b.as_slice(), b_t, 0.0);
                assert_eq!(c, expect, "a_t={a_t} b_t={b_t}");
            }
        }
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = [1.0f64, 0.0, 0.0, 1.0];
        let b = [2.0f64, 0.0, 0.0, 2.0];
        let mut c = [10.0f64, 0.0, 0.0, 10.0];
        gemm(&mut c, 2, 2, 2, 1.0, &a, false, &b, false, 1.0);
        assert_eq!(c, [12.0, 0.0, 0.0, 12.0]);
    }

    #[test]
    fn softmax_handles_neg_infinity() {
        let mut x = [0.0f64, f64::NEG_INFINITY, 0.0, 0.0];
        softmax_rows_inplace(&mut x, 2, 2);
        assert_relative_eq!(x[0], 1.0);
        assert_eq!(x[1], 0.0);
        assert_relative_eq!(x[2], 0.5);
        assert_relative_eq!(x[3], 0.5);
    }

    #[test]
    fn logsumexp_matches_direct_sum() {
        let x = [1.0f64, 2.0, 3.0];
        let mut out = [0.0f64];
        logsumexp_rows(&x, 1, 3, &mut out);
        let direct = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln();
        assert_relative_eq!(out[0], direct, max_relative = 1e-14);
    }

    #[test]
    fn log_sigmoid_is_stable_at_extremes() {
        assert!(log_sigmoid(800.0f64) > -1e-300);
        assert_relative_eq!(log_sigmoid(-800.0f64), -800.0, max_relative = 1e-12);
        assert_relative_eq!(log_sigmoid(0.0f64), -(2.0f64.ln()), max_relative = 1e-14);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_relative_eq!(gelu_grad(x), fd, epsilon = 1e-8);
        }
    }
}
