//! Forward op builders: shape validation, eager evaluation, node recording.

use std::sync::Arc;

use rand::Rng;

use super::kernels;
use super::{numel, Op, Tape, TensorError, TensorId};
use crate::scalar::Scalar;

/// Floor applied inside `ln` to keep log outputs finite.
pub const LN_FLOOR: f64 = 1e-12;
/// Epsilon inside layer normalization's variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Norm floor used by cosine similarity.
pub const COSINE_FLOOR: f64 = 1e-12;

impl<S: Scalar> Tape<S> {
    /// 2D matrix product `A (m,k) x B (k,n) -> (m,n)`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.matmul_general("matmul", a, false, b, false)
    }

    /// 2D product against a transposed right operand: `A (m,k) x B^T` with
    /// `B` stored `(n,k)`, producing `(m,n)`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.matmul_general("matmul_nt", a, false, b, true)
    }

    fn matmul_general(
        &mut self,
        op: &'static str,
        a: TensorId,
        a_t: bool,
        b: TensorId,
        b_t: bool,
    ) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                details: format!("expected 2D operands, got {sa:?} and {sb:?}"),
            });
        }
        let (m, ka) = if a_t { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if b_t { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op,
                details: format!("inner dimensions differ: {sa:?} vs {sb:?}"),
            });
        }
        let mut out = vec![S::zero(); m * n];
        kernels::gemm(&mut out, m, ka, n, S::one(), self.values(a), a_t, self.values(b), b_t, S::zero());
        let needs = self.input_needs_grad(&[a, b]);
        Ok(self.push(Arc::new(out), vec![m, n], needs, Op::Matmul { a, b, m, k: ka, n, a_t, b_t }))
    }

    /// Affine map `X (m,k) x W (k,n) + bias (n)`, bias broadcast over rows.
    pub fn linear(&mut self, x: TensorId, w: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[0] || sw[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                details: format!("x {sx:?}, w {sw:?}, bias {sb:?}"),
            });
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::gemm(&mut out, m, k, n, S::one(), self.values(x), false, self.values(w), false, S::zero());
        let bias_v = self.values_arc(bias);
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias_v.iter()) {
                *o += bv;
            }
        }
        let needs = self.input_needs_grad(&[x, w, bias]);
        Ok(self.push(Arc::new(out), vec![m, n], needs, Op::Linear { x, w, bias, m, k, n }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("add", a, b)?;
        let out: Vec<S> = self.values(a).iter().zip(self.values(b)).map(|(&x, &y)| x + y).collect();
        let needs = self.input_needs_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Arc::new(out), shape, needs, Op::Add { a, b }))
    }

    /// Elementwise difference of two same-shape tensors.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("sub", a, b)?;
        let out: Vec<S> = self.values(a).iter().zip(self.values(b)).map(|(&x, &y)| x - y).collect();
        let needs = self.input_needs_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Arc::new(out), shape, needs, Op::Sub { a, b }))
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("mul", a, b)?;
        let out: Vec<S> = self.values(a).iter().zip(self.values(b)).map(|(&x, &y)| x * y).collect();
        let needs = self.input_needs_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Arc::new(out), shape, needs, Op::Mul { a, b }))
    }

    /// Multiplication by a compile-time-known constant.
    pub fn scale(&mut self, a: TensorId, c: S) -> Result<TensorId, TensorError> {
        let out: Vec<S> = self.values(a).iter().map(|&x| x * c).collect();
        let needs = self.needs_grad(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Arc::new(out), shape, needs, Op::Scale { a, c }))
    }

    /// Elementwise negation.
    pub fn neg(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.scale(a, -S::one())
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let out: Vec<S> = self.values(a).iter().map(|&x| x.exp()).collect();
        let needs = self.needs_grad(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Arc::new(out), shape, needs, Op::Exp { a }))
    }

    /// Elementwise natural log of `max(x, 1e-12)`; never returns `-inf` for
    /// non-negative inputs.
    pub fn ln(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let floor = S::from_f64c(LN_FLOOR);
        let out: Vec<S> = self.values(a).iter().map(|&x| x.max(floor).ln()).collect();
        let needs = self.needs_grad(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Arc::new(out), shape, needs, Op::Ln { a, floor }))
    }

    /// Elementwise `log(sigmoid(x))`, computed without overflow.
    pub fn log_sigmoid(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let out: Vec<S> = self.values(a).iter().map(|&x| kernels::log_sigmoid(x)).collect();
        let needs = self.needs_grad(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Arc::new(out), shape, needs, Op::LogSigmoid { a }))
    }

    /// Elementwise rectified linear unit.
    pub fn relu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let out: Vec<S> = self.values(a).iter().map(|&x| x.max(S::zero())).collect();
        let needs = self.needs_grad(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Arc::new(out), shape, needs, Op::Relu { a }))
    }

    /// Elementwise GELU (tanh approximation).
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let out: Vec<S> = self.values(a).iter().map(|&x| kernels::gelu(x)).collect();
        let needs = self.needs_grad(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Arc::new(out), shape, needs, Op::Gelu { a }))
    }

    /// Softmax over the last axis (numerically stable via max subtraction).
    pub fn softmax_last(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (rows, cols) = self.rows_cols("softmax", a)?;
        let mut out = self.values(a).to_vec();
        kernels::softmax_rows_inplace(&mut out, rows, cols);
        let needs = self.needs_grad(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Arc::new(out), shape, needs, Op::Softmax { a, rows, cols }))
    }

    /// Log-sum-exp over the last axis; output drops that axis.
    pub fn logsumexp_last(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (rows, cols) = self.rows_cols("logsumexp", a)?;
        let mut out = vec![S::zero(); rows];
        kernels::logsumexp_rows(self.values(a), rows, cols, &mut out);
        let needs = self.needs_grad(a);
        let shape: Vec<usize> = self.shape(a)[..self.shape(a).len() - 1].to_vec();
        Ok(self.push(Arc::new(out), shape, needs, Op::LogSumExp { a, rows, cols }))
    }

    /// Layer normalization over the last axis with learned scale/shift.
    ///
    /// `x` is `(..., C)`; `gamma` and `beta` are `(C)`.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId, TensorError> {
        let (rows, cols) = self.rows_cols("layer_norm", x)?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                details: format!(
                    "gamma {:?} / beta {:?} must be ({cols}) for input {:?}",
                    self.shape(gamma),
                    self.shape(beta),
                    self.shape(x)
                ),
            });
        }
        let eps = S::from_f64c(LAYER_NORM_EPS);
        let xv = self.values_arc(x);
        let gv = self.values_arc(gamma);
        let bv = self.values_arc(beta);
        let mut out = vec![S::zero(); rows * cols];
        let mut mean = vec![S::zero(); rows];
        let mut inv_std = vec![S::zero(); rows];
        let denom = S::from_f64c(cols as f64);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mu: S = row.iter().cloned().sum::<S>() / denom;
            let var: S = row
                .iter()
                .map(|&v| {
                    let d = v - mu;
                    d * d
                })
                .sum::<S>()
                / denom;
            let is = S::one() / (var + eps).sqrt();
            mean[r] = mu;
            inv_std[r] = is;
            for c in 0..cols {
                out[r * cols + c] = gv[c] * (row[c] - mu) * is + bv[c];
            }
        }
        let needs = self.input_needs_grad(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Arc::new(out),
            shape,
            needs,
            Op::LayerNorm { x, gamma, beta, rows, cols, mean, inv_std },
        ))
    }

    fn reduce_axis(&mut self, op: &'static str, a: TensorId, axis: usize, mean: bool) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op,
                details: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        if len == 0 {
            return Err(TensorError::InvalidArgument {
                op,
                details: format!("cannot reduce empty axis {axis} of shape {shape:?}"),
            });
        }
        let xv = self.values_arc(a);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&xv[base..base + inner]) {
                    *d += v;
                }
            }
        }
        if mean {
            let inv = S::one() / S::from_f64c(len as f64);
            for v in &mut out {
                *v *= inv;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let needs = self.needs_grad(a);
        Ok(self.push(Arc::new(out), out_shape, needs, Op::ReduceAxis { a, outer, len, inner, mean }))
    }

    /// Sum over one axis; the output drops that axis.
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        self.reduce_axis("sum_axis", a, axis, false)
    }

    /// Arithmetic mean over one axis; the output drops that axis.
    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        self.reduce_axis("mean_axis", a, axis, true)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let total: S = self.values(a).iter().cloned().sum();
        let needs = self.needs_grad(a);
        Ok(self.push(Arc::new(vec![total]), Vec::new(), needs, Op::SumAll { a }))
    }

    /// Inner product of two tensors with equal element counts, as a scalar.
    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.numel(a) != self.numel(b) {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                details: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out = kernels::dot(self.values(a), self.values(b));
        let needs = self.input_needs_grad(&[a, b]);
        Ok(self.push(Arc::new(vec![out]), Vec::new(), needs, Op::Dot { a, b }))
    }

    /// Euclidean norm of all elements, as a scalar.
    pub fn norm2(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let out = kernels::norm2(self.values(a));
        let needs = self.needs_grad(a);
        Ok(self.push(Arc::new(vec![out]), Vec::new(), needs, Op::Norm2 { a }))
    }

    /// Cosine similarity of two tensors with equal element counts, as a
    /// scalar; norms are clamped below by `1e-12`.
    pub fn cosine(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.numel(a) != self.numel(b) {
            return Err(TensorError::ShapeMismatch {
                op: "cosine",
                details: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out = kernels::cosine(self.values(a), self.values(b), S::from_f64c(COSINE_FLOOR));
        let needs = self.input_needs_grad(&[a, b]);
        Ok(self.push(Arc::new(vec![out]), Vec::new(), needs, Op::Cosine { a, b }))
    }

    /// Concatenation along `axis`; shapes must agree on every other axis.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId, TensorError> {
        let first = *parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            details: "need at least one input".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                details: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            let compatible = sp.len() == base.len()
                && sp.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    details: format!("{sp:?} incompatible with {base:?} along axis {axis}"),
                });
            }
            axis_total += sp[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let blocks: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for (&p, &block) in parts.iter().zip(&blocks) {
                let pv = self.values(p);
                out.extend_from_slice(&pv[o * block..(o + 1) * block]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = axis_total;
        let needs = self.input_needs_grad(parts);
        Ok(self.push(
            Arc::new(out),
            out_shape,
            needs,
            Op::Concat { parts: parts.to_vec(), outer, blocks },
        ))
    }

    /// Zero-copy reinterpretation with a new shape of equal element count.
    pub fn reshape(&mut self, a: TensorId, new_shape: Vec<usize>) -> Result<TensorId, TensorError> {
        if numel(&new_shape) != self.numel(a) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {:?}", self.shape(a), new_shape),
            });
        }
        let values = self.values_arc(a);
        let needs = self.needs_grad(a);
        Ok(self.push(values, new_shape, needs, Op::Reshape { a }))
    }

    /// Row lookup into a 2D `table (R, w)`: output row `i` is `table[rows[i]]`.
    /// Gradients scatter-add back into the table.
    pub fn gather_rows(&mut self, table: TensorId, rows: &[usize]) -> Result<TensorId, TensorError> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                details: format!("table must be 2D, got {st:?}"),
            });
        }
        let (r, w) = (st[0], st[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                details: format!("row index {bad} out of range for table with {r} rows"),
            });
        }
        let tv = self.values_arc(table);
        let mut out = Vec::with_capacity(rows.len() * w);
        for &i in rows {
            out.extend_from_slice(&tv[i * w..(i + 1) * w]);
        }
        let needs = self.needs_grad(table);
        let n = rows.len();
        Ok(self.push(
            Arc::new(out),
            vec![n, w],
            needs,
            Op::GatherRows { table, rows: Arc::new(rows.to_vec()), width: w },
        ))
    }

    /// Inverted dropout: keeps each element with probability `1 - rate` and
    /// rescales by `1/(1 - rate)`. `rate == 0` is an identity (no node is
    /// recorded). Callers skip this op entirely in evaluation mode.
    pub fn dropout<R: Rng>(&mut self, a: TensorId, rate: f64, rng: &mut R) -> Result<TensorId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                details: format!("rate must be in [0, 1), got {rate}"),
            });
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let inv_keep = S::from_f64c(1.0 / (1.0 - rate));
        let keep: Vec<bool> = (0..self.numel(a)).map(|_| rng.gen::<f64>() >= rate).collect();
        let out: Vec<S> = self
            .values(a)
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x * inv_keep } else { S::zero() })
            .collect();
        let needs = self.needs_grad(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Arc::new(out), shape, needs, Op::Dropout { a, keep: Arc::new(keep), inv_keep }))
    }

    /// Fused masked multi-head self-attention.
    ///
    /// `q`, `k`, `v` are `(n, t, d)` with `d = heads * head_dim`. For sample
    /// `i`, query position `tq` may attend to key position `tk` iff
    /// `allowed[i*t*t + tq*t + tk]`; disallowed scores become `-inf` before
    /// the softmax. Scores are scaled by `1/sqrt(head_dim)`. `attn_dropout`
    /// optionally applies inverted dropout to the attention weights.
    ///
    /// Equivalent to, but far cheaper in time and memory than, composing the
    /// per-head `matmul`/`softmax`/`dropout` primitives.
    pub fn mha<R: Rng>(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        heads: usize,
        allowed: &Arc<Vec<bool>>,
        attn_dropout: Option<(f64, &mut R)>,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "mha",
                details: format!("expected (n, t, d) operands, got {shape:?}"),
            });
        }
        self.check_same_shape("mha", q, k)?;
        self.check_same_shape("mha", q, v)?;
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "mha",
                details: format!("model dim {d} not divisible by heads {heads}"),
            });
        }
        if allowed.len() != n * t * t {
            return Err(TensorError::InvalidArgument {
                op: "mha",
                details: format!("mask has {} entries, expected n*t*t = {}", allowed.len(), n * t * t),
            });
        }
        if let Some((rate, _)) = attn_dropout {
            if !(0.0..1.0).contains(&rate) {
                return Err(TensorError::InvalidArgument {
                    op: "mha",
                    details: format!("dropout rate must be in [0, 1), got {rate}"),
                });
            }
        }
        let head_dim = d / heads;
        let scale = S::one() / S::from_f64c((head_dim as f64).sqrt());
        let qv = self.values_arc(q);
        let kv = self.values_arc(k);
        let vv = self.values_arc(v);

        let mut out = vec![S::zero(); n * t * d];
        let mut probs = vec![S::zero(); n * heads * t * t];
        let mut drop_mask: Vec<bool> = Vec::new();
        let mut inv_keep = S::one();
        let mut dropout = match attn_dropout {
            Some((rate, rng)) if rate > 0.0 => {
                drop_mask.reserve(n * heads * t * t);
                inv_keep = S::from_f64c(1.0 / (1.0 - rate));
                Some((rate, rng))
            }
            _ => None,
        };

        let mut block = vec![S::zero(); t * t];
        for i in 0..n {
            for h in 0..heads {
                let off = (i * t * d + h * head_dim) as isize;
                // block = scale * Q K^T for this (sample, head), with row
                // stride d selecting the head's slice of the packed buffers.
                // SAFETY: every addressed offset is below n*t*d (checked
                // shapes above); `block` is freshly sized t*t.
                unsafe {
                    S::gemm(
                        t,
                        head_dim,
                        t,
                        scale,
                        qv.as_ptr().offset(off),
                        d as isize,
                        1,
                        kv.as_ptr().offset(off),
                        1,
                        d as isize,
                        S::zero(),
                        block.as_mut_ptr(),
                        t as isize,
                        1,
                    );
                }
                let mask = &allowed[i * t * t..(i + 1) * t * t];
                for (s, &ok) in block.iter_mut().zip(mask) {
                    if !ok {
                        *s = S::neg_infinity();
                    }
                }
                kernels::softmax_rows_inplace(&mut block, t, t);
                probs[(i * heads + h) * t * t..(i * heads + h + 1) * t * t].copy_from_slice(&block);
                if let Some((rate, rng)) = dropout.as_mut() {
                    for p in block.iter_mut() {
                        let keep = rng.gen::<f64>() >= *rate;
                        drop_mask.push(keep);
                        *p = if keep { *p * inv_keep } else { S::zero() };
                    }
                }
                // out block = P V, written straight into the packed layout.
                // SAFETY: same bounds argument as above.
                unsafe {
                    S::gemm(
                        t,
                        t,
                        head_dim,
                        S::one(),
                        block.as_ptr(),
                        t as isize,
                        1,
                        vv.as_ptr().offset(off),
                        d as isize,
                        1,
                        S::zero(),
                        out.as_mut_ptr().offset(off),
                        d as isize,
                        1,
                    );
                }
            }
        }

        let drop = if drop_mask.is_empty() { None } else { Some((drop_mask, inv_keep)) };
        let needs = self.input_needs_grad(&[q, k, v]);
        Ok(self.push(
            Arc::new(out),
            vec![n, t, d],
            needs,
            Op::Mha {
                q,
                k,
                v,
                n,
                t,
                heads,
                head_dim,
                scale,
                probs,
                drop,
            },
        ))
    }
}
