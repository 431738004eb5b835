//! Reverse-mode gradient propagation.

// Index-based loops mirror the row/column arithmetic of the forward kernels;
// iterator rewrites would obscure the adjoint formulas.
#![allow(clippy::needless_range_loop)]

use super::kernels;
use super::{Node, Op, Tape, TensorError, TensorId};
use crate::scalar::Scalar;

fn ensure_grad<S: Scalar>(slot: &mut Option<Vec<S>>, numel: usize) -> &mut [S] {
    slot.get_or_insert_with(|| vec![S::zero(); numel]).as_mut_slice()
}

impl<S: Scalar> Tape<S> {
    /// Accumulates `d loss / d node` into every recorded node that leads to a
    /// gradient-requiring leaf. `loss` must be a single-element tensor.
    ///
    /// Gradients accumulate across calls: running backward twice doubles
    /// them. [`Tape::grad`] returns `None` for nodes the loss does not reach,
    /// which readers should treat as zero.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].needs_grad {
            // Loss does not depend on any trainable leaf; nothing to do.
            return Ok(());
        }
        // Work buffers are fresh per call so that repeated backward passes
        // accumulate exactly one extra copy of the gradient.
        let mut work: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = work[i].take() else { continue };
            backprop_node(&self.nodes, &mut work, i, &gout);
            work[i] = Some(gout);
        }
        for (slot, w) in self.grads.iter_mut().zip(work) {
            let Some(w) = w else { continue };
            match slot {
                None => *slot = Some(w),
                Some(g) => {
                    for (gv, wv) in g.iter_mut().zip(w) {
                        *gv += wv;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Propagates `gout` (gradient at node `i`) into the node's inputs.
fn backprop_node<S: Scalar>(nodes: &[Node<S>], work: &mut [Option<Vec<S>>], i: usize, gout: &[S]) {
    let needs = |id: TensorId| nodes[id.0].needs_grad;
    let node = &nodes[i];
    let one = S::one();
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b, m, k, n, a_t, b_t } => {
            let (m, k, n) = (*m, *k, *n);
            if needs(*a) {
                let bv = nodes[b.0].values.as_slice();
                let ga = ensure_grad(&mut work[a.0], nodes[a.0].values.len());
                match (*a_t, *b_t) {
                    // dA = dC B^T
                    (false, false) => kernels::gemm(ga, m, n, k, one, gout, false, bv, true, one),
                    // dA = dC B   (B stored (n,k))
                    (false, true) => kernels::gemm(ga, m, n, k, one, gout, false, bv, false, one),
                    // dA^T stored (k,m): op(B) dC^T
                    (true, false) => kernels::gemm(ga, k, n, m, one, bv, false, gout, true, one),
                    (true, true) => kernels::gemm(ga, k, n, m, one, bv, true, gout, true, one),
                }
            }
            if needs(*b) {
                let av = nodes[a.0].values.as_slice();
                let gb = ensure_grad(&mut work[b.0], nodes[b.0].values.len());
                match (*b_t, *a_t) {
                    // dB = op(A)^T dC
                    (false, false) => kernels::gemm(gb, k, m, n, one, av, true, gout, false, one),
                    (false, true) => kernels::gemm(gb, k, m, n, one, av, false, gout, false, one),
                    // dB stored (n,k): dC^T op(A)
                    (true, false) => kernels::gemm(gb, n, m, k, one, gout, true, av, false, one),
                    (true, true) => kernels::gemm(gb, n, m, k, one, gout, true, av, true, one),
                }
            }
        }
        Op::Linear { x, w, bias, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if needs(*x) {
                let wv = nodes[w.0].values.as_slice();
                let gx = ensure_grad(&mut work[x.0], m * k);
                kernels::gemm(gx, m, n, k, one, gout, false, wv, true, one);
            }
            if needs(*w) {
                let xv = nodes[x.0].values.as_slice();
                let gw = ensure_grad(&mut work[w.0], k * n);
                kernels::gemm(gw, k, m, n, one, xv, true, gout, false, one);
            }
            if needs(*bias) {
                let gb = ensure_grad(&mut work[bias.0], n);
                for row in gout.chunks_exact(n) {
                    for (g, &v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for &id in &[*a, *b] {
                if needs(id) {
                    let g = ensure_grad(&mut work[id.0], gout.len());
                    for (gv, &ov) in g.iter_mut().zip(gout) {
                        *gv += ov;
                    }
                }
            }
        }
        Op::Sub { a, b } => {
            if needs(*a) {
                let g = ensure_grad(&mut work[a.0], gout.len());
                for (gv, &ov) in g.iter_mut().zip(gout) {
                    *gv += ov;
                }
            }
            if needs(*b) {
                let g = ensure_grad(&mut work[b.0], gout.len());
                for (gv, &ov) in g.iter_mut().zip(gout) {
                    *gv -= ov;
                }
            }
        }
        Op::Mul { a, b } => {
            if needs(*a) {
                let bv = nodes[b.0].values.as_slice();
                let g = ensure_grad(&mut work[a.0], gout.len());
                for ((gv, &ov), &x) in g.iter_mut().zip(gout).zip(bv) {
                    *gv += ov * x;
                }
            }
            if needs(*b) {
                let av = nodes[a.0].values.as_slice();
                let g = ensure_grad(&mut work[b.0], gout.len());
                for ((gv, &ov), &x) in g.iter_mut().zip(gout).zip(av) {
                    *gv += ov * x;
                }
            }
        }
        Op::Scale { a, c } => {
            if needs(*a) {
                let g = ensure_grad(&mut work[a.0], gout.len());
                for (gv, &ov) in g.iter_mut().zip(gout) {
                    *gv += ov * *c;
                }
            }
        }
        Op::Exp { a } => {
            if needs(*a) {
                let yv = node.values.as_slice();
                let g = ensure_grad(&mut work[a.0], gout.len());
                for ((gv, &ov), &y) in g.iter_mut().zip(gout).zip(yv) {
                    *gv += ov * y;
                }
            }
        }
        Op::Ln { a, floor } => {
            if needs(*a) {
                let xv = nodes[a.0].values.as_slice();
                let g = ensure_grad(&mut work[a.0], gout.len());
                for ((gv, &ov), &x) in g.iter_mut().zip(gout).zip(xv) {
                    // The clamped region is constant, so its gradient is zero.
                    if x > *floor {
                        *gv += ov / x;
                    }
                }
            }
        }
        Op::LogSigmoid { a } => {
            if needs(*a) {
                let xv = nodes[a.0].values.as_slice();
                let g = ensure_grad(&mut work[a.0], gout.len());
                for ((gv, &ov), &x) in g.iter_mut().zip(gout).zip(xv) {
                    *gv += ov * kernels::sigmoid_neg(x);
                }
            }
        }
        Op::Relu { a } => {
            if needs(*a) {
                let xv = nodes[a.0].values.as_slice();
                let g = ensure_grad(&mut work[a.0], gout.len());
                for ((gv, &ov), &x) in g.iter_mut().zip(gout).zip(xv) {
                    if x > S::zero() {
                        *gv += ov;
                    }
                }
            }
        }
        Op::Gelu { a } => {
            if needs(*a) {
                let xv = nodes[a.0].values.as_slice();
                let g = ensure_grad(&mut work[a.0], gout.len());
                for ((gv, &ov), &x) in g.iter_mut().zip(gout).zip(xv) {
                    *gv += ov * kernels::gelu_grad(x);
                }
            }
        }
        Op::Softmax { a, rows, cols } => {
            if needs(*a) {
                let pv = node.values.as_slice();
                let g = ensure_grad(&mut work[a.0], gout.len());
                softmax_backward(g, gout, pv, *rows, *cols);
            }
        }
        Op::LogSumExp { a, rows, cols } => {
            if needs(*a) {
                let xv = nodes[a.0].values.as_slice();
                let lse = node.values.as_slice();
                let g = ensure_grad(&mut work[a.0], xv.len());
                for r in 0..*rows {
                    if !lse[r].is_finite() {
                        continue; // fully masked row: constant output
                    }
                    let ov = gout[r];
                    for c in 0..*cols {
                        let idx = r * cols + c;
                        g[idx] += ov * (xv[idx] - lse[r]).exp();
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, rows, cols, mean, inv_std } => {
            let (rows, cols) = (*rows, *cols);
            let xv = nodes[x.0].values.as_slice();
            let gv = nodes[gamma.0].values.as_slice();
            let inv_cols = S::one() / S::from_f64c(cols as f64);
            if needs(*x) {
                let gx = ensure_grad(&mut work[x.0], rows * cols);
                for r in 0..rows {
                    let (mu, is) = (mean[r], inv_std[r]);
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for c in 0..cols {
                        let idx = r * cols + c;
                        let xhat = (xv[idx] - mu) * is;
                        let gg = gout[idx] * gv[c];
                        m1 += gg;
                        m2 += gg * xhat;
                    }
                    m1 *= inv_cols;
                    m2 *= inv_cols;
                    for c in 0..cols {
                        let idx = r * cols + c;
                        let xhat = (xv[idx] - mu) * is;
                        gx[idx] += is * (gout[idx] * gv[c] - m1 - xhat * m2);
                    }
                }
            }
            if needs(*gamma) {
                let gg = ensure_grad(&mut work[gamma.0], cols);
                for r in 0..rows {
                    let (mu, is) = (mean[r], inv_std[r]);
                    for c in 0..cols {
                        let idx = r * cols + c;
                        gg[c] += gout[idx] * (xv[idx] - mu) * is;
                    }
                }
            }
            if needs(*beta) {
                let gb = ensure_grad(&mut work[beta.0], cols);
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] += gout[r * cols + c];
                    }
                }
            }
        }
        Op::ReduceAxis { a, outer, len, inner, mean } => {
            if needs(*a) {
                let factor = if *mean { S::one() / S::from_f64c(*len as f64) } else { S::one() };
                let g = ensure_grad(&mut work[a.0], outer * len * inner);
                for o in 0..*outer {
                    for l in 0..*len {
                        let base = (o * len + l) * inner;
                        for j in 0..*inner {
                            g[base + j] += gout[o * inner + j] * factor;
                        }
                    }
                }
            }
        }
        Op::SumAll { a } => {
            if needs(*a) {
                let ov = gout[0];
                let g = ensure_grad(&mut work[a.0], nodes[a.0].values.len());
                for gv in g.iter_mut() {
                    *gv += ov;
                }
            }
        }
        Op::Dot { a, b } => {
            let ov = gout[0];
            if needs(*a) {
                let bv = nodes[b.0].values.as_slice();
                let g = ensure_grad(&mut work[a.0], bv.len());
                for (gv, &x) in g.iter_mut().zip(bv) {
                    *gv += ov * x;
                }
            }
            if needs(*b) {
                let av = nodes[a.0].values.as_slice();
                let g = ensure_grad(&mut work[b.0], av.len());
                for (gv, &x) in g.iter_mut().zip(av) {
                    *gv += ov * x;
                }
            }
        }
        Op::Norm2 { a } => {
            if needs(*a) {
                let xv = nodes[a.0].values.as_slice();
                let denom = node.values[0].max(S::from_f64c(1e-12));
                let ov = gout[0];
                let g = ensure_grad(&mut work[a.0], xv.len());
                for (gv, &x) in g.iter_mut().zip(xv) {
                    *gv += ov * x / denom;
                }
            }
        }
        Op::Cosine { a, b } => {
            let av = nodes[a.0].values.as_slice();
            let bv = nodes[b.0].values.as_slice();
            let floor = S::from_f64c(super::ops::COSINE_FLOOR);
            let (na_raw, nb_raw) = (kernels::norm2(av), kernels::norm2(bv));
            let (na, nb) = (na_raw.max(floor), nb_raw.max(floor));
            let c = node.values[0];
            let ov = gout[0];
            if needs(*a) {
                let g = ensure_grad(&mut work[a.0], av.len());
                for ((gv, &x), &y) in g.iter_mut().zip(av).zip(bv) {
                    let mut d = y / (na * nb);
                    if na_raw > floor {
                        d -= c * x / (na * na);
                    }
                    *gv += ov * d;
                }
            }
            if needs(*b) {
                let g = ensure_grad(&mut work[b.0], bv.len());
                for ((gv, &y), &x) in g.iter_mut().zip(bv).zip(av) {
                    let mut d = x / (na * nb);
                    if nb_raw > floor {
                        d -= c * y / (nb * nb);
                    }
                    *gv += ov * d;
                }
            }
        }
        Op::Concat { parts, outer, blocks } => {
            let total: usize = blocks.iter().sum();
            for o in 0..*outer {
                let mut cursor = o * total;
                for (&p, &block) in parts.iter().zip(blocks) {
                    if needs(p) {
                        let g = ensure_grad(&mut work[p.0], nodes[p.0].values.len());
                        for (gv, &ov) in g[o * block..(o + 1) * block].iter_mut().zip(&gout[cursor..cursor + block]) {
                            *gv += ov;
                        }
                    }
                    cursor += block;
                }
            }
        }
        Op::Reshape { a } => {
            if needs(*a) {
                let g = ensure_grad(&mut work[a.0], gout.len());
                for (gv, &ov) in g.iter_mut().zip(gout) {
                    *gv += ov;
                }
            }
        }
        Op::GatherRows { table, rows, width } => {
            if needs(*table) {
                let g = ensure_grad(&mut work[table.0], nodes[table.0].values.len());
                for (i, &row) in rows.iter().enumerate() {
                    let dst = &mut g[row * width..(row + 1) * width];
                    let src = &gout[i * width..(i + 1) * width];
                    for (gv, &ov) in dst.iter_mut().zip(src) {
                        *gv += ov;
                    }
                }
            }
        }
        Op::Dropout { a, keep, inv_keep } => {
            if needs(*a) {
                let g = ensure_grad(&mut work[a.0], gout.len());
                for ((gv, &ov), &kp) in g.iter_mut().zip(gout).zip(keep.iter()) {
                    if kp {
                        *gv += ov * *inv_keep;
                    }
                }
            }
        }
        Op::Mha { q, k, v, n, t, heads, head_dim, scale, probs, drop } => {
            mha_backward(
                nodes,
                work,
                gout,
                MhaRefs { q: *q, k: *k, v: *v, n: *n, t: *t, heads: *heads, head_dim: *head_dim, scale: *scale, probs, drop },
            );
        }
    }
}

fn softmax_backward<S: Scalar>(g: &mut [S], gout: &[S], probs: &[S], rows: usize, cols: usize) {
    for r in 0..rows {
        let p = &probs[r * cols..(r + 1) * cols];
        let o = &gout[r * cols..(r + 1) * cols];
        let s: S = p.iter().zip(o).map(|(&pv, &ov)| pv * ov).sum();
        for c in 0..cols {
            g[r * cols + c] += p[c] * (o[c] - s);
        }
    }
}

struct MhaRefs<'a, S: Scalar> {
    q: TensorId,
    k: TensorId,
    v: TensorId,
    n: usize,
    t: usize,
    heads: usize,
    head_dim: usize,
    scale: S,
    probs: &'a [S],
    drop: &'a Option<(Vec<bool>, S)>,
}

/// Backward pass of the fused attention op. Contributions are first computed
/// into dense `(n, t, d)` buffers and only then merged into the input grads,
/// which keeps `q == k == v` aliasing correct.
fn mha_backward<S: Scalar>(nodes: &[Node<S>], work: &mut [Option<Vec<S>>], gout: &[S], r: MhaRefs<'_, S>) {
    let d = r.heads * r.head_dim;
    let total = r.n * r.t * d;
    let qv = nodes[r.q.0].values.as_slice();
    let kv = nodes[r.k.0].values.as_slice();
    let vv = nodes[r.v.0].values.as_slice();
    let mut dq = vec![S::zero(); total];
    let mut dk = vec![S::zero(); total];
    let mut dv = vec![S::zero(); total];
    let tt = r.t * r.t;
    let mut p_used = vec![S::zero(); tt];
    let mut dp = vec![S::zero(); tt];
    let mut ds = vec![S::zero(); tt];

    for i in 0..r.n {
        for h in 0..r.heads {
            let off = (i * r.t * d + h * r.head_dim) as isize;
            let block = (i * r.heads + h) * tt;
            let p_soft = &r.probs[block..block + tt];
            // Attention weights actually used in the forward output (after
            // optional dropout).
            match r.drop {
                Some((keep, inv_keep)) => {
                    for j in 0..tt {
                        p_used[j] = if keep[block + j] { p_soft[j] * *inv_keep } else { S::zero() };
                    }
                }
                None => p_used.copy_from_slice(p_soft),
            }
            // SAFETY for all gemm calls below: offsets stay inside the
            // (n, t, d) buffers whose lengths equal `total`; the t*t scratch
            // buffers are exactly tt long.
            unsafe {
                // dV += P_used^T dO
                S::gemm(
                    r.t, r.t, r.head_dim, S::one(),
                    p_used.as_ptr(), 1, r.t as isize,
                    gout.as_ptr().offset(off), d as isize, 1,
                    S::one(),
                    dv.as_mut_ptr().offset(off), d as isize, 1,
                );
                // dP_used = dO V^T
                S::gemm(
                    r.t, r.head_dim, r.t, S::one(),
                    gout.as_ptr().offset(off), d as isize, 1,
                    vv.as_ptr().offset(off), 1, d as isize,
                    S::zero(),
                    dp.as_mut_ptr(), r.t as isize, 1,
                );
            }
            // Backward through dropout onto the softmax output.
            if let Some((keep, inv_keep)) = r.drop {
                for j in 0..tt {
                    dp[j] = if keep[block + j] { dp[j] * *inv_keep } else { S::zero() };
                }
            }
            // Backward through the softmax: dS = P (dP - sum(dP * P)).
            ds.fill(S::zero());
            softmax_backward(&mut ds, &dp, p_soft, r.t, r.t);
            unsafe {
                // dQ += scale * dS K
                S::gemm(
                    r.t, r.t, r.head_dim, r.scale,
                    ds.as_ptr(), r.t as isize, 1,
                    kv.as_ptr().offset(off), d as isize, 1,
                    S::one(),
                    dq.as_mut_ptr().offset(off), d as isize, 1,
                );
                // dK += scale * dS^T Q
                S::gemm(
                    r.t, r.t, r.head_dim, r.scale,
                    ds.as_ptr(), 1, r.t as isize,
                    qv.as_ptr().offset(off), d as isize, 1,
                    S::one(),
                    dk.as_mut_ptr().offset(off), d as isize, 1,
                );
            }
        }
    }

    for (id, contrib) in [(r.q, dq), (r.k, dk), (r.v, dv)] {
        if nodes[id.0].needs_grad {
            let g = ensure_grad(&mut work[id.0], total);
            for (gv, cv) in g.iter_mut().zip(contrib) {
                *gv += cv;
            }
        }
    }
}
