//! Training objectives: next-item prediction, sequence-level contrast,
//! intent-level contrast, and intent-decayed contrast over the merged set of
//! pooled user representations and their intent-aware counterparts.
//!
//! Conventions shared by every loss: scores are dot products divided by a
//! temperature (default 1); each loss is averaged over the batch dimension
//! `n`; intent-side quantities (centroids, assignments, smoothed weights,
//! intent-aware representations, decay values) enter the graph as constants,
//! so gradients flow only through encoder outputs.

use std::sync::Arc;

use thiserror::Error;

use crate::dataset::SequenceBatch;
use crate::intent::IntentModel;
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorError, TensorId};

/// Floor for `1 - cos` inside the decay, bounding it at ~27.575.
pub const DECAY_COS_FLOOR: f64 = 1e-8;
/// Norm floor when a cosine input is the zero vector.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{0}")]
    Tensor(#[from] TensorError),
    #[error("contrastive losses need at least 2 sequences per batch, got {n}")]
    BatchTooSmall { n: usize },
    #[error("invalid loss argument: {0}")]
    Invalid(String),
}

/// Strengths of the three auxiliary objectives in the joint loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Sequence-level contrast.
    pub beta: f64,
    /// Intent-level contrast.
    pub lambda: f64,
    /// Decayed multi-intent contrast.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta: 0.1, lambda: 0.1, gamma: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::Invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// True when every auxiliary term is off (pure next-item training).
    pub fn rec_only(&self) -> bool {
        self.beta == 0.0 && self.lambda == 0.0 && self.gamma == 0.0
    }
}

fn check_temperature(temperature: f64) -> Result<(), LossError> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(LossError::Invalid(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// Picks one entry per row of a `(rows, cols)` tensor through a constant
/// one-hot mask; the result is a `(rows)` vector. Safe for gradient flow as
/// long as the selected entries are finite.
fn select_per_row<S: Scalar>(
    tape: &mut Tape<S>,
    matrix: TensorId,
    indices: &[usize],
) -> Result<TensorId, TensorError> {
    let shape = tape.shape(matrix).to_vec();
    let (rows, cols) = (shape[0], shape[1]);
    debug_assert_eq!(indices.len(), rows);
    let mut onehot = vec![S::zero(); rows * cols];
    for (r, &c) in indices.iter().enumerate() {
        onehot[r * cols + c] = S::one();
    }
    let oh = tape.constant(onehot, vec![rows, cols])?;
    let picked = tape.mul(matrix, oh)?;
    tape.sum_axis(picked, 1)
}

/// Next-item objective: for every non-padded position, binary cross entropy
/// on the dot scores of the hidden state against the true next item and one
/// sampled negative, summed over positions and divided by the batch size.
pub fn loss_rec<S: Scalar>(
    tape: &mut Tape<S>,
    per_step: TensorId,
    item_embedding: TensorId,
    batch: &SequenceBatch,
) -> Result<TensorId, LossError> {
    let shape = tape.shape(per_step).to_vec();
    if shape.len() != 3 || shape[0] != batch.n || shape[1] != batch.t {
        return Err(LossError::Invalid(format!(
            "per_step shape {shape:?} does not match batch (n={}, t={})",
            batch.n, batch.t
        )));
    }
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(per_step, vec![n * t, d])?;
    let tgt_rows: Vec<usize> = batch.targets.iter().map(|&i| i as usize).collect();
    let neg_rows: Vec<usize> = batch.negatives.iter().map(|&i| i as usize).collect();
    let pos_emb = tape.gather_rows(item_embedding, &tgt_rows)?;
    let neg_emb = tape.gather_rows(item_embedding, &neg_rows)?;

    let pos_prod = tape.mul(flat, pos_emb)?;
    let pos_score = tape.sum_axis(pos_prod, 1)?;
    let neg_prod = tape.mul(flat, neg_emb)?;
    let neg_score = tape.sum_axis(neg_prod, 1)?;

    // log sigma(s+) + log(1 - sigma(s-)) = log sigma(s+) + log sigma(-s-).
    let lp = tape.log_sigmoid(pos_score)?;
    let neg_neg = tape.neg(neg_score)?;
    let ln = tape.log_sigmoid(neg_neg)?;
    let per_pos = tape.add(lp, ln)?;

    let mask: Vec<S> = batch.mask.iter().map(|&m| if m { S::one() } else { S::zero() }).collect();
    let mask_t = tape.constant(mask, vec![n * t])?;
    let masked = tape.mul(per_pos, mask_t)?;
    let total = tape.sum_all(masked)?;
    Ok(tape.scale(total, S::from_f64c(-1.0 / n as f64))?)
}

/// Symmetric sequence-level contrast between two flattened view batches of
/// shape `(n, width)`: for each of the 2n anchors, the paired view is the
/// positive and the remaining 2(n-1) vectors plus the positive form the
/// denominator; self-similarity is excluded. Sum over anchors divided by n.
pub fn loss_cl<S: Scalar>(
    tape: &mut Tape<S>,
    view_a: TensorId,
    view_b: TensorId,
    temperature: f64,
) -> Result<TensorId, LossError> {
    check_temperature(temperature)?;
    let sa = tape.shape(view_a).to_vec();
    let sb = tape.shape(view_b).to_vec();
    if sa.len() != 2 || sa != sb {
        return Err(LossError::Invalid(format!("views must share a (n, width) shape: {sa:?} vs {sb:?}")));
    }
    let n = sa[0];
    if n < 2 {
        return Err(LossError::BatchTooSmall { n });
    }
    let z = tape.concat(&[view_a, view_b], 0)?;
    let dots = tape.matmul_nt(z, z)?;
    let scaled = tape.scale(dots, S::from_f64c(1.0 / temperature))?;

    // Exclude each anchor from its own denominator.
    let m = 2 * n;
    let mut diag = vec![S::zero(); m * m];
    for i in 0..m {
        diag[i * m + i] = S::from_f64c(f64::NEG_INFINITY);
    }
    let diag_t = tape.constant(diag, vec![m, m])?;
    let masked = tape.add(scaled, diag_t)?;
    let lse = tape.logsumexp_last(masked)?;

    let partners: Vec<usize> = (0..m).map(|i| (i + n) % m).collect();
    let pos = select_per_row(tape, scaled, &partners)?;
    let diff = tape.sub(lse, pos)?;
    let total = tape.sum_all(diff)?;
    Ok(tape.scale(total, S::from_f64c(1.0 / n as f64))?)
}

/// Intent-level contrast: each pooled view vector against all K centroids,
/// positive = its nearest-centroid assignment (from the un-augmented batch
/// representations). Centroids and assignments are constants. Sum over all
/// views and users divided by `views.len() * n`.
pub fn loss_icl<S: Scalar>(
    tape: &mut Tape<S>,
    views: &[TensorId],
    model: &IntentModel<S>,
    assignments: &[usize],
    temperature: f64,
) -> Result<TensorId, LossError> {
    check_temperature(temperature)?;
    if views.is_empty() {
        return Err(LossError::Invalid("at least one view is required".into()));
    }
    let shape = tape.shape(views[0]).to_vec();
    if shape.len() != 2 || shape[1] != model.dim() {
        return Err(LossError::Invalid(format!(
            "views must be (n, {}), got {shape:?}",
            model.dim()
        )));
    }
    let n = shape[0];
    if assignments.len() != n {
        return Err(LossError::Invalid(format!(
            "expected {n} assignments, got {}",
            assignments.len()
        )));
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= model.k()) {
        return Err(LossError::Invalid(format!("assignment {bad} out of range for K={}", model.k())));
    }
    let centroids = tape.constant(model.centroids().to_vec(), vec![model.k(), model.dim()])?;
    let mut terms = Vec::with_capacity(views.len());
    for &view in views {
        let vs = tape.shape(view).to_vec();
        if vs != shape {
            return Err(LossError::Invalid(format!("view shapes differ: {shape:?} vs {vs:?}")));
        }
        let dots = tape.matmul_nt(view, centroids)?;
        let scaled = tape.scale(dots, S::from_f64c(1.0 / temperature))?;
        let lse = tape.logsumexp_last(scaled)?;
        let pos = select_per_row(tape, scaled, assignments)?;
        let diff = tape.sub(lse, pos)?;
        terms.push(tape.sum_all(diff)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, S::from_f64c(1.0 / (views.len() * n) as f64))?)
}

/// Decay value for a cosine: `log2(2 / max(1 - cos, 1e-8))`.
///
/// Anti-aligned profiles (cos = -1) decay by 0, orthogonal ones by 1, and
/// near-identical ones by up to ~27.575 (the clamp).
pub fn decay_from_cos(cos: f64) -> f64 {
    (2.0 / (1.0 - cos).max(DECAY_COS_FLOOR)).log2()
}

fn cos_f64<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64c(), y.to_f64c());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt().max(NORM_FLOOR) * nb.sqrt().max(NORM_FLOOR))
}

/// Pairwise decay table over the merged set `B = {pooled reps} ∪ {intent
/// reps}` (2n x 2n, row-major). Entry rules:
///
/// - identical element vectors (the diagonal in particular): `+∞`;
/// - both elements user-side: decay of `cos` between their smoothed intent
///   weight rows;
/// - any other pair: decay of `cos` between the intent-aware representations
///   associated with the two elements (a user-side element maps to its own
///   intent-aware representation).
///
/// `shift` is added to every finite entry (used by the shift-invariance
/// check; 0 in training).
pub fn decay_matrix<S: Scalar>(
    x_bar: &[S],
    c_bar: &[S],
    w_hat: &[S],
    n: usize,
    d: usize,
    k: usize,
    shift: f64,
) -> Vec<f64> {
    assert_eq!(x_bar.len(), n * d, "x_bar must be n x d");
    assert_eq!(c_bar.len(), n * d, "c_bar must be n x d");
    assert_eq!(w_hat.len(), n * k, "w_hat must be n x k");
    let m = 2 * n;
    let element = |i: usize| -> &[S] {
        if i < n {
            &x_bar[i * d..(i + 1) * d]
        } else {
            &c_bar[(i - n) * d..(i - n + 1) * d]
        }
    };
    let mut out = vec![0.0; m * m];
    for p in 0..m {
        for q in 0..m {
            let v = if element(p) == element(q) {
                f64::INFINITY
            } else if p < n && q < n {
                decay_from_cos(cos_f64(&w_hat[p * k..(p + 1) * k], &w_hat[q * k..(q + 1) * k])) + shift
            } else {
                let (up, uq) = (p % n, q % n);
                decay_from_cos(cos_f64(&c_bar[up * d..(up + 1) * d], &c_bar[uq * d..(uq + 1) * d]))
                    + shift
            };
            out[p * m + q] = v;
        }
    }
    out
}

/// Decayed contrast over the merged set: anchors are the 2n elements of
/// `B = {x̄} ∪ {c̄}`; the positive of `x̄_u` is `c̄_u` and vice versa;
/// similarity is `dot/temperature - D`. Each anchor's denominator ranges
/// over the other 2n-1 elements (identical-vector pairs drop out via
/// `exp(-∞) = 0`). Sum over anchors divided by n.
///
/// Only `x_bar` is differentiated; `c_bar` and `w_hat` are per-batch
/// constants.
pub fn loss_mcl<S: Scalar>(
    tape: &mut Tape<S>,
    x_bar: TensorId,
    c_bar: &[S],
    w_hat: &[S],
    k: usize,
    temperature: f64,
) -> Result<TensorId, LossError> {
    loss_mcl_shifted(tape, x_bar, c_bar, w_hat, k, temperature, 0.0)
}

/// [`loss_mcl`] with a constant added to every finite decay value; exposed
/// for the softmax shift-invariance property check.
pub fn loss_mcl_shifted<S: Scalar>(
    tape: &mut Tape<S>,
    x_bar: TensorId,
    c_bar: &[S],
    w_hat: &[S],
    k: usize,
    temperature: f64,
    shift: f64,
) -> Result<TensorId, LossError> {
    check_temperature(temperature)?;
    let shape = tape.shape(x_bar).to_vec();
    if shape.len() != 2 {
        return Err(LossError::Invalid(format!("x_bar must be (n, d), got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(LossError::BatchTooSmall { n });
    }
    if c_bar.len() != n * d || k == 0 || w_hat.len() != n * k {
        return Err(LossError::Invalid(format!(
            "intent sides must be n*d={} and n*k values, got {} and {}",
            n * d,
            c_bar.len(),
            w_hat.len()
        )));
    }
    let x_vals = tape.values(x_bar).to_vec();
    let decay = decay_matrix(&x_vals, c_bar, w_hat, n, d, k, shift);

    let c_t = tape.constant(c_bar.to_vec(), vec![n, d])?;
    let z = tape.concat(&[x_bar, c_t], 0)?;
    let dots = tape.matmul_nt(z, z)?;
    let scaled = tape.scale(dots, S::from_f64c(1.0 / temperature))?;

    // sim = dot/temperature - D; infinite D entries become -inf similarity.
    let m = 2 * n;
    let decay_t = tape.constant(decay.iter().map(|&v| S::from_f64c(v)).collect(), vec![m, m])?;
    let sim = tape.sub(scaled, decay_t)?;
    let lse = tape.logsumexp_last(sim)?;

    // The positive score is rebuilt from the finite dot matrix so the
    // one-hot selection never multiplies 0 by an infinity.
    let partners: Vec<usize> = (0..m).map(|i| (i + n) % m).collect();
    let pos_dots = select_per_row(tape, scaled, &partners)?;
    let pos_decay: Vec<S> = partners
        .iter()
        .enumerate()
        .map(|(i, &p)| S::from_f64c(decay[i * m + p]))
        .collect();
    let pos_decay_t = tape.constant(pos_decay, vec![m])?;
    let pos = tape.sub(pos_dots, pos_decay_t)?;

    let diff = tape.sub(lse, pos)?;
    let total = tape.sum_all(diff)?;
    Ok(tape.scale(total, S::from_f64c(1.0 / n as f64))?)
}

/// Weighted sum `rec + beta*cl + lambda*icl + gamma*mcl`. A term whose
/// weight is 0 is skipped (and may be absent); a positive weight with a
/// missing term is an error.
pub fn loss_joint<S: Scalar>(
    tape: &mut Tape<S>,
    rec: TensorId,
    cl: Option<TensorId>,
    icl: Option<TensorId>,
    mcl: Option<TensorId>,
    weights: &LossWeights,
) -> Result<TensorId, LossError> {
    weights.validate()?;
    let mut total = rec;
    for (name, weight, term) in
        [("cl", weights.beta, cl), ("icl", weights.lambda, icl), ("mcl", weights.gamma, mcl)]
    {
        if weight == 0.0 {
            continue;
        }
        let Some(term) = term else {
            return Err(LossError::Invalid(format!(
                "loss term `{name}` has weight {weight} but was not computed"
            )));
        };
        let scaled = tape.scale(term, S::from_f64c(weight))?;
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

/// Builds the visibility mask constant used by padded-position bookkeeping.
/// Re-exported convenience for callers assembling custom graphs.
pub fn mask_values<S: Scalar>(mask: &[bool]) -> Arc<Vec<S>> {
    Arc::new(mask.iter().map(|&m| if m { S::one() } else { S::zero() }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_batch, InteractionDataset};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn scalar_of(tape: &Tape<f64>, id: TensorId) -> f64 {
        tape.values(id)[0]
    }

    // ---------- straight-line oracles ----------

    fn oracle_rec(h: &[f64], pos: &[f64], neg: &[f64], mask: &[bool], n: usize, t: usize, d: usize) -> f64 {
        let mut total = 0.0;
        for p in 0..n * t {
            if !mask[p] {
                continue;
            }
            let hp = &h[p * d..(p + 1) * d];
            let sp: f64 = hp.iter().zip(&pos[p * d..(p + 1) * d]).map(|(a, b)| a * b).sum();
            let sn: f64 = hp.iter().zip(&neg[p * d..(p + 1) * d]).map(|(a, b)| a * b).sum();
            let log_sig = |x: f64| -> f64 {
                if x >= 0.0 {
                    -(1.0 + (-x).exp()).ln()
                } else {
                    x - (1.0 + x.exp()).ln()
                }
            };
            total += log_sig(sp) + log_sig(-sn);
        }
        -total / n as f64
    }

    fn oracle_cl(a: &[f64], b: &[f64], n: usize, width: usize, tau: f64) -> f64 {
        let m = 2 * n;
        let row = |i: usize| -> &[f64] {
            if i < n {
                &a[i * width..(i + 1) * width]
            } else {
                &b[(i - n) * width..(i - n + 1) * width]
            }
        };
        let mut total = 0.0;
        for i in 0..m {
            let partner = (i + n) % m;
            let score = |j: usize| -> f64 {
                row(i).iter().zip(row(j)).map(|(x, y)| x * y).sum::<f64>() / tau
            };
            let mut denom = 0.0;
            for j in 0..m {
                if j != i {
                    denom += score(j).exp();
                }
            }
            total += denom.ln() - score(partner);
        }
        total / n as f64
    }

    #[allow(clippy::too_many_arguments)]
    fn oracle_mcl(
        x: &[f64],
        c: &[f64],
        w: &[f64],
        n: usize,
        d: usize,
        k: usize,
        tau: f64,
        shift: f64,
    ) -> f64 {
        let dmat = decay_matrix(x, c, w, n, d, k, shift);
        let m = 2 * n;
        let row = |i: usize| -> &[f64] {
            if i < n {
                &x[i * d..(i + 1) * d]
            } else {
                &c[(i - n) * d..(i - n + 1) * d]
            }
        };
        let sim = |i: usize, j: usize| -> f64 {
            let dot: f64 = row(i).iter().zip(row(j)).map(|(p, q)| p * q).sum();
            dot / tau - dmat[i * m + j]
        };
        let mut total = 0.0;
        for i in 0..m {
            let partner = (i + n) % m;
            let mut denom = 0.0;
            for j in 0..m {
                if j != i {
                    let s = sim(i, j);
                    if s.is_finite() {
                        denom += s.exp();
                    }
                }
            }
            total += denom.ln() - sim(i, partner);
        }
        total / n as f64
    }

    // ---------- loss_rec ----------

    #[test]
    fn rec_zero_scores_cost_two_ln_two_per_position() {
        // Zero hidden states and zero embeddings: every masked position
        // contributes 2*ln 2.
        let ds = InteractionDataset::new(vec![vec![1, 2, 3, 4, 5]], 6).unwrap();
        let mut rng = StdRng::seed_from_u64(0);
        let batch = build_batch(&ds, &[0], 4, &mut rng).unwrap(); // 2 masked positions
        let mut tape: Tape<f64> = Tape::new();
        let h = tape.leaf(vec![0.0; 4 * 3], vec![1, 4, 3], true).unwrap();
        let emb = tape.leaf(vec![0.0; 7 * 3], vec![7, 3], true).unwrap();
        let loss = loss_rec(&mut tape, h, emb, &batch).unwrap();
        assert_relative_eq!(scalar_of(&tape, loss), 4.0 * std::f64::consts::LN_2, max_relative = 1e-12);
    }

    #[test]
    fn rec_saturated_scores_drive_loss_to_zero() {
        let ds = InteractionDataset::new(vec![vec![1, 2, 3]], 4).unwrap();
        let mut rng = StdRng::seed_from_u64(1);
        let batch = build_batch(&ds, &[0], 2, &mut rng).unwrap(); // single masked position
        let mut tape: Tape<f64> = Tape::new();
        let h = tape.leaf(vec![30.0, 30.0, 30.0, 30.0], vec![1, 2, 2], true).unwrap();
        // Target rows +1, negative row -1 on both coords.
        let mut emb_vals = vec![0.0; 5 * 2];
        for i in 1..5 {
            let v = if i == batch.negatives[1] as usize { -1.0 } else { 1.0 };
            emb_vals[i * 2] = v;
            emb_vals[i * 2 + 1] = v;
        }
        let emb = tape.leaf(emb_vals, vec![5, 2], true).unwrap();
        let loss = loss_rec(&mut tape, h, emb, &batch).unwrap();
        assert!(scalar_of(&tape, loss).abs() < 1e-9, "saturated loss ~ 0, got {}", scalar_of(&tape, loss));
    }

    #[test]
    fn rec_matches_scripted_oracle() {
        let ds = InteractionDataset::new(
            vec![vec![1, 2, 3, 4, 5, 6], vec![2, 1, 4, 3], vec![5, 5, 8]],
            8,
        )
        .unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        let batch = build_batch(&ds, &[0, 1, 2], 5, &mut rng).unwrap();
        let (n, t, d) = (3, 5, 4);
        let h_vals: Vec<f64> = (0..n * t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let emb_vals: Vec<f64> = (0..9 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape: Tape<f64> = Tape::new();
        let h = tape.leaf(h_vals.clone(), vec![n, t, d], true).unwrap();
        let emb = tape.leaf(emb_vals.clone(), vec![9, d], true).unwrap();
        let loss = loss_rec(&mut tape, h, emb, &batch).unwrap();
        let gather = |ids: &[u32]| -> Vec<f64> {
            ids.iter().flat_map(|&i| emb_vals[i as usize * d..(i as usize + 1) * d].to_vec()).collect()
        };
        let want = oracle_rec(&h_vals, &gather(&batch.targets), &gather(&batch.negatives), &batch.mask, n, t, d);
        assert_relative_eq!(scalar_of(&tape, loss), want, max_relative = 1e-9);
        // Gradients reach the hidden states and embeddings.
        tape.backward(loss).unwrap();
        assert!(tape.grad(h).unwrap().iter().any(|&g| g != 0.0));
        assert!(tape.grad(emb).unwrap().iter().any(|&g| g != 0.0));
    }

    // ---------- loss_cl ----------

    #[test]
    fn cl_orthonormal_views_match_closed_form() {
        // Positives dot 1, every other pair dot 0, n=2: each of the 4 anchor
        // terms is -log(e / (e + 2)).
        let a = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let b = a.clone();
        let mut tape: Tape<f64> = Tape::new();
        let va = tape.leaf(a, vec![2, 4], true).unwrap();
        let vb = tape.leaf(b, vec![2, 4], true).unwrap();
        let loss = loss_cl(&mut tape, va, vb, 1.0).unwrap();
        let e = std::f64::consts::E;
        let per_term = -(e / (e + 2.0)).ln();
        assert_relative_eq!(scalar_of(&tape, loss), 4.0 * per_term / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn cl_colliding_negative_raises_loss() {
        let ortho = [1.0, 0.0, 0.0, 1.0];
        let mut tape: Tape<f64> = Tape::new();
        let va = tape.leaf(ortho.to_vec(), vec![2, 2], true).unwrap();
        let vb = tape.leaf(ortho.to_vec(), vec![2, 2], true).unwrap();
        let base_id = loss_cl(&mut tape, va, vb, 1.0).unwrap();
        let base = scalar_of(&tape, base_id);

        // Second sequence collides with the first: negatives gain weight.
        let collide = [1.0, 0.0, 1.0, 0.0];
        let mut tape: Tape<f64> = Tape::new();
        let va = tape.leaf(collide.to_vec(), vec![2, 2], true).unwrap();
        let vb = tape.leaf(collide.to_vec(), vec![2, 2], true).unwrap();
        let coll_id = loss_cl(&mut tape, va, vb, 1.0).unwrap();
        let coll = scalar_of(&tape, coll_id);
        assert!(coll > base, "colliding negatives must increase the loss: {coll} vs {base}");
    }

    #[test]
    fn cl_matches_brute_force_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        for trial in 0..20 {
            let n = 3;
            let width = 5;
            let tau = if trial % 2 == 0 { 1.0 } else { 0.7 };
            let a: Vec<f64> = (0..n * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape: Tape<f64> = Tape::new();
            let va = tape.leaf(a.clone(), vec![n, width], true).unwrap();
            let vb = tape.leaf(b.clone(), vec![n, width], true).unwrap();
            let loss = loss_cl(&mut tape, va, vb, tau).unwrap();
            assert_relative_eq!(scalar_of(&tape, loss), oracle_cl(&a, &b, n, width, tau), max_relative = 1e-9);
            tape.backward(loss).unwrap();
            assert!(tape.grad(va).unwrap().iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn cl_single_sequence_batch_is_an_error() {
        let mut tape: Tape<f64> = Tape::new();
        let va = tape.leaf(vec![1.0, 2.0], vec![1, 2], true).unwrap();
        let vb = tape.leaf(vec![3.0, 4.0], vec![1, 2], true).unwrap();
        assert!(matches!(loss_cl(&mut tape, va, vb, 1.0), Err(LossError::BatchTooSmall { n: 1 })));
    }

    // ---------- loss_icl ----------

    #[test]
    fn icl_matches_closed_form_when_rep_sits_on_centroid() {
        // x̄ = c_0 with ||c_0||^2 = s; other centroids orthogonal to it and
        // to x̄: loss = -log(e^s / (e^s + (K-1))).
        let k = 4;
        let d = 4;
        let alpha: f64 = 1.3;
        let mut cen = vec![0.0; k * d];
        cen[0] = alpha; // c0 = alpha * e0
        for c in 1..k {
            cen[c * d + c] = 0.9; // orthogonal directions with x̄ dot 0
        }
        let model = IntentModel::new(k, 2, d, cen).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let mut x = vec![0.0; d];
        x[0] = alpha;
        let v = tape.leaf(x, vec![1, d], true).unwrap();
        let loss = loss_icl(&mut tape, &[v], &model, &[0], 1.0).unwrap();
        let s = alpha * alpha;
        let want = -((s.exp()) / (s.exp() + (k - 1) as f64)).ln();
        assert_relative_eq!(scalar_of(&tape, loss), want, max_relative = 1e-12);
    }

    #[test]
    fn icl_identical_centroids_give_log_2() {
        let model = IntentModel::new(2, 1, 3, vec![0.4, -0.2, 1.0, 0.4, -0.2, 1.0]).unwrap();
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..5 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut tape: Tape<f64> = Tape::new();
            let v = tape.leaf(x, vec![2, 3], true).unwrap();
            let loss = loss_icl(&mut tape, &[v], &model, &[0, 1], 1.0).unwrap();
            assert_relative_eq!(scalar_of(&tape, loss), std::f64::consts::LN_2, max_relative = 1e-12);
        }
    }

    #[test]
    fn icl_matches_scripted_oracle_and_averages_views() {
        let mut rng = StdRng::seed_from_u64(5);
        let (n, d, k) = (3, 4, 5);
        let cen: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let model = IntentModel::new(k, 2, d, cen.clone()).unwrap();
        let xa: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xb: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let assign = vec![2, 0, 4];
        let tau = 0.8;

        let oracle_one = |x: &Vec<f64>| -> f64 {
            let mut total = 0.0;
            for u in 0..n {
                let xu = &x[u * d..(u + 1) * d];
                let score = |c: usize| -> f64 {
                    xu.iter().zip(&cen[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum::<f64>() / tau
                };
                let denom: f64 = (0..k).map(|c| score(c).exp()).sum();
                total += denom.ln() - score(assign[u]);
            }
            total / n as f64
        };

        let mut tape: Tape<f64> = Tape::new();
        let va = tape.leaf(xa.clone(), vec![n, d], true).unwrap();
        let vb = tape.leaf(xb.clone(), vec![n, d], true).unwrap();
        let a_id = loss_icl(&mut tape, &[va], &model, &assign, tau).unwrap();
        let b_id = loss_icl(&mut tape, &[vb], &model, &assign, tau).unwrap();
        let ab_id = loss_icl(&mut tape, &[va, vb], &model, &assign, tau).unwrap();
        let a_only = scalar_of(&tape, a_id);
        let b_only = scalar_of(&tape, b_id);
        let both = scalar_of(&tape, ab_id);
        assert_relative_eq!(a_only, oracle_one(&xa), max_relative = 1e-9);
        assert_relative_eq!(b_only, oracle_one(&xb), max_relative = 1e-9);
        assert_relative_eq!(both, 0.5 * (a_only + b_only), max_relative = 1e-12);
    }

    // ---------- decay ----------

    #[test]
    fn decay_analytic_values() {
        assert_relative_eq!(decay_from_cos(0.0), 1.0, max_relative = 1e-15);
        assert_relative_eq!(decay_from_cos(-1.0), 0.0, epsilon = 1e-15);
        assert_relative_eq!(decay_from_cos(0.5), 2.0, max_relative = 1e-15);
        // Clamp: cos -> 1 gives log2(2e8).
        assert_relative_eq!(decay_from_cos(1.0), (2e8f64).log2(), max_relative = 1e-12);
        assert!(decay_from_cos(0.999_999_999) <= (2e8f64).log2() + 1e-9);
    }

    #[test]
    fn decay_matrix_routes_pairs_correctly() {
        let n = 2;
        let (d, k) = (2, 3);
        let x = vec![1.0, 0.0, 0.0, 1.0];
        let c = vec![0.5, 0.5, -0.5, 0.5];
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let dm = decay_matrix(&x, &c, &w, n, d, k, 0.0);
        let m = 2 * n;
        // Diagonal: identical vectors.
        for i in 0..m {
            assert!(dm[i * m + i].is_infinite());
        }
        // User-user pair: cos of weight rows = 0 -> decay 1.
        assert_relative_eq!(dm[1], 1.0, max_relative = 1e-12);
        // Symmetry everywhere.
        for p in 0..m {
            for q in 0..m {
                assert_eq!(dm[p * m + q], dm[q * m + p]);
            }
        }
        // User-intent / intent-intent pairs use the intent representations:
        // cos(c0, c1) = 0 here -> decay 1.
        assert_relative_eq!(dm[3], 1.0, max_relative = 1e-12); // x̄_0 vs c̄_1
        assert_relative_eq!(dm[2 * m + 3], 1.0, max_relative = 1e-12); // c̄_0 vs c̄_1
        // Positive pairs share the same intent rep: cos = 1 -> clamped max.
        assert_relative_eq!(dm[2], (2e8f64).log2(), max_relative = 1e-12);

        // Identical pooled representations are +∞ even off-diagonal.
        let x_dup = vec![1.0, 0.0, 1.0, 0.0];
        let dm = decay_matrix(&x_dup, &c, &w, n, d, k, 0.0);
        assert!(dm[1].is_infinite());
    }

    // ---------- loss_mcl ----------

    #[test]
    fn mcl_constant_decay_reduces_to_plain_infonce() {
        // All smoothed-weight rows identical (cos 1) and all intent reps
        // parallel but distinct (cos 1): every finite decay equals the clamp
        // value, which cancels in the softmax. The result must equal plain
        // InfoNCE on the dot products with the same exclusions.
        let n = 3;
        let (d, k) = (3, 4);
        let mut rng = StdRng::seed_from_u64(6);
        let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = [0.6, -0.2, 0.3];
        let c: Vec<f64> = (1..=n).flat_map(|s| base.iter().map(move |&b| b * s as f64)).collect();
        let w: Vec<f64> = (0..n).flat_map(|_| [0.25, 0.25, 0.25, 0.25]).collect();

        let mut tape: Tape<f64> = Tape::new();
        let xt = tape.leaf(x.clone(), vec![n, d], true).unwrap();
        let got_id = loss_mcl(&mut tape, xt, &c, &w, k, 1.0).unwrap();
        let got = scalar_of(&tape, got_id);

        // Plain InfoNCE over the same merged set: reuse the mcl oracle with
        // a zero decay matrix by shifting all entries down by the clamp.
        let clamp = (2e8f64).log2();
        let want = oracle_mcl(&x, &c, &w, n, d, k, 1.0, -clamp) // all finite entries now 0
            ;
        assert_relative_eq!(got, want, max_relative = 1e-9);
    }

    #[test]
    fn mcl_matches_brute_force_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        for trial in 0..20 {
            let n = 2 + trial % 3;
            let d = 3;
            let k = 4;
            let tau = if trial % 2 == 0 { 1.0 } else { 1.3 };
            let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..n * k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let mut tape: Tape<f64> = Tape::new();
            let xt = tape.leaf(x.clone(), vec![n, d], true).unwrap();
            let loss = loss_mcl(&mut tape, xt, &c, &w, k, tau).unwrap();
            let want = oracle_mcl(&x, &c, &w, n, d, k, tau, 0.0);
            assert_relative_eq!(scalar_of(&tape, loss), want, max_relative = 1e-9);
            tape.backward(loss).unwrap();
            let grads = tape.grad(xt).unwrap();
            assert!(grads.iter().all(|g| g.is_finite()));
            assert!(grads.iter().any(|&g| g != 0.0));
        }
    }

    #[test]
    fn mcl_shift_invariance() {
        let mut rng = StdRng::seed_from_u64(8);
        let (n, d, k) = (3, 4, 3);
        let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n * k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let mut tape: Tape<f64> = Tape::new();
        let xt = tape.leaf(x, vec![n, d], true).unwrap();
        let base_id = loss_mcl_shifted(&mut tape, xt, &c, &w, k, 1.0, 0.0).unwrap();
        let base = scalar_of(&tape, base_id);
        for shift in [-3.0, 1.7, 10.0] {
            let shifted_id = loss_mcl_shifted(&mut tape, xt, &c, &w, k, 1.0, shift).unwrap();
            let shifted = scalar_of(&tape, shifted_id);
            assert_relative_eq!(base, shifted, max_relative = 1e-9);
        }
    }

    #[test]
    fn mcl_near_duplicate_intents_are_suppressed() {
        // c̄_0 and c̄_1 nearly parallel: the cross terms carry decay ≈ clamp,
        // so their denominator contribution collapses toward zero.
        let n = 2;
        let (d, k) = (2, 2);
        let x = vec![0.3, 0.1, -0.2, 0.4];
        let c = vec![1.0, 0.0, 0.999_999_99, 0.000_1];
        let w = vec![0.9, 0.1, 0.2, 0.8];
        let dm = decay_matrix(&x, &c, &w, n, d, k, 0.0);
        // x̄_0 vs c̄_1 (indices 0 and 3) routes through cos(c̄_0, c̄_1) ~ 1.
        assert!(dm[3] > 27.0, "near-duplicate decay must hit the clamp, got {}", dm[3]);
        let contribution = (x[0] * c[2] + x[1] * c[3] - dm[3]).exp();
        assert!(contribution < 1e-8, "suppressed term must vanish, got {contribution}");
    }

    #[test]
    fn mcl_single_user_batch_is_an_error() {
        let mut tape: Tape<f64> = Tape::new();
        let xt = tape.leaf(vec![1.0, 2.0], vec![1, 2], true).unwrap();
        assert!(matches!(
            loss_mcl(&mut tape, xt, &[0.5, 0.5], &[1.0, 0.0], 2, 1.0),
            Err(LossError::BatchTooSmall { n: 1 })
        ));
    }

    // ---------- loss_joint ----------

    #[test]
    fn joint_combines_terms_by_weight() {
        let mut tape: Tape<f64> = Tape::new();
        let rec = tape.leaf(vec![1.0], vec![], true).unwrap();
        let one = tape.leaf(vec![1.0], vec![], true).unwrap();

        let w0 = LossWeights { beta: 0.0, lambda: 0.0, gamma: 0.0 };
        let total = loss_joint(&mut tape, rec, None, None, None, &w0).unwrap();
        assert_eq!(scalar_of(&tape, total), 1.0);

        let w = LossWeights { beta: 0.5, lambda: 0.5, gamma: 0.5 };
        let total = loss_joint(&mut tape, rec, Some(one), Some(one), Some(one), &w).unwrap();
        assert_relative_eq!(scalar_of(&tape, total), 2.5, max_relative = 1e-12);

        // Weight 0 skips a present term.
        let w = LossWeights { beta: 0.0, lambda: 0.0, gamma: 0.25 };
        let total = loss_joint(&mut tape, rec, Some(one), None, Some(one), &w).unwrap();
        assert_relative_eq!(scalar_of(&tape, total), 1.25, max_relative = 1e-12);

        // Positive weight with a missing term is an error.
        let w = LossWeights { beta: 0.3, lambda: 0.0, gamma: 0.0 };
        assert!(loss_joint(&mut tape, rec, None, None, None, &w).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { beta: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossWeights { gamma: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(LossWeights { beta: 0.0, lambda: 0.0, gamma: 0.0 }.rec_only());
        assert!(!LossWeights::default().rec_only());
    }

    #[test]
    fn temperature_must_be_positive() {
        let mut tape: Tape<f64> = Tape::new();
        let va = tape.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], true).unwrap();
        assert!(loss_cl(&mut tape, va, va, 0.0).is_err());
        assert!(loss_cl(&mut tape, va, va, f64::NAN).is_err());
    }
}
