//! Latent intent modeling via clustering of pooled user representations.
//!
//! K centroids are fit with k-means (k-means++ seeding, Lloyd's iterations,
//! empty clusters re-seeded to the farthest point). Per-user intent
//! relevance starts from reciprocal Euclidean distance to every centroid;
//! only the top-R weights survive filtering (rest set to zero), after which
//! an optional per-row normalization and a softmax produce smoothed weights
//! that are strictly positive and sum to one. The intent-aware user
//! representation is the smoothed-weight convex combination of all
//! centroids.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;

/// Distance floor guarding the reciprocal-distance singularity.
pub const DIST_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum IntentError {
    #[error("invalid intent config: {0}")]
    Invalid(String),
    #[error("k-means needs at least {k} points, got {points}")]
    TooFewPoints { points: usize, k: usize },
}

/// Per-row treatment of the surviving weights before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Feed surviving weights to the softmax unchanged.
    None,
    /// Scale so the largest surviving weight becomes 1, making the softmax
    /// insensitive to the magnitude of reciprocal distances.
    #[default]
    Max,
    /// Scale so the surviving weights sum to 1.
    L1,
}

/// K centroids in the encoder's latent space plus the top-R filter width.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentModel<S> {
    k: usize,
    r: usize,
    dim: usize,
    centroids: Vec<S>,
}

/// Per-iteration within-cluster sum of squares from a k-means fit.
#[derive(Debug, Clone)]
pub struct KmeansTrace {
    pub inertia_per_iter: Vec<f64>,
    pub iterations: usize,
    /// True when the fit stopped before `max_iter` because assignments
    /// reached a fixpoint or inertia stopped improving.
    pub converged: bool,
}

/// Raw and smoothed intent relevance for a batch of users.
#[derive(Debug, Clone)]
pub struct IntentWeights<S> {
    /// Reciprocal distances, `n x k`.
    pub raw: Vec<S>,
    /// Post-filter, post-softmax weights, `n x k`; each row sums to 1.
    pub smoothed: Vec<S>,
    /// Per-user surviving centroid indices, ascending.
    pub relevant: Vec<Vec<usize>>,
    pub n: usize,
    pub k: usize,
}

impl<S: Scalar> IntentModel<S> {
    pub fn new(k: usize, r: usize, dim: usize, centroids: Vec<S>) -> Result<Self, IntentError> {
        if k < 2 {
            return Err(IntentError::Invalid(format!("k must be at least 2, got {k}")));
        }
        if r == 0 || r >= k {
            return Err(IntentError::Invalid(format!("r must satisfy 0 < r < k, got r={r}, k={k}")));
        }
        if dim == 0 || centroids.len() != k * dim {
            return Err(IntentError::Invalid(format!(
                "centroid buffer has {} values, expected k*dim = {}",
                centroids.len(),
                k * dim
            )));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(IntentError::Invalid("centroids must be finite".into()));
        }
        Ok(IntentModel { k, r, dim, centroids })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[S] {
        &self.centroids
    }

    pub fn centroid(&self, i: usize) -> &[S] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Fits centroids to `n` points (`reps` is `n x dim`, row-major) with
    /// k-means++ initialization and at most `max_iter` Lloyd's iterations,
    /// stopping early at an assignment fixpoint. Deterministic in `seed`.
    pub fn fit_kmeans(
        reps: &[S],
        n: usize,
        dim: usize,
        k: usize,
        r: usize,
        max_iter: usize,
        seed: u64,
    ) -> Result<(Self, KmeansTrace), IntentError> {
        if dim == 0 || reps.len() != n * dim {
            return Err(IntentError::Invalid(format!(
                "representation buffer has {} values, expected n*dim = {}",
                reps.len(),
                n * dim
            )));
        }
        if n < k {
            return Err(IntentError::TooFewPoints { points: n, k });
        }
        if max_iter == 0 {
            return Err(IntentError::Invalid("max_iter must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids = plus_plus_init(reps, n, dim, k, &mut rng);

        let mut assign = vec![usize::MAX; n];
        let mut trace = KmeansTrace { inertia_per_iter: Vec::new(), iterations: 0, converged: false };
        let mut prev_inertia = f64::INFINITY;
        for _ in 0..max_iter {
            trace.iterations += 1;
            // Assignment step (ties to the lower centroid index).
            let mut changed = false;
            let mut inertia = 0.0;
            for p in 0..n {
                let (best, d2) = nearest_centroid(&reps[p * dim..(p + 1) * dim], &centroids, k, dim);
                inertia += d2.to_f64c();
                if assign[p] != best {
                    assign[p] = best;
                    changed = true;
                }
            }
            trace.inertia_per_iter.push(inertia);
            // Stop at the assignment fixpoint, or when inertia makes no
            // progress. The second clause matters for duplicate points: the
            // floating-point mean of identical vectors is not bitwise that
            // vector, so centroids can drift by one ulp and flip ties back
            // and forth forever while the cost stays put.
            if !changed || inertia >= prev_inertia {
                trace.converged = true;
                break;
            }
            prev_inertia = inertia;
            // Update step: means of assigned points.
            let mut sums = vec![S::zero(); k * dim];
            let mut counts = vec![0usize; k];
            for p in 0..n {
                let c = assign[p];
                counts[c] += 1;
                for j in 0..dim {
                    sums[c * dim + j] += reps[p * dim + j];
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    let inv = S::one() / S::from_f64c(counts[c] as f64);
                    for j in 0..dim {
                        centroids[c * dim + j] = sums[c * dim + j] * inv;
                    }
                }
            }
            // Empty clusters: re-seed to the point farthest from its current
            // centroid, one per empty cluster in index order. A reseed only
            // helps while some point sits at positive distance; at zero
            // residual there is nothing to improve and moving a centroid
            // onto a duplicate point would oscillate forever.
            let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
            let mut donated: Vec<usize> = Vec::new();
            for c in empties {
                let mut far_p = 0;
                let mut far_d = S::zero();
                for p in 0..n {
                    if donated.contains(&p) {
                        continue;
                    }
                    let d2 = sq_dist(
                        &reps[p * dim..(p + 1) * dim],
                        &centroids[assign[p] * dim..(assign[p] + 1) * dim],
                    );
                    if d2 > far_d {
                        far_d = d2;
                        far_p = p;
                    }
                }
                if far_d <= S::zero() {
                    break;
                }
                donated.push(far_p);
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&reps[far_p * dim..(far_p + 1) * dim]);
                assign[far_p] = c;
            }
        }
        let model = IntentModel::new(k, r, dim, centroids)?;
        Ok((model, trace))
    }

    /// Nearest-centroid index per point, ties to the lower index.
    pub fn assign_nearest(&self, pooled: &[S], n: usize) -> Vec<usize> {
        assert_eq!(pooled.len(), n * self.dim, "pooled must be n x dim");
        (0..n)
            .map(|p| nearest_centroid(&pooled[p * self.dim..(p + 1) * self.dim], &self.centroids, self.k, self.dim).0)
            .collect()
    }

    /// Reciprocal Euclidean distances `1 / max(dist, 1e-8)`, shape `n x k`.
    pub fn raw_weights(&self, pooled: &[S], n: usize) -> Vec<S> {
        assert_eq!(pooled.len(), n * self.dim, "pooled must be n x dim");
        let floor = S::from_f64c(DIST_FLOOR);
        let mut out = vec![S::zero(); n * self.k];
        for p in 0..n {
            let x = &pooled[p * self.dim..(p + 1) * self.dim];
            for c in 0..self.k {
                let d = sq_dist(x, self.centroid(c)).sqrt();
                out[p * self.k + c] = S::one() / d.max(floor);
            }
        }
        out
    }

    /// Applies the top-R filter (ties to the lower index), per-row
    /// normalization and softmax.
    pub fn smooth_weights(&self, raw: &[S], n: usize, norm: Normalization) -> IntentWeights<S> {
        assert_eq!(raw.len(), n * self.k, "raw must be n x k");
        let k = self.k;
        let mut smoothed = vec![S::zero(); n * k];
        let mut relevant = Vec::with_capacity(n);
        for p in 0..n {
            let row = &raw[p * k..(p + 1) * k];
            // Top-R by weight, ties broken toward the lower centroid index.
            let mut idx: Vec<usize> = (0..k).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            let mut keep = idx[..self.r].to_vec();
            keep.sort_unstable();

            let mut omega = vec![S::zero(); k];
            for &i in &keep {
                omega[i] = row[i];
            }
            match norm {
                Normalization::None => {}
                Normalization::Max => {
                    let mx = keep.iter().map(|&i| omega[i]).fold(S::zero(), |a, b| a.max(b));
                    if mx > S::zero() {
                        for &i in &keep {
                            omega[i] /= mx;
                        }
                    }
                }
                Normalization::L1 => {
                    let sum: S = keep.iter().map(|&i| omega[i]).sum();
                    if sum > S::zero() {
                        for &i in &keep {
                            omega[i] /= sum;
                        }
                    }
                }
            }
            // Stable softmax over the full row (filtered entries contribute
            // exp(0): smoothed, not zeroed).
            let mx = omega.iter().cloned().fold(S::from_f64c(f64::NEG_INFINITY), |a, b| a.max(b));
            let exps: Vec<S> = omega.iter().map(|&w| (w - mx).exp()).collect();
            let z: S = exps.iter().cloned().sum();
            for (i, e) in exps.into_iter().enumerate() {
                smoothed[p * k + i] = e / z;
            }
            relevant.push(keep);
        }
        IntentWeights { raw: raw.to_vec(), smoothed, relevant, n, k }
    }

    /// Intent-aware representation: smoothed-weight combination of all
    /// centroids, shape `n x dim`.
    pub fn intent_aware_rep(&self, smoothed: &[S], n: usize) -> Vec<S> {
        assert_eq!(smoothed.len(), n * self.k, "smoothed must be n x k");
        let mut out = vec![S::zero(); n * self.dim];
        for p in 0..n {
            for c in 0..self.k {
                let w = smoothed[p * self.k + c];
                let cen = self.centroid(c);
                for j in 0..self.dim {
                    out[p * self.dim + j] += w * cen[j];
                }
            }
        }
        out
    }
}

fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn nearest_centroid<S: Scalar>(x: &[S], centroids: &[S], k: usize, dim: usize) -> (usize, S) {
    let mut best = 0;
    let mut best_d = sq_dist(x, &centroids[..dim]);
    for c in 1..k {
        let d = sq_dist(x, &centroids[c * dim..(c + 1) * dim]);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// k-means++ seeding: first centroid uniform, then points drawn with
/// probability proportional to squared distance from the nearest chosen
/// centroid (uniform fallback once every distance is zero).
fn plus_plus_init<S: Scalar, R: Rng>(reps: &[S], n: usize, dim: usize, k: usize, rng: &mut R) -> Vec<S> {
    let mut centroids = vec![S::zero(); k * dim];
    let first = rng.gen_range(0..n);
    centroids[..dim].copy_from_slice(&reps[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = (0..n)
        .map(|p| sq_dist(&reps[p * dim..(p + 1) * dim], &centroids[..dim]).to_f64c())
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (p, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = p;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let row = &reps[pick * dim..(pick + 1) * dim];
        centroids[c * dim..(c + 1) * dim].copy_from_slice(row);
        for p in 0..n {
            let d = sq_dist(&reps[p * dim..(p + 1) * dim], row).to_f64c();
            if d < d2[p] {
                d2[p] = d;
            }
        }
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand_distr::{Distribution, Normal};

    fn blob_data(seed: u64, per_blob: usize, dim: usize, centers: &[f64]) -> (Vec<f64>, usize) {
        let mut rng = StdRng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut pts = Vec::new();
        for &c in centers {
            for _ in 0..per_blob {
                for j in 0..dim {
                    let base = if j == 0 { c } else { 0.0 };
                    pts.push(base + noise.sample(&mut rng));
                }
            }
        }
        (pts, per_blob * centers.len())
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn recovers_separated_blob_means() {
        let dim = 4;
        let (pts, n) = blob_data(1, 60, dim, &[0.0, 10.0]);
        let (model, trace) = IntentModel::<f64>::fit_kmeans(&pts, n, dim, 2, 1, 20, 7).unwrap();
        assert!(trace.converged);
        // Empirical blob means (first 60 points = blob 0).
        let mut means = [[0.0; 4]; 2];
        for p in 0..n {
            let blob = p / 60;
            for j in 0..dim {
                means[blob][j] += pts[p * dim + j] / 60.0;
            }
        }
        // Match centroids to blobs by first coordinate.
        let c0 = model.centroid(0);
        let (lo, hi) = if c0[0] < 5.0 { (0, 1) } else { (1, 0) };
        for j in 0..dim {
            assert_relative_eq!(model.centroid(lo)[j], means[0][j], epsilon = 1e-9);
            assert_relative_eq!(model.centroid(hi)[j], means[1][j], epsilon = 1e-9);
        }
    }

    #[test]
    fn k_equal_to_distinct_points_gives_zero_inertia() {
        let pts = vec![0.0, 0.0, 5.0, 0.0, 0.0, 5.0, 7.0, 7.0];
        let (model, trace) = IntentModel::<f64>::fit_kmeans(&pts, 4, 2, 4, 2, 20, 3).unwrap();
        assert!(trace.inertia_per_iter.last().unwrap() < &1e-24);
        for c in 0..4 {
            let cen = model.centroid(c);
            assert!(
                (0..4).any(|p| cen == &pts[p * 2..p * 2 + 2]),
                "centroid {cen:?} must coincide with a point"
            );
        }
    }

    #[test]
    fn fixed_seed_reproduces_centroids() {
        let (pts, n) = blob_data(5, 40, 3, &[0.0, 4.0, 8.0]);
        let (a, _) = IntentModel::<f64>::fit_kmeans(&pts, n, 3, 5, 2, 20, 11).unwrap();
        let (b, _) = IntentModel::<f64>::fit_kmeans(&pts, n, 3, 5, 2, 20, 11).unwrap();
        assert_eq!(a, b);
        let (c, _) = IntentModel::<f64>::fit_kmeans(&pts, n, 3, 5, 2, 20, 12).unwrap();
        // Different seed may legitimately converge elsewhere; only check it runs.
        assert_eq!(c.k(), 5);
    }

    #[test]
    fn inertia_is_non_increasing() {
        for seed in 0..20u64 {
            let (pts, n) = blob_data(seed, 25, 3, &[0.0, 2.0, 5.0]);
            let (_, trace) = IntentModel::<f64>::fit_kmeans(&pts, n, 3, 6, 2, 20, seed).unwrap();
            for w in trace.inertia_per_iter.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-9,
                    "inertia increased: {:?} (seed {seed})",
                    trace.inertia_per_iter
                );
            }
        }
    }

    #[test]
    fn empty_clusters_are_reseeded_to_far_points() {
        // Four identical points and one outlier, k=3: at least one cluster
        // starts empty or collapses; re-seeding must keep all centroids on
        // data points and reach a finite fixpoint.
        let pts = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 9.0, 9.0];
        let (model, trace) = IntentModel::<f64>::fit_kmeans(&pts, 5, 2, 3, 1, 20, 2).unwrap();
        assert!(model.centroids().iter().all(|c| c.is_finite()));
        assert!(trace.converged);
        // The outlier must own a centroid exactly, and the fit is perfect.
        assert!((0..3).any(|c| model.centroid(c) == [9.0, 9.0]));
        assert!(trace.inertia_per_iter.last().unwrap() < &1e-24);
    }

    #[test]
    fn rejects_more_clusters_than_points() {
        let pts = vec![0.0; 6];
        let err = IntentModel::<f64>::fit_kmeans(&pts, 3, 2, 4, 1, 20, 0).unwrap_err();
        assert!(matches!(err, IntentError::TooFewPoints { points: 3, k: 4 }));
    }

    #[test]
    fn model_validation() {
        assert!(IntentModel::new(2, 1, 2, vec![0.0f64; 4]).is_ok());
        assert!(IntentModel::new(1, 1, 2, vec![0.0f64; 2]).is_err(), "k >= 2");
        assert!(IntentModel::new(3, 0, 2, vec![0.0f64; 6]).is_err(), "r > 0");
        assert!(IntentModel::new(3, 3, 2, vec![0.0f64; 6]).is_err(), "r < k");
        assert!(IntentModel::new(3, 1, 2, vec![0.0f64; 5]).is_err(), "size");
        assert!(IntentModel::new(2, 1, 2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err(), "finite");
    }

    #[test]
    fn raw_weights_are_reciprocal_distances() {
        // Distance 5 -> 0.2; coincident point -> clamped to 1e8.
        let model = IntentModel::new(2, 1, 2, vec![3.0f64, 4.0, 0.0, 0.0]).unwrap();
        let raw = model.raw_weights(&[0.0, 0.0], 1);
        assert_relative_eq!(raw[0], 0.2, max_relative = 1e-12);
        assert_relative_eq!(raw[1], 1e8, max_relative = 1e-12);

        // Random instance vs a direct scripted computation.
        let mut rng = StdRng::seed_from_u64(9);
        let cen: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pooled: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let model = IntentModel::new(3, 1, 4, cen.clone()).unwrap();
        let raw = model.raw_weights(&pooled, 3);
        for p in 0..3 {
            for c in 0..3 {
                let d: f64 = (0..4)
                    .map(|j| (pooled[p * 4 + j] - cen[c * 4 + j]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert_relative_eq!(raw[p * 3 + c], 1.0 / d.max(1e-8), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn smoothing_matches_analytic_softmax_example() {
        // Surviving weights [ln 2, ln 2] at indices 2 and 3, no
        // normalization: softmax([0, 0, ln2, ln2]) = [1/6, 1/6, 1/3, 1/3].
        let model = IntentModel::new(4, 2, 1, vec![0.0f64; 4]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        let raw = vec![0.01, 0.02, ln2, ln2];
        let w = model.smooth_weights(&raw, 1, Normalization::None);
        let want = [1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0];
        for (got, want) in w.smoothed.iter().zip(&want) {
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
        assert_eq!(w.relevant[0], vec![2, 3]);
    }

    #[test]
    fn top_r_ties_break_to_lower_index() {
        let model = IntentModel::new(2, 1, 1, vec![0.0f64; 2]).unwrap();
        let w = model.smooth_weights(&[0.4, 0.4], 1, Normalization::Max);
        assert_eq!(w.relevant[0], vec![0]);
        assert!(w.smoothed[0] > w.smoothed[1]);
    }

    #[test]
    fn filtering_keeps_largest_and_preserves_order() {
        let model = IntentModel::new(4, 2, 1, vec![0.0f64; 4]).unwrap();
        for norm in [Normalization::None, Normalization::Max, Normalization::L1] {
            let w = model.smooth_weights(&[0.1, 0.4, 0.3, 0.2], 1, norm);
            assert_eq!(w.relevant[0], vec![1, 2]);
            let s = &w.smoothed;
            assert_relative_eq!(s.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
            assert!(s[1] > s[2], "{norm:?}: {s:?}");
            assert!(s[2] > s[0], "{norm:?}: {s:?}");
            assert_relative_eq!(s[0], s[3], max_relative = 1e-12);
        }
    }

    #[test]
    fn smoothed_rows_are_positive_distributions() {
        let mut rng = StdRng::seed_from_u64(20);
        for _ in 0..50 {
            let k = rng.gen_range(3..10);
            let r = rng.gen_range(1..k);
            let dim = rng.gen_range(2..5);
            let n = rng.gen_range(1..6);
            let cen: Vec<f64> = (0..k * dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let model = IntentModel::new(k, r, dim, cen).unwrap();
            let pooled: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let raw = model.raw_weights(&pooled, n);
            let w = model.smooth_weights(&raw, n, Normalization::Max);
            for p in 0..n {
                let row = &w.smoothed[p * k..(p + 1) * k];
                assert_relative_eq!(row.iter().sum::<f64>(), 1.0, max_relative = 1e-9);
                assert!(row.iter().all(|&v| v > 0.0), "softmax keeps all entries positive");
                // Monotone within the relevant set.
                let rel = &w.relevant[p];
                for a in rel {
                    for b in rel {
                        if raw[p * k + a] > raw[p * k + b] {
                            assert!(row[*a] >= row[*b]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn intent_rep_is_convex_combination() {
        let model = IntentModel::new(2, 1, 2, vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let rep = model.intent_aware_rep(&[0.5, 0.5], 1);
        assert_eq!(rep, vec![0.5, 0.5]);
        let rep = model.intent_aware_rep(&[1.0, 0.0], 1);
        assert_eq!(rep, vec![1.0, 0.0]);

        // Random instance vs scripted weighted sum + norm bound.
        let mut rng = StdRng::seed_from_u64(30);
        let cen: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let model = IntentModel::new(5, 2, 3, cen.clone()).unwrap();
        let mut w: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= z);
        let rep = model.intent_aware_rep(&w, 1);
        for j in 0..3 {
            let want: f64 = (0..5).map(|c| w[c] * cen[c * 3 + j]).sum();
            assert_relative_eq!(rep[j], want, max_relative = 1e-12);
        }
        let rep_norm: f64 = rep.iter().map(|v| v * v).sum::<f64>().sqrt();
        let max_cen: f64 = (0..5)
            .map(|c| (0..3).map(|j| cen[c * 3 + j].powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        assert!(rep_norm <= max_cen + 1e-12, "convex combination stays in the hull");
    }

    #[test]
    fn assignment_ties_break_low_and_match_raw_argmax() {
        let model = IntentModel::new(2, 1, 1, vec![1.0f64, 3.0]).unwrap();
        // Point 2.0 is equidistant: lower index wins.
        assert_eq!(model.assign_nearest(&[2.0], 1), vec![0]);
        let mut rng = StdRng::seed_from_u64(40);
        let cen: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let model = IntentModel::new(4, 2, 2, cen).unwrap();
        let pooled: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let assign = model.assign_nearest(&pooled, 5);
        let raw = model.raw_weights(&pooled, 5);
        for p in 0..5 {
            let row = &raw[p * 4..(p + 1) * 4];
            let armax = (0..4).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(assign[p], armax, "nearest centroid has the largest reciprocal distance");
        }
    }

    #[test]
    fn works_in_f32() {
        let (pts, n) = blob_data(3, 30, 2, &[0.0, 6.0]);
        let pts32: Vec<f32> = pts.iter().map(|&v| v as f32).collect();
        let (model, trace) = IntentModel::<f32>::fit_kmeans(&pts32, n, 2, 2, 1, 20, 5).unwrap();
        assert!(trace.converged);
        let raw = model.raw_weights(&pts32[..2], 1);
        let w = model.smooth_weights(&raw, 1, Normalization::Max);
        assert_relative_eq!(w.smoothed.iter().sum::<f32>(), 1.0f32, max_relative = 1e-5);
    }
}
