//! Leave-one-out ranking evaluation over the full catalog.
//!
//! For each user the model scores every item by the dot product of the last
//! hidden state with the item embedding; the held-out target's rank (ties
//! broken toward lower item ids; previously seen items optionally excluded)
//! yields HR@k and NDCG@k for k in {5, 10}. Chunked evaluation can fan out
//! across threads; chunk results merge in index order, so the report is
//! byte-identical regardless of thread count.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{truncate_pad, InteractionDataset};
use crate::encoder::{Encoder, Mode};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Tensor(#[from] TensorError),
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error("report self-check failed: {0}")]
    SelfCheck(String),
}

/// Which held-out interaction is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Prefix up to the second-to-last item; target = second-to-last.
    Valid,
    /// Prefix up to the last-but-one (validation item included); target = last.
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Evaluation knobs.
#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    /// Users scored per forward pass.
    pub batch_size: usize,
    /// Remove items from the candidate set that appear in the evaluated
    /// prefix (the target itself is always rankable).
    pub exclude_history: bool,
    /// Worker threads; 1 = fully sequential.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { batch_size: 256, exclude_history: true, threads: 1 }
    }
}

/// Aggregated ranking metrics for one split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub split: Split,
    pub users: usize,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

impl EvalReport {
    /// Enforces the structural metric inequalities.
    pub fn self_check(&self) -> Result<(), EvalError> {
        let checks = [
            ("hr5 <= hr10", self.hr5 <= self.hr10),
            ("ndcg5 <= ndcg10", self.ndcg5 <= self.ndcg10),
            ("ndcg5 <= hr5", self.ndcg5 <= self.hr5),
            ("ndcg10 <= hr10", self.ndcg10 <= self.hr10),
            ("ranges", [self.hr5, self.hr10, self.ndcg5, self.ndcg10].iter().all(|v| (0.0..=1.0).contains(v))),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(EvalError::SelfCheck(format!("{name} violated: {self:?}")));
            }
        }
        Ok(())
    }

    /// Machine-readable key-value line (round-trips through [`EvalReport::parse_kv`]).
    pub fn to_kv(&self) -> String {
        format!(
            "split={} users={} hr5={} hr10={} ndcg5={} ndcg10={}",
            self.split.as_str(),
            self.users,
            self.hr5,
            self.hr10,
            self.ndcg5,
            self.ndcg10
        )
    }

    pub fn parse_kv(line: &str) -> Result<Self, EvalError> {
        let mut split = None;
        let mut users = None;
        let mut vals = [None; 4];
        for field in line.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| EvalError::Invalid(format!("malformed field `{field}`")))?;
            match key {
                "split" => {
                    split = Some(match value {
                        "valid" => Split::Valid,
                        "test" => Split::Test,
                        other => return Err(EvalError::Invalid(format!("unknown split `{other}`"))),
                    })
                }
                "users" => {
                    users = Some(value.parse::<usize>().map_err(|e| {
                        EvalError::Invalid(format!("bad users value `{value}`: {e}"))
                    })?)
                }
                "hr5" | "hr10" | "ndcg5" | "ndcg10" => {
                    let idx = ["hr5", "hr10", "ndcg5", "ndcg10"].iter().position(|&k| k == key).unwrap();
                    vals[idx] = Some(value.parse::<f64>().map_err(|e| {
                        EvalError::Invalid(format!("bad {key} value `{value}`: {e}"))
                    })?);
                }
                other => return Err(EvalError::Invalid(format!("unknown key `{other}`"))),
            }
        }
        match (split, users, vals) {
            (Some(split), Some(users), [Some(hr5), Some(hr10), Some(ndcg5), Some(ndcg10)]) => {
                Ok(EvalReport { split, users, hr5, hr10, ndcg5, ndcg10 })
            }
            _ => Err(EvalError::Invalid(format!("incomplete report line `{line}`"))),
        }
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "split={} users={}", self.split.as_str(), self.users)?;
        writeln!(f, "  {:<8} {:>10}", "metric", "value")?;
        writeln!(f, "  {:<8} {:>10.6}", "HR@5", self.hr5)?;
        writeln!(f, "  {:<8} {:>10.6}", "HR@10", self.hr10)?;
        writeln!(f, "  {:<8} {:>10.6}", "NDCG@5", self.ndcg5)?;
        write!(f, "  {:<8} {:>10.6}", "NDCG@10", self.ndcg10)
    }
}

/// Hit and rank-discounted gain at cutoff `k` for a 1-based rank.
pub fn metric(rank: usize, k: usize) -> (f64, f64) {
    assert!(rank >= 1, "ranks are 1-based");
    if rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

/// Full descending ranking of items `1..=item_count` by score, ties toward
/// the lower id, skipping `excluded` ids. `scores[v]` is the score of item
/// `v` (index 0 is the padding column and is ignored).
pub fn rank_full<S: Scalar>(scores: &[S], item_count: u32, excluded: &HashSet<u32>) -> Vec<u32> {
    let mut items: Vec<u32> = (1..=item_count).filter(|v| !excluded.contains(v)).collect();
    items.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    items
}

/// 1-based rank of `target` under the same ordering as [`rank_full`],
/// without materializing the sort. `target` must not be in `excluded`.
pub fn target_rank<S: Scalar>(scores: &[S], item_count: u32, target: u32, excluded: &HashSet<u32>) -> usize {
    debug_assert!(target >= 1 && target <= item_count);
    debug_assert!(!excluded.contains(&target), "the target must stay rankable");
    let ts = scores[target as usize];
    let mut ahead = 0usize;
    for v in 1..=item_count {
        if v == target || excluded.contains(&v) {
            continue;
        }
        let sv = scores[v as usize];
        if sv > ts || (sv == ts && v < target) {
            ahead += 1;
        }
    }
    ahead + 1
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    hr5: f64,
    hr10: f64,
    ndcg5: f64,
    ndcg10: f64,
    users: usize,
}

impl Sums {
    fn absorb(&mut self, rank: usize) {
        let (h5, n5) = metric(rank, 5);
        let (h10, n10) = metric(rank, 10);
        self.hr5 += h5;
        self.hr10 += h10;
        self.ndcg5 += n5;
        self.ndcg10 += n10;
        self.users += 1;
    }

    fn merge(&mut self, other: &Sums) {
        self.hr5 += other.hr5;
        self.hr10 += other.hr10;
        self.ndcg5 += other.ndcg5;
        self.ndcg10 += other.ndcg10;
        self.users += other.users;
    }
}

/// Scores one chunk of users with a private tape.
fn eval_chunk<S: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<S>,
    ds: &InteractionDataset,
    users: &[usize],
    split: Split,
    exclude_history: bool,
) -> Result<Sums, EvalError> {
    let t = encoder.config().max_len;
    let n = users.len();
    let mut inputs = Vec::with_capacity(n * t);
    for &u in users {
        let prefix = match split {
            Split::Valid => ds.valid_prefix(u),
            Split::Test => ds.test_prefix(u),
        };
        inputs.extend(truncate_pad(prefix, t));
    }
    let mut tape: Tape<S> = Tape::new();
    let bound = store.bind(&mut tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: eval mode has no dropout
    let per_step = encoder.encode(&mut tape, &bound, &inputs, n, t, Mode::Eval, &mut rng)?;
    let last = encoder.last_hidden(&mut tape, per_step)?;
    let scores = tape.matmul_nt(last, bound.get("item_embedding"))?;
    let rows = encoder.vocab_rows();
    let values = tape.values(scores);

    let mut sums = Sums::default();
    for (row, &u) in users.iter().enumerate() {
        let (prefix, target) = match split {
            Split::Valid => (ds.valid_prefix(u), ds.valid_target(u)),
            Split::Test => (ds.test_prefix(u), ds.test_target(u)),
        };
        let mut excluded: HashSet<u32> = HashSet::new();
        if exclude_history {
            excluded.extend(prefix.iter().copied().filter(|&v| v != 0));
            excluded.remove(&target);
        }
        let user_scores = &values[row * rows..(row + 1) * rows];
        let rank = target_rank(user_scores, ds.item_count(), target, &excluded);
        sums.absorb(rank);
    }
    Ok(sums)
}

/// Evaluates every user of the dataset on one split.
pub fn evaluate<S: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<S>,
    ds: &InteractionDataset,
    split: Split,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if cfg.batch_size == 0 || cfg.threads == 0 {
        return Err(EvalError::Invalid("batch_size and threads must be positive".into()));
    }
    encoder
        .validate_params(store)
        .map_err(|e| EvalError::Invalid(e.to_string()))?;
    if encoder.config().item_count != ds.item_count() {
        return Err(EvalError::Invalid(format!(
            "model embeds {} items but the dataset has {}; was this checkpoint trained on different data?",
            encoder.config().item_count,
            ds.item_count()
        )));
    }
    let users: Vec<usize> = (0..ds.user_count()).collect();
    let chunks: Vec<&[usize]> = users.chunks(cfg.batch_size).collect();
    let mut partials: Vec<Option<Result<Sums, EvalError>>> = (0..chunks.len()).map(|_| None).collect();

    if cfg.threads == 1 {
        for (slot, chunk) in chunks.iter().enumerate() {
            partials[slot] = Some(eval_chunk(encoder, store, ds, chunk, split, cfg.exclude_history));
        }
    } else {
        // Contiguous chunk ranges per worker; results land in index-order
        // slots, so the merged sums match the sequential order exactly.
        let per_worker = chunks.len().div_ceil(cfg.threads);
        std::thread::scope(|scope| {
            let mut rest: &mut [Option<Result<Sums, EvalError>>] = &mut partials;
            for (w, chunk_block) in chunks.chunks(per_worker).enumerate() {
                let (mine, tail) = rest.split_at_mut(chunk_block.len());
                rest = tail;
                let _ = w;
                scope.spawn(move || {
                    for (slot, chunk) in mine.iter_mut().zip(chunk_block) {
                        *slot = Some(eval_chunk(encoder, store, ds, chunk, split, cfg.exclude_history));
                    }
                });
            }
        });
    }

    let mut total = Sums::default();
    for partial in partials {
        let sums = partial.expect("every chunk slot is filled")?;
        total.merge(&sums);
    }
    let users = total.users;
    if users == 0 {
        return Err(EvalError::Invalid("no users to evaluate".into()));
    }
    let report = EvalReport {
        split,
        users,
        hr5: total.hr5 / users as f64,
        hr10: total.hr10 / users as f64,
        ndcg5: total.ndcg5 / users as f64,
        ndcg10: total.ndcg10 / users as f64,
    };
    report.self_check()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_planted;
    use crate::encoder::EncoderConfig;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::Rng;

    #[test]
    fn metric_examples() {
        assert_eq!(metric(1, 5), (1.0, 1.0));
        let (h, n) = metric(3, 5);
        assert_eq!(h, 1.0);
        assert_relative_eq!(n, 0.5, max_relative = 1e-15); // 1/log2(4)
        assert_eq!(metric(11, 10), (0.0, 0.0));
        assert_eq!(metric(5, 5).0, 1.0);
        assert_eq!(metric(6, 5), (0.0, 0.0));
    }

    #[test]
    fn ranking_sorts_descending_with_low_id_ties() {
        // scores for items 1..=3 are (2, 1, 3) -> ranking [3, 1, 2].
        let scores = [f64::NAN, 2.0, 1.0, 3.0]; // index 0 unused
        assert_eq!(rank_full(&scores, 3, &HashSet::new()), vec![3, 1, 2]);
        // All-equal scores -> ascending ids.
        let flat = [0.0, 7.0, 7.0, 7.0, 7.0];
        assert_eq!(rank_full(&flat, 4, &HashSet::new()), vec![1, 2, 3, 4]);
        // Exclusion removes candidates entirely.
        let excl: HashSet<u32> = [3].into_iter().collect();
        assert_eq!(rank_full(&scores, 3, &excl), vec![1, 2]);
    }

    #[test]
    fn target_rank_agrees_with_full_sort() {
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..200 {
            let v = rng.gen_range(3..30u32);
            let mut scores = vec![0.0f64; v as usize + 1];
            for s in scores.iter_mut().skip(1) {
                // Coarse grid forces plenty of ties.
                *s = f64::from(rng.gen_range(-3..4i32));
            }
            let mut excluded = HashSet::new();
            for item in 1..=v {
                if rng.gen_bool(0.2) {
                    excluded.insert(item);
                }
            }
            let candidates: Vec<u32> = (1..=v).filter(|i| !excluded.contains(i)).collect();
            if candidates.is_empty() {
                continue;
            }
            let target = candidates[rng.gen_range(0..candidates.len())];
            let order = rank_full(&scores, v, &excluded);
            let want = order.iter().position(|&i| i == target).unwrap() + 1;
            assert_eq!(target_rank(&scores, v, target, &excluded), want);
        }
    }

    #[test]
    fn report_invariants_and_kv_roundtrip() {
        let r = EvalReport { split: Split::Test, users: 10, hr5: 0.3, hr10: 0.5, ndcg5: 0.21, ndcg10: 0.27 };
        r.self_check().unwrap();
        let parsed = EvalReport::parse_kv(&r.to_kv()).unwrap();
        assert_eq!(parsed, r);

        let bad = EvalReport { hr5: 0.6, ..r };
        assert!(bad.self_check().is_err(), "hr5 > hr10 must fail");
        let bad = EvalReport { ndcg10: 0.55, ..r };
        assert!(bad.self_check().is_err(), "ndcg10 > hr10 must fail");
        assert!(EvalReport::parse_kv("split=test users=1 hr5=0").is_err());
        assert!(EvalReport::parse_kv("split=nope users=1 hr5=0 hr10=0 ndcg5=0 ndcg10=0").is_err());
    }

    fn tiny_setup(seed: u64) -> (Encoder, ParamStore<f64>, crate::dataset::InteractionDataset) {
        let ds = synthetic_planted(40, 25, 4, 9, seed);
        let mut cfg = EncoderConfig::new(ds.item_count());
        cfg.dim = 8;
        cfg.heads = 2;
        cfg.blocks = 1;
        cfg.max_len = 6;
        let enc = Encoder::new(cfg).unwrap();
        let store = enc.init_params(&mut StdRng::seed_from_u64(seed));
        (enc, store, ds)
    }

    #[test]
    fn evaluate_produces_valid_deterministic_reports() {
        let (enc, store, ds) = tiny_setup(3);
        let cfg = EvalConfig { batch_size: 7, exclude_history: true, threads: 1 };
        let a = evaluate(&enc, &store, &ds, Split::Valid, &cfg).unwrap();
        let b = evaluate(&enc, &store, &ds, Split::Valid, &cfg).unwrap();
        assert_eq!(a.to_kv(), b.to_kv(), "same inputs, byte-identical report");
        a.self_check().unwrap();
        assert_eq!(a.users, ds.user_count());
        let t = evaluate(&enc, &store, &ds, Split::Test, &cfg).unwrap();
        assert_ne!(a.to_kv(), t.to_kv(), "splits score different targets");
    }

    #[test]
    fn thread_count_does_not_change_the_report() {
        let (enc, store, ds) = tiny_setup(4);
        let seq = EvalConfig { batch_size: 5, exclude_history: true, threads: 1 };
        let par = EvalConfig { batch_size: 5, exclude_history: true, threads: 3 };
        let a = evaluate(&enc, &store, &ds, Split::Test, &seq).unwrap();
        let b = evaluate(&enc, &store, &ds, Split::Test, &par).unwrap();
        assert_eq!(a.to_kv(), b.to_kv());
    }

    #[test]
    fn exclusion_flag_changes_candidate_set() {
        let (enc, store, ds) = tiny_setup(5);
        let on = EvalConfig { batch_size: 8, exclude_history: true, threads: 1 };
        let off = EvalConfig { batch_size: 8, exclude_history: false, threads: 1 };
        let with = evaluate(&enc, &store, &ds, Split::Test, &on).unwrap();
        let without = evaluate(&enc, &store, &ds, Split::Test, &off).unwrap();
        // Excluding competitors can only improve (or preserve) each rank.
        assert!(with.hr10 >= without.hr10 - 1e-12);
        assert!(with.ndcg10 >= without.ndcg10 - 1e-12);
    }

    #[test]
    fn all_equal_embeddings_rank_like_chance() {
        let ds = synthetic_planted(400, 100, 4, 9, 9);
        let mut cfg = EncoderConfig::new(ds.item_count());
        cfg.dim = 8;
        cfg.heads = 2;
        cfg.blocks = 1;
        cfg.max_len = 6;
        let enc = Encoder::new(cfg).unwrap();
        let mut store: ParamStore<f64> = enc.init_params(&mut StdRng::seed_from_u64(9));
        // Identical rows: every item gets the same score, ranks follow ids.
        let emb = store.get_mut("item_embedding").unwrap();
        let d = 8;
        let row: Vec<f64> = (0..d).map(|c| 0.1 * c as f64).collect();
        for r in 0..emb.values.len() / d {
            emb.values[r * d..(r + 1) * d].copy_from_slice(&row);
        }
        let cfg = EvalConfig { batch_size: 64, exclude_history: false, threads: 1 };
        let report = evaluate(&enc, &store, &ds, Split::Test, &cfg).unwrap();
        let p: f64 = 10.0 / 100.0;
        let se = (p * (1.0 - p) / 400.0).sqrt();
        assert!(
            (report.hr10 - p).abs() <= 3.0 * se,
            "HR@10 {} should sit near chance {p} (3se = {})",
            report.hr10,
            3.0 * se
        );
    }

    #[test]
    fn dimension_mismatch_is_descriptive() {
        let (enc, _, ds) = tiny_setup(6);
        let (_, other_store, _) = tiny_setup(7);
        // Same architecture, different item count -> mismatching table.
        let ds_small = synthetic_planted(30, 10, 4, 9, 8);
        let mut cfg = EncoderConfig::new(ds_small.item_count());
        cfg.dim = 8;
        cfg.heads = 2;
        cfg.blocks = 1;
        cfg.max_len = 6;
        let enc_small = Encoder::new(cfg).unwrap();
        let err = evaluate(&enc_small, &other_store, &ds_small, Split::Test, &EvalConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("item_embedding"), "{err}");
        drop((enc, ds));
    }
}
