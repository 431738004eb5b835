//! Stochastic sequence augmentation: crop, mask and reorder views.
//!
//! Each call picks one operator uniformly from the enabled set and applies it
//! to an unpadded item sequence. Two independent calls produce the two views
//! used as contrastive positives. Padding/truncation to the model window
//! happens downstream.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    Invalid(String),
}

/// The three augmentation operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    Crop,
    Mask,
    Reorder,
}

/// Ratios and operator set for [`augment`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Kept fraction for crop: window length is `ceil(crop_ratio * n)`. In (0, 1].
    pub crop_ratio: f64,
    /// Fraction of positions replaced by the mask token: `floor(mask_ratio * n)`. In [0, 1).
    pub mask_ratio: f64,
    /// Shuffled fraction for reorder: window length is `ceil(reorder_ratio * n)`. In (0, 1].
    pub reorder_ratio: f64,
    /// Operators eligible for uniform selection; must be non-empty.
    pub ops: Vec<AugmentOp>,
    /// Item id substituted at masked positions. 0 shares the padding id; a
    /// dedicated id (item_count + 1) needs a matching extra embedding row.
    pub mask_token: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_ratio: 0.6,
            mask_ratio: 0.3,
            reorder_ratio: 0.25,
            ops: vec![AugmentOp::Crop, AugmentOp::Mask, AugmentOp::Reorder],
            mask_token: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.crop_ratio > 0.0 && self.crop_ratio <= 1.0) {
            return Err(AugmentError::Invalid(format!(
                "crop_ratio must lie in (0, 1], got {}",
                self.crop_ratio
            )));
        }
        if !(self.mask_ratio >= 0.0 && self.mask_ratio < 1.0) {
            return Err(AugmentError::Invalid(format!(
                "mask_ratio must lie in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        if !(self.reorder_ratio > 0.0 && self.reorder_ratio <= 1.0) {
            return Err(AugmentError::Invalid(format!(
                "reorder_ratio must lie in (0, 1], got {}",
                self.reorder_ratio
            )));
        }
        if self.ops.is_empty() {
            return Err(AugmentError::Invalid("at least one operator must be enabled".into()));
        }
        for (i, op) in self.ops.iter().enumerate() {
            if self.ops[..i].contains(op) {
                return Err(AugmentError::Invalid(format!("duplicate operator {op:?}")));
            }
        }
        Ok(())
    }
}

/// Keeps a contiguous window of `ceil(ratio * n)` items at a uniform start.
pub fn crop<R: Rng>(seq: &[u32], ratio: f64, rng: &mut R) -> Vec<u32> {
    assert!(!seq.is_empty(), "crop requires a non-empty sequence");
    let n = seq.len();
    let keep = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let start = rng.gen_range(0..=n - keep);
    seq[start..start + keep].to_vec()
}

/// Replaces `floor(ratio * n)` uniformly chosen distinct positions with `token`.
pub fn mask<R: Rng>(seq: &[u32], ratio: f64, token: u32, rng: &mut R) -> Vec<u32> {
    assert!(!seq.is_empty(), "mask requires a non-empty sequence");
    let n = seq.len();
    let count = ((ratio * n as f64).floor() as usize).min(n);
    let mut out = seq.to_vec();
    for pos in rand::seq::index::sample(rng, n, count) {
        out[pos] = token;
    }
    out
}

/// Shuffles a contiguous window of `ceil(ratio * n)` items at a uniform start.
pub fn reorder<R: Rng>(seq: &[u32], ratio: f64, rng: &mut R) -> Vec<u32> {
    assert!(!seq.is_empty(), "reorder requires a non-empty sequence");
    let n = seq.len();
    let len = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let start = rng.gen_range(0..=n - len);
    let mut out = seq.to_vec();
    out[start..start + len].shuffle(rng);
    out
}

/// Applies one operator chosen uniformly from `cfg.ops`.
pub fn augment<R: Rng>(seq: &[u32], cfg: &AugmentConfig, rng: &mut R) -> Vec<u32> {
    let op = cfg.ops[rng.gen_range(0..cfg.ops.len())];
    match op {
        AugmentOp::Crop => crop(seq, cfg.crop_ratio, rng),
        AugmentOp::Mask => mask(seq, cfg.mask_ratio, cfg.mask_token, rng),
        AugmentOp::Reorder => reorder(seq, cfg.reorder_ratio, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn sorted(mut v: Vec<u32>) -> Vec<u32> {
        v.sort_unstable();
        v
    }

    #[test]
    fn crop_full_ratio_is_identity() {
        let mut rng = StdRng::seed_from_u64(0);
        let seq = vec![4, 7, 1, 9];
        assert_eq!(crop(&seq, 1.0, &mut rng), seq);
    }

    #[test]
    fn crop_window_length_is_ceiling() {
        let seq: Vec<u32> = (1..=5).collect();
        for seed in 0..50 {
            let mut rng = StdRng::seed_from_u64(seed);
            let out = crop(&seq, 0.6, &mut rng); // ceil(3.0) = 3
            assert_eq!(out.len(), 3);
            // Output must be a contiguous slice of the input.
            let start = seq.iter().position(|&x| x == out[0]).unwrap();
            assert_eq!(&seq[start..start + 3], &out[..]);
        }
    }

    #[test]
    fn mask_zero_ratio_is_identity() {
        let mut rng = StdRng::seed_from_u64(1);
        let seq = vec![3, 3, 8];
        assert_eq!(mask(&seq, 0.0, 0, &mut rng), seq);
    }

    #[test]
    fn mask_replaces_exact_floor_count_with_token() {
        let seq: Vec<u32> = (1..=10).collect(); // distinct, so replacements are countable
        for seed in 0..50 {
            let mut rng = StdRng::seed_from_u64(seed);
            let out = mask(&seq, 0.35, 0, &mut rng); // floor(3.5) = 3
            assert_eq!(out.len(), seq.len());
            let masked = out.iter().filter(|&&x| x == 0).count();
            assert_eq!(masked, 3);
            for (a, b) in seq.iter().zip(&out) {
                assert!(*b == 0 || a == b, "unmasked positions must be untouched");
            }
        }
    }

    #[test]
    fn mask_supports_dedicated_token() {
        let mut rng = StdRng::seed_from_u64(2);
        let out = mask(&[1, 2, 3, 4], 0.5, 99, &mut rng);
        assert_eq!(out.iter().filter(|&&x| x == 99).count(), 2);
    }

    #[test]
    fn reorder_permutes_within_one_window() {
        // Window length ceil(0.6 * 5) = 3; valid starts are 0, 1, 2. For any
        // draw, changes must be confined to one length-3 window and preserve
        // the multiset.
        let seq = vec![1, 2, 3, 4, 5];
        let mut seen_starts = std::collections::HashSet::new();
        for seed in 0..300 {
            let mut rng = StdRng::seed_from_u64(seed);
            let out = reorder(&seq, 0.6, &mut rng);
            assert_eq!(sorted(out.clone()), sorted(seq.clone()));
            let changed: Vec<usize> = (0..5).filter(|&i| out[i] != seq[i]).collect();
            if let (Some(&lo), Some(&hi)) = (changed.first(), changed.last()) {
                assert!(hi - lo < 3, "changes {changed:?} exceed a length-3 window: {out:?}");
                seen_starts.insert(lo.min(2));
            }
        }
        assert_eq!(seen_starts.len(), 3, "all window starts should occur across seeds");
    }

    #[test]
    fn reorder_length_one_sequence_passes_through() {
        let mut rng = StdRng::seed_from_u64(3);
        assert_eq!(reorder(&[42], 0.5, &mut rng), vec![42]);
        assert_eq!(crop(&[42], 0.5, &mut rng), vec![42]);
        assert_eq!(mask(&[42], 0.5, 0, &mut rng), vec![42]);
    }

    #[test]
    fn augment_never_invents_items_and_is_deterministic() {
        let cfg = AugmentConfig::default();
        cfg.validate().unwrap();
        let seq: Vec<u32> = vec![5, 9, 2, 2, 7, 1, 8];
        let allowed: std::collections::HashSet<u32> =
            seq.iter().copied().chain(std::iter::once(cfg.mask_token)).collect();
        for seed in 0..100 {
            let mut rng = StdRng::seed_from_u64(seed);
            let out = augment(&seq, &cfg, &mut rng);
            assert!(!out.is_empty() && out.len() <= seq.len());
            assert!(out.iter().all(|i| allowed.contains(i)), "no new ids: {out:?}");
            let mut rng2 = StdRng::seed_from_u64(seed);
            assert_eq!(augment(&seq, &cfg, &mut rng2), out, "fixed seed must reproduce");
        }
    }

    #[test]
    fn augment_respects_operator_subset() {
        let cfg = AugmentConfig {
            ops: vec![AugmentOp::Mask],
            mask_ratio: 0.0,
            ..AugmentConfig::default()
        };
        let seq = vec![6, 1, 4];
        for seed in 0..20 {
            let mut rng = StdRng::seed_from_u64(seed);
            assert_eq!(augment(&seq, &cfg, &mut rng), seq, "mask at ratio 0 is the identity");
        }
    }

    #[test]
    fn config_validation_rejects_bad_ratios() {
        let bad = [
            AugmentConfig { crop_ratio: 0.0, ..AugmentConfig::default() },
            AugmentConfig { crop_ratio: 1.5, ..AugmentConfig::default() },
            AugmentConfig { mask_ratio: 1.0, ..AugmentConfig::default() },
            AugmentConfig { mask_ratio: -0.1, ..AugmentConfig::default() },
            AugmentConfig { reorder_ratio: 0.0, ..AugmentConfig::default() },
            AugmentConfig { ops: vec![], ..AugmentConfig::default() },
            AugmentConfig { ops: vec![AugmentOp::Crop, AugmentOp::Crop], ..AugmentConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?} should fail validation");
        }
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
