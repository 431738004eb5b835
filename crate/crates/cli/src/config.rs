//! Flat `key = value` configuration with dotted keys.
//!
//! Every knob lives in one registry with its default and help line; a file
//! (if given) overrides defaults, `--set` flags override the file, and the
//! fully materialized map is what run manifests record. Unknown keys are
//! rejected by name at whichever layer introduces them.

use std::collections::HashMap;

use seqrec_core::augment::{AugmentConfig, AugmentOp};
use seqrec_core::dataset::{FiveCore, LoadOptions, RawFormat};
use seqrec_core::encoder::Pooling;
use seqrec_core::eval::EvalConfig;
use seqrec_core::intent::Normalization;
use seqrec_core::losses::LossWeights;
use seqrec_core::train::{MergedViews, TrainConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("configuration line {line} is not `key = value`: `{text}`")]
    Malformed { line: usize, text: String },
    #[error("bad value for `{key}`: `{value}` ({expected})")]
    BadValue { key: String, value: String, expected: String },
    #[error("empty grid specification `{0}`; expected key=v1,v2,...")]
    EmptyGrid(String),
}

pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

/// The complete knob registry. Order here is the order in `--help` output,
/// config serialization, and manifests.
pub const KEYS: &[KeySpec] = &[
    KeySpec { name: "seed", default: "42", help: "master seed; every random stream derives from it" },
    KeySpec { name: "threads", default: "1", help: "worker threads for ranking evaluation (results are thread-count invariant)" },
    KeySpec { name: "data.format", default: "pairs", help: "raw log layout: pairs | sequences" },
    KeySpec { name: "data.five_core", default: "fixpoint", help: "5-core filtering: off | one_pass | fixpoint" },
    KeySpec { name: "data.subsample_users", default: "0", help: "keep this many users, 0 = all (the item catalog is preserved)" },
    KeySpec { name: "data.subsample_seed", default: "7", help: "seed for drawing the user subsample" },
    KeySpec { name: "train.epochs_max", default: "200", help: "epoch cap" },
    KeySpec { name: "train.batch_size", default: "256", help: "users per training batch" },
    KeySpec { name: "train.patience", default: "10", help: "epochs without validation NDCG@10 improvement before stopping" },
    KeySpec { name: "train.estep_every", default: "1", help: "refit intent centroids every this many epochs" },
    KeySpec { name: "train.temperature", default: "1", help: "divides contrastive dot-product scores" },
    KeySpec { name: "adam.learning_rate", default: "0.001", help: "Adam step size" },
    KeySpec { name: "adam.beta1", default: "0.9", help: "Adam first-moment decay" },
    KeySpec { name: "adam.beta2", default: "0.999", help: "Adam second-moment decay" },
    KeySpec { name: "adam.epsilon", default: "0.00000001", help: "Adam denominator floor" },
    KeySpec { name: "loss.beta", default: "0.1", help: "weight of the sequence-level contrastive loss" },
    KeySpec { name: "loss.lambda", default: "0.1", help: "weight of the intent-level contrastive loss" },
    KeySpec { name: "loss.gamma", default: "0.1", help: "weight of the multi-intent contrastive loss" },
    KeySpec { name: "augment.crop_ratio", default: "0.6", help: "fraction of a sequence kept by the crop view" },
    KeySpec { name: "augment.mask_ratio", default: "0.3", help: "fraction of positions hidden by the mask view" },
    KeySpec { name: "augment.reorder_ratio", default: "0.25", help: "fraction of a sequence shuffled by the reorder view" },
    KeySpec { name: "augment.ops", default: "crop,mask,reorder", help: "comma list of enabled views: crop | mask | reorder" },
    KeySpec { name: "encoder.dim", default: "64", help: "hidden width" },
    KeySpec { name: "encoder.heads", default: "2", help: "attention heads (must divide encoder.dim)" },
    KeySpec { name: "encoder.blocks", default: "2", help: "transformer blocks" },
    KeySpec { name: "encoder.max_len", default: "50", help: "sequence window; longer histories keep the most recent items" },
    KeySpec { name: "encoder.dropout", default: "0.2", help: "dropout rate during training" },
    KeySpec { name: "encoder.extra_mask_row", default: "false", help: "give the masking view its own embedding row instead of the padding row" },
    KeySpec { name: "encoder.pooling", default: "mean", help: "sequence pooling: mean | masked_mean" },
    KeySpec { name: "intent.K", default: "32", help: "number of intent centroids" },
    KeySpec { name: "intent.ratio", default: "0.5", help: "relevant-intent fraction R/K in (0, 1)" },
    KeySpec { name: "intent.kmeans_iters", default: "20", help: "Lloyd iteration cap per centroid refit" },
    KeySpec { name: "intent.seed", default: "1", help: "k-means seed (held constant across epochs)" },
    KeySpec { name: "intent.normalization", default: "max", help: "surviving-weight scaling before softmax: none | max | l1" },
    KeySpec { name: "intent.merged_views", default: "alpha", help: "which pooled view joins the merged set: alpha | beta | average" },
    KeySpec { name: "eval.batch_size", default: "256", help: "users per evaluation batch" },
    KeySpec { name: "eval.exclude_history", default: "true", help: "drop already-seen items from ranking candidates" },
];

/// `--help` epilogue documenting every key and default.
pub fn help_text() -> String {
    let mut out = String::from("Configuration keys (set via file or --set KEY=VALUE):\n");
    for k in KEYS {
        out.push_str(&format!("  {:<24} [default: {:<18}] {}\n", k.name, k.default, k.help));
    }
    out
}

fn canonical(key: &str) -> &str {
    // The centroid count is conventionally written with a capital K.
    if key == "intent.k" {
        "intent.K"
    } else {
        key
    }
}

fn spec_for(key: &str) -> Option<&'static KeySpec> {
    let key = canonical(key);
    KEYS.iter().find(|s| s.name == key)
}

/// String-valued configuration with every key always present.
#[derive(Debug, Clone)]
pub struct ConfigMap {
    values: HashMap<&'static str, String>,
}

impl Default for ConfigMap {
    fn default() -> Self {
        let values = KEYS.iter().map(|k| (k.name, k.default.to_string())).collect();
        ConfigMap { values }
    }
}

impl ConfigMap {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let spec = spec_for(key).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        self.values.insert(spec.name, value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(canonical(key))
            .unwrap_or_else(|| panic!("key `{key}` missing from registry"))
    }

    /// Applies a config file: `key = value` lines, `#` comments, blanks.
    pub fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed { line: i + 1, text: raw.to_string() })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies `KEY=VALUE` override strings (e.g. from repeated `--set`).
    pub fn apply_sets(&mut self, sets: &[String]) -> Result<(), ConfigError> {
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed { line: 0, text: s.clone() })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Serializes in registry order; the output parses back via
    /// [`ConfigMap::apply_file`].
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            out.push_str(&format!("{} = {}\n", k.name, self.values[k.name]));
        }
        out
    }

    /// Registry-ordered `(key, value)` pairs for manifest embedding.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|k| (k.name, self.values[k.name].clone())).collect()
    }

    pub fn resolve(&self) -> Result<ResolvedConfig, ConfigError> {
        Ok(ResolvedConfig {
            seed: self.parse("seed")?,
            threads: self.parse("threads")?,
            format: self.enum_value("data.format", &[("pairs", RawFormat::Pairs), ("sequences", RawFormat::Sequences)])?,
            five_core: self.enum_value(
                "data.five_core",
                &[("off", FiveCore::Off), ("one_pass", FiveCore::OnePass), ("fixpoint", FiveCore::Fixpoint)],
            )?,
            subsample_users: self.parse("data.subsample_users")?,
            subsample_seed: self.parse("data.subsample_seed")?,
            epochs_max: self.parse("train.epochs_max")?,
            batch_size: self.parse("train.batch_size")?,
            patience: self.parse("train.patience")?,
            estep_every: self.parse("train.estep_every")?,
            temperature: self.parse("train.temperature")?,
            learning_rate: self.parse("adam.learning_rate")?,
            adam_beta1: self.parse("adam.beta1")?,
            adam_beta2: self.parse("adam.beta2")?,
            adam_epsilon: self.parse("adam.epsilon")?,
            beta: self.parse("loss.beta")?,
            lambda: self.parse("loss.lambda")?,
            gamma: self.parse("loss.gamma")?,
            crop_ratio: self.parse("augment.crop_ratio")?,
            mask_ratio: self.parse("augment.mask_ratio")?,
            reorder_ratio: self.parse("augment.reorder_ratio")?,
            ops: self.ops_value("augment.ops")?,
            dim: self.parse("encoder.dim")?,
            heads: self.parse("encoder.heads")?,
            blocks: self.parse("encoder.blocks")?,
            max_len: self.parse("encoder.max_len")?,
            dropout: self.parse("encoder.dropout")?,
            extra_mask_row: self.parse("encoder.extra_mask_row")?,
            pooling: self.enum_value("encoder.pooling", &[("mean", Pooling::Mean), ("masked_mean", Pooling::MaskedMean)])?,
            intent_k: self.parse("intent.K")?,
            intent_ratio: self.parse("intent.ratio")?,
            kmeans_iters: self.parse("intent.kmeans_iters")?,
            kmeans_seed: self.parse("intent.seed")?,
            normalization: self.enum_value(
                "intent.normalization",
                &[("none", Normalization::None), ("max", Normalization::Max), ("l1", Normalization::L1)],
            )?,
            merged_views: self.enum_value(
                "intent.merged_views",
                &[("alpha", MergedViews::Alpha), ("beta", MergedViews::Beta), ("average", MergedViews::Average)],
            )?,
            eval_batch: self.parse("eval.batch_size")?,
            eval_exclude_history: self.parse("eval.exclude_history")?,
        })
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let value = self.get(key);
        value.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected: std::any::type_name::<T>().rsplit("::").next().unwrap_or("value").to_string(),
        })
    }

    fn enum_value<T: Copy>(&self, key: &str, table: &[(&str, T)]) -> Result<T, ConfigError> {
        let value = self.get(key);
        table
            .iter()
            .find(|(name, _)| *name == value)
            .map(|&(_, v)| v)
            .ok_or_else(|| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                expected: format!(
                    "one of {}",
                    table.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(" | ")
                ),
            })
    }

    fn ops_value(&self, key: &str) -> Result<Vec<AugmentOp>, ConfigError> {
        let value = self.get(key);
        let mut ops = Vec::new();
        for part in value.split(',') {
            let op = match part.trim() {
                "crop" => AugmentOp::Crop,
                "mask" => AugmentOp::Mask,
                "reorder" => AugmentOp::Reorder,
                other => {
                    return Err(ConfigError::BadValue {
                        key: key.to_string(),
                        value: value.to_string(),
                        expected: format!("comma list of crop | mask | reorder (got `{other}`)"),
                    })
                }
            };
            if ops.contains(&op) {
                return Err(ConfigError::BadValue {
                    key: key.to_string(),
                    value: value.to_string(),
                    expected: "no repeated operation names".to_string(),
                });
            }
            ops.push(op);
        }
        Ok(ops)
    }
}

/// Typed view of a fully layered configuration.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub threads: usize,
    pub format: RawFormat,
    pub five_core: FiveCore,
    pub subsample_users: usize,
    pub subsample_seed: u64,
    pub epochs_max: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub estep_every: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub crop_ratio: f64,
    pub mask_ratio: f64,
    pub reorder_ratio: f64,
    pub ops: Vec<AugmentOp>,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub extra_mask_row: bool,
    pub pooling: Pooling,
    pub intent_k: usize,
    pub intent_ratio: f64,
    pub kmeans_iters: usize,
    pub kmeans_seed: u64,
    pub normalization: Normalization,
    pub merged_views: MergedViews,
    pub eval_batch: usize,
    pub eval_exclude_history: bool,
}

impl ResolvedConfig {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions { format: self.format, five_core: self.five_core }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            batch_size: self.eval_batch,
            exclude_history: self.eval_exclude_history,
            threads: self.threads,
        }
    }

    pub fn train_config(&self, item_count: u32) -> TrainConfig {
        let mut cfg = TrainConfig::new(item_count);
        cfg.epochs_max = self.epochs_max;
        cfg.batch_size = self.batch_size;
        cfg.patience = self.patience;
        cfg.seed = self.seed;
        cfg.weights = LossWeights { beta: self.beta, lambda: self.lambda, gamma: self.gamma };
        cfg.temperature = self.temperature;
        cfg.augment = AugmentConfig {
            crop_ratio: self.crop_ratio,
            mask_ratio: self.mask_ratio,
            reorder_ratio: self.reorder_ratio,
            ops: self.ops.clone(),
            mask_token: 0, // rewired to the encoder's mask id inside train()
        };
        cfg.intent_k = self.intent_k;
        cfg.intent_ratio = self.intent_ratio;
        cfg.kmeans_iters = self.kmeans_iters;
        cfg.kmeans_seed = self.kmeans_seed;
        cfg.normalization = self.normalization;
        cfg.merged_views = self.merged_views;
        cfg.estep_every = self.estep_every;
        cfg.encoder.dim = self.dim;
        cfg.encoder.heads = self.heads;
        cfg.encoder.blocks = self.blocks;
        cfg.encoder.max_len = self.max_len;
        cfg.encoder.dropout = self.dropout;
        cfg.encoder.extra_mask_row = self.extra_mask_row;
        cfg.encoder.pooling = self.pooling;
        cfg.adam.learning_rate = self.learning_rate;
        cfg.adam.beta1 = self.adam_beta1;
        cfg.adam.beta2 = self.adam_beta2;
        cfg.adam.epsilon = self.adam_epsilon;
        cfg.eval_batch = self.eval_batch;
        cfg.threads = self.threads;
        cfg
    }
}

/// Expands grid specifications (`key=v1,v2,...`) into override lists, the
/// cartesian product in given order with the first spec outermost.
pub fn expand_grid(specs: &[String]) -> Result<Vec<Vec<(String, String)>>, ConfigError> {
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for spec in specs {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::EmptyGrid(spec.clone()))?;
        let key = canonical(key.trim());
        if spec_for(key).is_none() {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        let values: Vec<String> =
            values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(ConfigError::EmptyGrid(spec.clone()));
        }
        axes.push((key.to_string(), values));
    }
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in &axes {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut c = cell.clone();
                c.push((key.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    Ok(cells)
}
