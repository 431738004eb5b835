//! EM-style training loop.
//!
//! Each epoch first refits the intent centroids on every user's pooled,
//! un-augmented representation (E-step), then sweeps shuffled mini-batches
//! computing the next-item loss plus the three contrastive objectives,
//! backpropagates, and applies Adam (M-step). Early stopping tracks
//! validation NDCG@10; the best snapshot and the latest optimizer state are
//! both exported as checkpoints, and a run can resume from the latter.
//! All randomness derives from one master seed through per-purpose,
//! per-epoch streams, so interrupted-and-resumed runs replay the exact
//! trajectory of an uninterrupted one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adam::{Adam, AdamConfig, AdamError};
use crate::augment::{augment, AugmentConfig, AugmentError};
use crate::dataset::{build_batch, shuffled_batches, truncate_pad, DataError, InteractionDataset};
use crate::encoder::{Encoder, EncoderConfig, EncoderError, Mode, Pooling};
use crate::eval::{evaluate, EvalConfig, EvalError, Split};
use crate::intent::{IntentError, IntentModel, KmeansTrace, Normalization};
use crate::losses::{loss_cl, loss_icl, loss_joint, loss_mcl, loss_rec, LossError, LossWeights};
use crate::params::{Checkpoint, NamedTensor, ParamError, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Intent(#[from] IntentError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid training configuration: {0}")]
    Invalid(String),
}

/// Which pooled augmented view(s) supply the trainable side of the merged
/// user/intent representation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MergedViews {
    #[default]
    Alpha,
    Beta,
    Average,
}

impl MergedViews {
    pub fn as_str(self) -> &'static str {
        match self {
            MergedViews::Alpha => "alpha",
            MergedViews::Beta => "beta",
            MergedViews::Average => "average",
        }
    }

    pub fn parse(s: &str) -> Result<Self, TrainError> {
        match s {
            "alpha" => Ok(MergedViews::Alpha),
            "beta" => Ok(MergedViews::Beta),
            "average" => Ok(MergedViews::Average),
            other => Err(TrainError::Invalid(format!("unknown merged-view choice `{other}`"))),
        }
    }
}

/// Everything a training run needs besides the dataset.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs_max: usize,
    pub batch_size: usize,
    /// Epochs without validation NDCG@10 improvement before stopping.
    pub patience: usize,
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    pub weights: LossWeights,
    /// Divides the dot-product scores of all contrastive losses.
    pub temperature: f64,
    pub augment: AugmentConfig,
    /// Number of intent centroids (K).
    pub intent_k: usize,
    /// Relevant-intent fraction R/K; the kept count is `round(ratio * K)`
    /// clamped to `1..K`.
    pub intent_ratio: f64,
    pub kmeans_iters: usize,
    /// Constant across epochs so centroid refits stay comparable.
    pub kmeans_seed: u64,
    pub normalization: Normalization,
    pub merged_views: MergedViews,
    /// Refit centroids every this many epochs (1 = every epoch).
    pub estep_every: usize,
    pub encoder: EncoderConfig,
    pub adam: AdamConfig,
    pub eval_batch: usize,
    /// Worker threads for validation ranking (results are thread-count
    /// invariant); the M-step is always sequential.
    pub threads: usize,
}

impl TrainConfig {
    pub fn new(item_count: u32) -> Self {
        TrainConfig {
            epochs_max: 200,
            batch_size: 256,
            patience: 10,
            seed: 42,
            weights: LossWeights::default(),
            temperature: 1.0,
            augment: AugmentConfig::default(),
            intent_k: 32,
            intent_ratio: 0.5,
            kmeans_iters: 20,
            kmeans_seed: 1,
            normalization: Normalization::default(),
            merged_views: MergedViews::default(),
            estep_every: 1,
            encoder: EncoderConfig::new(item_count),
            adam: AdamConfig::default(),
            eval_batch: 256,
            threads: 1,
        }
    }

    /// Top-R count derived from `intent_ratio`.
    pub fn intent_r(&self) -> usize {
        let k = self.intent_k;
        ((self.intent_ratio * k as f64).round() as usize).clamp(1, k.saturating_sub(1).max(1))
    }

    fn need_views(&self) -> bool {
        !self.weights.rec_only()
    }

    fn need_intent(&self) -> bool {
        self.weights.lambda > 0.0 || self.weights.gamma > 0.0
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs_max == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(TrainError::Invalid(
                "epochs_max, batch_size, and patience must be positive".into(),
            ));
        }
        if self.estep_every == 0 || self.eval_batch == 0 || self.threads == 0 {
            return Err(TrainError::Invalid(
                "estep_every, eval_batch, and threads must be positive".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(TrainError::Invalid(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        self.weights.validate().map_err(|e| TrainError::Invalid(e.to_string()))?;
        self.adam.validate()?;
        if self.need_views() {
            self.augment.validate()?;
        }
        if self.need_intent() {
            if self.intent_k < 2 {
                return Err(TrainError::Invalid(format!(
                    "intent_k must be at least 2, got {}",
                    self.intent_k
                )));
            }
            if !(self.intent_ratio > 0.0 && self.intent_ratio < 1.0) {
                return Err(TrainError::Invalid(format!(
                    "intent_ratio must lie in (0, 1), got {}",
                    self.intent_ratio
                )));
            }
            if self.kmeans_iters == 0 {
                return Err(TrainError::Invalid("kmeans_iters must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-batch joint loss; component means follow (0 when disabled).
    pub loss: f64,
    pub rec: f64,
    pub cl: f64,
    pub icl: f64,
    pub mcl: f64,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

impl EpochRecord {
    pub fn to_kv(&self) -> String {
        format!(
            "epoch={} loss={} rec={} cl={} icl={} mcl={} hr5={} hr10={} ndcg5={} ndcg10={}",
            self.epoch, self.loss, self.rec, self.cl, self.icl, self.mcl,
            self.hr5, self.hr10, self.ndcg5, self.ndcg10
        )
    }

    pub fn parse_kv(line: &str) -> Result<Self, TrainError> {
        let mut epoch = None;
        let keys = ["loss", "rec", "cl", "icl", "mcl", "hr5", "hr10", "ndcg5", "ndcg10"];
        let mut vals = [None; 9];
        for field in line.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| TrainError::Invalid(format!("malformed field `{field}`")))?;
            if key == "epoch" {
                epoch = Some(value.parse::<usize>().map_err(|e| {
                    TrainError::Invalid(format!("bad epoch value `{value}`: {e}"))
                })?);
            } else if let Some(idx) = keys.iter().position(|&k| k == key) {
                vals[idx] = Some(value.parse::<f64>().map_err(|e| {
                    TrainError::Invalid(format!("bad {key} value `{value}`: {e}"))
                })?);
            } else {
                return Err(TrainError::Invalid(format!("unknown key `{key}`")));
            }
        }
        let epoch = epoch.ok_or_else(|| TrainError::Invalid(format!("missing epoch in `{line}`")))?;
        let mut out = [0.0; 9];
        for (slot, v) in out.iter_mut().zip(vals) {
            *slot = v.ok_or_else(|| TrainError::Invalid(format!("incomplete record `{line}`")))?;
        }
        let [loss, rec, cl, icl, mcl, hr5, hr10, ndcg5, ndcg10] = out;
        Ok(EpochRecord { epoch, loss, rec, cl, icl, mcl, hr5, hr10, ndcg5, ndcg10 })
    }
}

/// Result of a training run (or a resumed segment of one).
#[derive(Debug, Clone)]
pub struct TrainOutcome<S: Scalar> {
    /// Snapshot at the best validation NDCG@10 (model + centroids).
    pub best: Checkpoint<S>,
    /// Final state including optimizer moments; feed back to [`train`] to
    /// continue the run.
    pub latest: Checkpoint<S>,
    /// Records for the epochs executed by this call, in order.
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_ndcg10: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct EncoderMeta {
    item_count: u32,
    dim: usize,
    heads: usize,
    blocks: usize,
    max_len: usize,
    dropout: f64,
    extra_mask_row: bool,
    pooling: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct IntentMeta {
    k: usize,
    r: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    best_epoch: usize,
    best_ndcg10: Option<f64>,
    epochs_since_best: usize,
    encoder: EncoderMeta,
    intent: Option<IntentMeta>,
}

fn pooling_to_str(p: Pooling) -> &'static str {
    match p {
        Pooling::Mean => "mean",
        Pooling::MaskedMean => "masked_mean",
    }
}

fn pooling_from_str(s: &str) -> Result<Pooling, TrainError> {
    match s {
        "mean" => Ok(Pooling::Mean),
        "masked_mean" => Ok(Pooling::MaskedMean),
        other => Err(TrainError::Invalid(format!("unknown pooling `{other}`"))),
    }
}

fn encoder_meta(cfg: &EncoderConfig) -> EncoderMeta {
    EncoderMeta {
        item_count: cfg.item_count,
        dim: cfg.dim,
        heads: cfg.heads,
        blocks: cfg.blocks,
        max_len: cfg.max_len,
        dropout: cfg.dropout,
        extra_mask_row: cfg.extra_mask_row,
        pooling: pooling_to_str(cfg.pooling).to_string(),
    }
}

fn encoder_from_meta(meta: &EncoderMeta) -> Result<EncoderConfig, TrainError> {
    let mut cfg = EncoderConfig::new(meta.item_count);
    cfg.dim = meta.dim;
    cfg.heads = meta.heads;
    cfg.blocks = meta.blocks;
    cfg.max_len = meta.max_len;
    cfg.dropout = meta.dropout;
    cfg.extra_mask_row = meta.extra_mask_row;
    cfg.pooling = pooling_from_str(&meta.pooling)?;
    Ok(cfg)
}

/// A model rebuilt from a checkpoint, ready for evaluation or resumption.
#[derive(Debug, Clone)]
pub struct RestoredModel<S: Scalar> {
    pub encoder: Encoder,
    pub params: ParamStore<S>,
    pub intent: Option<IntentModel<S>>,
}

/// Rebuilds encoder + parameters (+ intent model if present) from a
/// checkpoint produced by [`train`]. Shape disagreements between the stored
/// tensors and the recorded architecture surface as descriptive errors.
pub fn restore<S: Scalar>(ckpt: &Checkpoint<S>) -> Result<RestoredModel<S>, TrainError> {
    let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
        .map_err(|e| TrainError::Invalid(format!("unreadable checkpoint metadata: {e}")))?;
    let encoder = Encoder::new(encoder_from_meta(&meta.encoder)?)?;
    let mut working = ckpt.clone();
    let params = ParamStore::from_named(working.take_prefixed("model"))?;
    encoder.validate_params(&params)?;
    let intent = match meta.intent {
        None => None,
        Some(im) => {
            let centroids = working.take("intent.centroids")?;
            Some(IntentModel::new(im.k, im.r, meta.encoder.dim, centroids.values)?)
        }
    };
    Ok(RestoredModel { encoder, params, intent })
}

/// Deterministic per-purpose random stream: FNV-1a over the purpose tag,
/// epoch, and master seed feeds a ChaCha generator. Streams for a given
/// epoch depend only on `(master, tag, epoch)`, never on history, which is
/// what makes resumed runs replay uninterrupted trajectories.
fn stream(master: u64, tag: &str, epoch: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    for &b in tag.as_bytes() {
        eat(b);
    }
    for b in epoch.to_le_bytes() {
        eat(b);
    }
    for b in master.to_le_bytes() {
        eat(b);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Encodes every user's un-augmented training prefix (dropout off), pools,
/// and refits k-means; the returned model replaces the previous epoch's.
#[allow(clippy::too_many_arguments)]
pub fn epoch_estep<S: Scalar>(
    ds: &InteractionDataset,
    encoder: &Encoder,
    store: &ParamStore<S>,
    batch_size: usize,
    k: usize,
    r: usize,
    max_iter: usize,
    seed: u64,
) -> Result<(IntentModel<S>, KmeansTrace), TrainError> {
    let reps = pooled_reps(ds, encoder, store, batch_size)?;
    let d = encoder.config().dim;
    let (model, trace) = IntentModel::fit_kmeans(&reps, ds.user_count(), d, k, r, max_iter, seed)?;
    Ok((model, trace))
}

/// Pooled eval-mode representation of every user's training prefix,
/// row-major `(user_count, dim)`.
pub fn pooled_reps<S: Scalar>(
    ds: &InteractionDataset,
    encoder: &Encoder,
    store: &ParamStore<S>,
    batch_size: usize,
) -> Result<Vec<S>, TrainError> {
    let t = encoder.config().max_len;
    let users: Vec<usize> = (0..ds.user_count()).collect();
    let mut reps = Vec::with_capacity(users.len() * encoder.config().dim);
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: eval mode has no dropout
    for chunk in users.chunks(batch_size) {
        let mut inputs = Vec::with_capacity(chunk.len() * t);
        for &u in chunk {
            inputs.extend(truncate_pad(ds.train_prefix(u), t));
        }
        let mut tape: Tape<S> = Tape::new();
        let bound = store.bind(&mut tape, false);
        let per_step = encoder.encode(&mut tape, &bound, &inputs, chunk.len(), t, Mode::Eval, &mut rng)?;
        let pooled = encoder.pool(&mut tape, per_step, &inputs)?;
        reps.extend_from_slice(tape.values(pooled));
    }
    Ok(reps)
}

struct BatchLosses {
    total: f64,
    rec: f64,
    cl: f64,
    icl: f64,
    mcl: f64,
}

struct Rngs {
    negatives: ChaCha8Rng,
    augment: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

/// One M-step over a batch: forward all active losses, backprop, Adam.
#[allow(clippy::too_many_arguments)]
fn run_batch<S: Scalar>(
    ds: &InteractionDataset,
    encoder: &Encoder,
    store: &mut ParamStore<S>,
    adam: &mut Adam<S>,
    users: &[usize],
    cfg: &TrainConfig,
    aug_cfg: &AugmentConfig,
    intent: Option<&IntentModel<S>>,
    rngs: &mut Rngs,
) -> Result<BatchLosses, TrainError> {
    let t = encoder.config().max_len;
    let batch = build_batch(ds, users, t, &mut rngs.negatives)?;
    let n = batch.n;
    let mut tape: Tape<S> = Tape::new();
    let bound = store.bind(&mut tape, true);
    let per_step = encoder.encode(&mut tape, &bound, &batch.inputs, n, t, Mode::Train, &mut rngs.dropout)?;
    let l_rec = loss_rec(&mut tape, per_step, bound.get("item_embedding"), &batch)?;

    // Contrastive terms need at least two users; a size-1 tail batch falls
    // back to the next-item loss alone.
    let contrastive = cfg.need_views() && n >= 2;
    let mut l_cl = None;
    let mut l_icl = None;
    let mut l_mcl = None;
    if contrastive {
        let mut inputs_a = Vec::with_capacity(n * t);
        let mut inputs_b = Vec::with_capacity(n * t);
        for &u in users {
            let prefix = ds.train_prefix(u);
            let window = &prefix[prefix.len().saturating_sub(t)..];
            let view_a = augment(window, aug_cfg, &mut rngs.augment);
            let view_b = augment(window, aug_cfg, &mut rngs.augment);
            inputs_a.extend(truncate_pad(&view_a, t));
            inputs_b.extend(truncate_pad(&view_b, t));
        }
        let steps_a = encoder.encode(&mut tape, &bound, &inputs_a, n, t, Mode::Train, &mut rngs.dropout)?;
        let steps_b = encoder.encode(&mut tape, &bound, &inputs_b, n, t, Mode::Train, &mut rngs.dropout)?;
        if cfg.weights.beta > 0.0 {
            let flat_a = encoder.concat_views(&mut tape, steps_a)?;
            let flat_b = encoder.concat_views(&mut tape, steps_b)?;
            l_cl = Some(loss_cl(&mut tape, flat_a, flat_b, cfg.temperature)?);
        }
        if cfg.need_intent() {
            let model = intent.ok_or_else(|| {
                TrainError::Invalid("intent losses enabled but no centroids fitted".into())
            })?;
            let pooled_a = encoder.pool(&mut tape, steps_a, &inputs_a)?;
            let pooled_b = encoder.pool(&mut tape, steps_b, &inputs_b)?;
            if cfg.weights.lambda > 0.0 {
                // Positives come from the un-augmented sequence's nearest
                // centroid; both views share the assignment.
                let pooled_orig = encoder.pool(&mut tape, per_step, &batch.inputs)?;
                let assignments = model.assign_nearest(tape.values(pooled_orig), n);
                l_icl = Some(loss_icl(&mut tape, &[pooled_a, pooled_b], model, &assignments, cfg.temperature)?);
            }
            if cfg.weights.gamma > 0.0 {
                let x_bar: TensorId = match cfg.merged_views {
                    MergedViews::Alpha => pooled_a,
                    MergedViews::Beta => pooled_b,
                    MergedViews::Average => {
                        let sum = tape.add(pooled_a, pooled_b)?;
                        tape.scale(sum, S::from_f64c(0.5))?
                    }
                };
                let x_vals = tape.values(x_bar).to_vec();
                let raw = model.raw_weights(&x_vals, n);
                let weights = model.smooth_weights(&raw, n, cfg.normalization);
                let c_bar = model.intent_aware_rep(&weights.smoothed, n);
                l_mcl = Some(loss_mcl(&mut tape, x_bar, &c_bar, &weights.smoothed, model.k(), cfg.temperature)?);
            }
        }
    }

    let effective = if contrastive {
        cfg.weights
    } else {
        LossWeights { beta: 0.0, lambda: 0.0, gamma: 0.0 }
    };
    let total = loss_joint(&mut tape, l_rec, l_cl, l_icl, l_mcl, &effective)?;
    store.zero_grads();
    tape.backward(total)?;
    store.harvest_grads(&tape, &bound);
    adam.step(store)?;

    let val = |id: TensorId| tape.values(id)[0].to_f64c();
    Ok(BatchLosses {
        total: val(total),
        rec: val(l_rec),
        cl: l_cl.map(val).unwrap_or(0.0),
        icl: l_icl.map(val).unwrap_or(0.0),
        mcl: l_mcl.map(val).unwrap_or(0.0),
    })
}

fn build_checkpoint<S: Scalar>(
    store: &ParamStore<S>,
    intent: Option<&IntentModel<S>>,
    adam: Option<(&Adam<S>, &ParamStore<S>)>,
    meta: &CheckpointMeta,
) -> Checkpoint<S> {
    let meta_value = serde_json::to_value(meta).expect("checkpoint metadata serializes");
    let mut ckpt = Checkpoint::new(meta_value);
    ckpt.push_all("model", store.to_named());
    if let Some(model) = intent {
        ckpt.push_all(
            "intent",
            vec![NamedTensor {
                name: "centroids".into(),
                shape: vec![model.k(), model.dim()],
                values: model.centroids().to_vec(),
            }],
        );
    }
    if let Some((opt, st)) = adam {
        ckpt.push_all("adam", opt.to_named(st));
    }
    ckpt
}

/// Runs the full loop. `resume` continues from a `latest` checkpoint of an
/// earlier call with the same config; epoch numbering, random streams, and
/// early-stop counters pick up where that run left off.
pub fn train<S: Scalar>(
    ds: &InteractionDataset,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint<S>>,
) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    if cfg.encoder.item_count != ds.item_count() {
        return Err(TrainError::Invalid(format!(
            "encoder is sized for {} items but the dataset has {}",
            cfg.encoder.item_count,
            ds.item_count()
        )));
    }
    let encoder = Encoder::new(cfg.encoder.clone())?;
    // The masking augmentation must use the encoder's mask id (a dedicated
    // row when enabled, otherwise the padding id).
    let mut aug_cfg = cfg.augment.clone();
    aug_cfg.mask_token = encoder.mask_token();

    let mut intent: Option<IntentModel<S>> = None;
    let (mut store, mut adam, start_epoch, mut best_ndcg10, mut best_epoch, mut since_best) =
        match resume {
            None => {
                let store: ParamStore<S> = encoder.init_params(&mut stream(cfg.seed, "init", 0));
                let adam = Adam::new(cfg.adam, &store)?;
                (store, adam, 1, f64::NEG_INFINITY, 0, 0usize)
            }
            Some(ckpt) => {
                let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
                    .map_err(|e| TrainError::Invalid(format!("unreadable checkpoint metadata: {e}")))?;
                let mut working = ckpt.clone();
                let store = ParamStore::from_named(working.take_prefixed("model"))?;
                encoder.validate_params(&store)?;
                let adam_tensors = working.take_prefixed("adam");
                let adam = if adam_tensors.is_empty() {
                    Adam::new(cfg.adam, &store)?
                } else {
                    Adam::from_named(cfg.adam, &store, adam_tensors)?
                };
                let best = meta.best_ndcg10.unwrap_or(f64::NEG_INFINITY);
                (store, adam, meta.epoch + 1, best, meta.best_epoch, meta.epochs_since_best)
            }
        };

    // Best snapshot starts as the current state so a zero-epoch call still
    // returns a coherent checkpoint.
    let mut best_store = store.clone();
    let mut best_intent: Option<IntentModel<S>> = None;
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut last_epoch = start_epoch.saturating_sub(1);

    for epoch in start_epoch..=cfg.epochs_max {
        if cfg.need_intent() && (intent.is_none() || (epoch - 1) % cfg.estep_every == 0) {
            let (model, _trace) = epoch_estep(
                ds,
                &encoder,
                &store,
                cfg.eval_batch,
                cfg.intent_k,
                cfg.intent_r(),
                cfg.kmeans_iters,
                cfg.kmeans_seed,
            )?;
            intent = Some(model);
        }

        let mut rng_shuffle = stream(cfg.seed, "shuffle", epoch as u64);
        let mut rngs = Rngs {
            negatives: stream(cfg.seed, "negatives", epoch as u64),
            augment: stream(cfg.seed, "augment", epoch as u64),
            dropout: stream(cfg.seed, "dropout", epoch as u64),
        };
        let batches = shuffled_batches(ds.user_count(), cfg.batch_size, &mut rng_shuffle);
        let mut sums = BatchLosses { total: 0.0, rec: 0.0, cl: 0.0, icl: 0.0, mcl: 0.0 };
        for users in &batches {
            let b = run_batch(ds, &encoder, &mut store, &mut adam, users, cfg, &aug_cfg, intent.as_ref(), &mut rngs)?;
            sums.total += b.total;
            sums.rec += b.rec;
            sums.cl += b.cl;
            sums.icl += b.icl;
            sums.mcl += b.mcl;
        }
        let m = batches.len().max(1) as f64;

        let eval_cfg = EvalConfig {
            batch_size: cfg.eval_batch,
            exclude_history: true,
            threads: cfg.threads,
        };
        let report = evaluate(&encoder, &store, ds, Split::Valid, &eval_cfg)?;
        let record = EpochRecord {
            epoch,
            loss: sums.total / m,
            rec: sums.rec / m,
            cl: sums.cl / m,
            icl: sums.icl / m,
            mcl: sums.mcl / m,
            hr5: report.hr5,
            hr10: report.hr10,
            ndcg5: report.ndcg5,
            ndcg10: report.ndcg10,
        };
        history.push(record);
        last_epoch = epoch;

        if report.ndcg10 > best_ndcg10 {
            best_ndcg10 = report.ndcg10;
            best_epoch = epoch;
            since_best = 0;
            best_store = store.clone();
            best_intent = intent.clone();
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let best_meta = CheckpointMeta {
        epoch: best_epoch.max(start_epoch.saturating_sub(1)),
        best_epoch,
        best_ndcg10: best_ndcg10.is_finite().then_some(best_ndcg10),
        epochs_since_best: 0,
        encoder: encoder_meta(&cfg.encoder),
        intent: best_intent.as_ref().map(|m| IntentMeta { k: m.k(), r: m.r() }),
    };
    let best = build_checkpoint(&best_store, best_intent.as_ref(), None, &best_meta);

    let latest_meta = CheckpointMeta {
        epoch: last_epoch,
        best_epoch,
        best_ndcg10: best_ndcg10.is_finite().then_some(best_ndcg10),
        epochs_since_best: since_best,
        encoder: encoder_meta(&cfg.encoder),
        intent: intent.as_ref().map(|m| IntentMeta { k: m.k(), r: m.r() }),
    };
    let latest = build_checkpoint(&store, intent.as_ref(), Some((&adam, &store)), &latest_meta);

    Ok(TrainOutcome { best, latest, history, best_epoch, best_ndcg10, stopped_early })
}
