//! Causal self-attention sequence encoder.
//!
//! Maps a padded item-id batch to per-step latent vectors through item +
//! learned position embeddings, layer norm, and a stack of post-norm
//! transformer blocks (multi-head attention, then a GELU feed-forward, each
//! with residual connection and layer norm). Attention is causal; padded key
//! positions are hidden from real queries, while padded query rows attend
//! only to themselves. Also provides the two readouts used elsewhere: mean
//! pooling over steps and flattening of the step axis, plus last-step
//! extraction for next-item scoring.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::params::{BoundParams, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorError, TensorId};

/// Standard deviation for embedding/weight initialization.
const INIT_STD: f64 = 0.02;
/// Feed-forward inner width as a multiple of the model dimension.
const FFN_MULT: usize = 4;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Invalid(String),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
}

/// Whether dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How per-step vectors are pooled into one vector per sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    /// Literal arithmetic mean over all T steps, padded positions included.
    #[default]
    Mean,
    /// Mean over non-padded positions only (uniform over T if a row is all
    /// padding).
    MaskedMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub item_count: u32,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Reserve one extra embedding row (id `item_count + 1`) for a dedicated
    /// mask token.
    pub extra_mask_row: bool,
    pub pooling: Pooling,
}

impl EncoderConfig {
    /// Defaults: d=64, 2 heads, 2 blocks, window 50, dropout 0.2.
    pub fn new(item_count: u32) -> Self {
        EncoderConfig {
            item_count,
            dim: 64,
            heads: 2,
            blocks: 2,
            max_len: 50,
            dropout: 0.2,
            extra_mask_row: false,
            pooling: Pooling::Mean,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.item_count == 0 {
            return Err(EncoderError::Invalid("item_count must be positive".into()));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(EncoderError::Invalid(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.blocks == 0 {
            return Err(EncoderError::Invalid("at least one block is required".into()));
        }
        if self.max_len == 0 {
            return Err(EncoderError::Invalid("max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::Invalid(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// The encoder architecture; weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self, EncoderError> {
        cfg.validate()?;
        Ok(Encoder { cfg })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Embedding table rows: items 1..=item_count, row 0 for padding, plus an
    /// optional dedicated mask row.
    pub fn vocab_rows(&self) -> usize {
        self.cfg.item_count as usize + 1 + usize::from(self.cfg.extra_mask_row)
    }

    /// The id augmentation should substitute at masked positions.
    pub fn mask_token(&self) -> u32 {
        if self.cfg.extra_mask_row {
            self.cfg.item_count + 1
        } else {
            0
        }
    }

    /// Ordered (name, shape) list of every weight tensor.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.cfg.dim;
        let mut specs = vec![
            ("item_embedding".to_string(), vec![self.vocab_rows(), d]),
            ("position_embedding".to_string(), vec![self.cfg.max_len, d]),
            ("embed_norm.gamma".to_string(), vec![d]),
            ("embed_norm.beta".to_string(), vec![d]),
        ];
        for b in 0..self.cfg.blocks {
            for w in ["wq", "wk", "wv", "wo"] {
                specs.push((format!("block{b}.attn.{w}"), vec![d, d]));
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                specs.push((format!("block{b}.attn.{bias}"), vec![d]));
            }
            specs.push((format!("block{b}.attn_norm.gamma"), vec![d]));
            specs.push((format!("block{b}.attn_norm.beta"), vec![d]));
            specs.push((format!("block{b}.ffn.w1"), vec![d, FFN_MULT * d]));
            specs.push((format!("block{b}.ffn.b1"), vec![FFN_MULT * d]));
            specs.push((format!("block{b}.ffn.w2"), vec![FFN_MULT * d, d]));
            specs.push((format!("block{b}.ffn.b2"), vec![d]));
            specs.push((format!("block{b}.ffn_norm.gamma"), vec![d]));
            specs.push((format!("block{b}.ffn_norm.beta"), vec![d]));
        }
        specs
    }

    /// Fresh weights: embeddings and linear maps ~ Normal(0, 0.02), biases
    /// and norm shifts 0, norm scales 1.
    pub fn init_params<S: Scalar, R: Rng>(&self, rng: &mut R) -> ParamStore<S> {
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let mut store = ParamStore::new();
        for (name, shape) in self.param_specs() {
            let n: usize = shape.iter().product();
            let values: Vec<S> = if name.ends_with(".gamma") {
                vec![S::one(); n]
            } else if name.ends_with(".beta") || name.contains(".attn.b") || name.contains(".ffn.b") {
                vec![S::zero(); n]
            } else {
                (0..n).map(|_| S::from_f64c(normal.sample(rng))).collect()
            };
            store.insert(&name, shape, values).expect("spec names are unique");
        }
        store
    }

    /// Checks that a loaded store carries exactly the expected tensors.
    pub fn validate_params<S: Scalar>(&self, store: &ParamStore<S>) -> Result<(), EncoderError> {
        let specs = self.param_specs();
        for (name, shape) in &specs {
            match store.get(name) {
                None => {
                    return Err(EncoderError::ParamMismatch(format!(
                        "missing tensor `{name}` (expected shape {shape:?})"
                    )))
                }
                Some(p) if p.shape != *shape => {
                    return Err(EncoderError::ParamMismatch(format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        p.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if store.len() != specs.len() {
            let expected: std::collections::HashSet<&str> =
                specs.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<&str> = store
                .iter()
                .map(|p| p.name.as_str())
                .filter(|n| !expected.contains(n))
                .collect();
            return Err(EncoderError::ParamMismatch(format!("unexpected tensors {extra:?}")));
        }
        Ok(())
    }

    /// Attention visibility for a padded batch: query `tq` of sample `i` may
    /// see key `tk` iff `tk <= tq` and the key is a real item — except that a
    /// padded query attends to itself so its softmax row stays well-defined.
    pub fn attention_mask(inputs: &[u32], n: usize, t: usize) -> Arc<Vec<bool>> {
        assert_eq!(inputs.len(), n * t, "inputs must be (n, t)");
        let mut allowed = vec![false; n * t * t];
        for i in 0..n {
            for tq in 0..t {
                for tk in 0..=tq {
                    allowed[(i * t + tq) * t + tk] = inputs[i * t + tk] != 0 || tk == tq;
                }
            }
        }
        Arc::new(allowed)
    }

    /// Runs the stack over a padded id batch, returning per-step vectors of
    /// shape `(n, t, d)`. Dropout fires only in [`Mode::Train`].
    #[allow(clippy::too_many_arguments)]
    pub fn encode<S: Scalar, R: Rng>(
        &self,
        tape: &mut Tape<S>,
        params: &BoundParams,
        inputs: &[u32],
        n: usize,
        t: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<TensorId, TensorError> {
        if inputs.len() != n * t || t == 0 || n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "encode",
                details: format!("inputs len {} does not form an (n={n}, t={t}) batch", inputs.len()),
            });
        }
        if t > self.cfg.max_len {
            return Err(TensorError::InvalidArgument {
                op: "encode",
                details: format!("t={t} exceeds max_len={}", self.cfg.max_len),
            });
        }
        let d = self.cfg.dim;
        let train = mode == Mode::Train;
        let rate = self.cfg.dropout;

        let item_rows: Vec<usize> = inputs.iter().map(|&i| i as usize).collect();
        let pos_rows: Vec<usize> = (0..n).flat_map(|_| 0..t).collect();
        let e_item = tape.gather_rows(params.get("item_embedding"), &item_rows)?;
        let e_pos = tape.gather_rows(params.get("position_embedding"), &pos_rows)?;
        let summed = tape.add(e_item, e_pos)?;
        let mut h = tape.layer_norm(summed, params.get("embed_norm.gamma"), params.get("embed_norm.beta"))?;
        if train {
            h = tape.dropout(h, rate, rng)?;
        }

        let allowed = Self::attention_mask(inputs, n, t);
        for b in 0..self.cfg.blocks {
            let p = |suffix: &str| params.get(&format!("block{b}.{suffix}"));
            let q = tape.linear(h, p("attn.wq"), p("attn.bq"))?;
            let k = tape.linear(h, p("attn.wk"), p("attn.bk"))?;
            let v = tape.linear(h, p("attn.wv"), p("attn.bv"))?;
            let q3 = tape.reshape(q, vec![n, t, d])?;
            let k3 = tape.reshape(k, vec![n, t, d])?;
            let v3 = tape.reshape(v, vec![n, t, d])?;
            let attn = if train {
                tape.mha(q3, k3, v3, self.cfg.heads, &allowed, Some((rate, rng)))?
            } else {
                tape.mha::<R>(q3, k3, v3, self.cfg.heads, &allowed, None)?
            };
            let attn2 = tape.reshape(attn, vec![n * t, d])?;
            let mut o = tape.linear(attn2, p("attn.wo"), p("attn.bo"))?;
            if train {
                o = tape.dropout(o, rate, rng)?;
            }
            let res = tape.add(h, o)?;
            h = tape.layer_norm(res, p("attn_norm.gamma"), p("attn_norm.beta"))?;

            let f1 = tape.linear(h, p("ffn.w1"), p("ffn.b1"))?;
            let f1 = tape.gelu(f1)?;
            let mut f2 = tape.linear(f1, p("ffn.w2"), p("ffn.b2"))?;
            if train {
                f2 = tape.dropout(f2, rate, rng)?;
            }
            let res = tape.add(h, f2)?;
            h = tape.layer_norm(res, p("ffn_norm.gamma"), p("ffn_norm.beta"))?;
        }
        tape.reshape(h, vec![n, t, d])
    }

    /// Pools `(n, t, d)` per-step vectors to `(n, d)` per the configured mode.
    pub fn pool<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        per_step: TensorId,
        inputs: &[u32],
    ) -> Result<TensorId, TensorError> {
        let shape = tape.shape(per_step).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "pool",
                details: format!("expected (n, t, d), got {shape:?}"),
            });
        }
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        match self.cfg.pooling {
            Pooling::Mean => tape.mean_axis(per_step, 1),
            Pooling::MaskedMean => {
                if inputs.len() != n * t {
                    return Err(TensorError::ShapeMismatch {
                        op: "pool",
                        details: format!("inputs len {} vs batch (n={n}, t={t})", inputs.len()),
                    });
                }
                let mut weights = vec![S::zero(); n * t * d];
                for i in 0..n {
                    let row = &inputs[i * t..(i + 1) * t];
                    let real = row.iter().filter(|&&x| x != 0).count();
                    let (count, include_pad) = if real == 0 { (t, true) } else { (real, false) };
                    let w = S::from_f64c(1.0 / count as f64);
                    for (pos, &id) in row.iter().enumerate() {
                        if id != 0 || include_pad {
                            let base = (i * t + pos) * d;
                            weights[base..base + d].fill(w);
                        }
                    }
                }
                let wt = tape.constant(weights, vec![n, t, d])?;
                let weighted = tape.mul(per_step, wt)?;
                tape.sum_axis(weighted, 1)
            }
        }
    }

    /// Flattens `(n, t, d)` to `(n, t*d)`, step-major.
    pub fn concat_views<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        per_step: TensorId,
    ) -> Result<TensorId, TensorError> {
        let shape = tape.shape(per_step).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_views",
                details: format!("expected (n, t, d), got {shape:?}"),
            });
        }
        tape.reshape(per_step, vec![shape[0], shape[1] * shape[2]])
    }

    /// Extracts the last step of each sequence: `(n, t, d)` -> `(n, d)`.
    pub fn last_hidden<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        per_step: TensorId,
    ) -> Result<TensorId, TensorError> {
        let shape = tape.shape(per_step).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "last_hidden",
                details: format!("expected (n, t, d), got {shape:?}"),
            });
        }
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        let flat = tape.reshape(per_step, vec![n * t, d])?;
        let rows: Vec<usize> = (0..n).map(|i| (i + 1) * t - 1).collect();
        tape.gather_rows(flat, &rows)
    }
}
