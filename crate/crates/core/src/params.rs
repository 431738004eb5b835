//! Named trainable parameters, tape binding, and checkpoint (de)serialization.
//!
//! A [`ParamStore`] owns the model's parameters in a stable insertion order
//! (iteration order determines optimizer-state alignment and checkpoint
//! layout, so it must be deterministic). Per training batch the store is
//! bound onto a fresh [`Tape`] as gradient-requiring leaves; after backward,
//! [`ParamStore::harvest_grads`] pulls the tape gradients back.
//!
//! Checkpoints are JSON documents of the form
//! `{"version", "meta", "tensors": [{"name", "shape", "values"}, ...]}` with
//! values stored as `f64` (lossless for both supported scalar types).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{numel, Tape, TensorId};

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Errors from parameter bookkeeping and checkpoint I/O.
#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter '{0}'")]
    Duplicate(String),
    #[error("unknown parameter '{0}'")]
    Unknown(String),
    #[error("parameter '{name}': {got} values do not fit shape {shape:?}")]
    ShapeMismatch { name: String, shape: Vec<usize>, got: usize },
    #[error("gradient missing for parameter '{0}'; run backward and harvest_grads before stepping")]
    MissingGrad(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {found} (this build reads version {CHECKPOINT_VERSION})")]
    Version { found: u32 },
}

/// One named tensor with an optional accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<S>,
    pub grad: Option<Vec<S>>,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, usize>,
}

/// Tape leaves created from a store by [`ParamStore::bind`].
#[derive(Debug)]
pub struct BoundParams {
    ids: HashMap<String, TensorId>,
}

impl BoundParams {
    /// Tape id of a bound parameter. Parameter names are internal constants,
    /// so a miss is a bug, not a recoverable condition.
    pub fn get(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' was not bound to this tape"))
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    /// Adds a parameter; order of insertion is preserved.
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<S>) -> Result<(), ParamError> {
        if self.index.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        if values.len() != numel(&shape) {
            return Err(ParamError::ShapeMismatch { name: name.to_string(), shape, got: values.len() });
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter { name: name.to_string(), shape, values, grad: None });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<S>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<S>> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i])
    }

    pub fn require(&self, name: &str) -> Result<&Parameter<S>, ParamError> {
        self.get(name).ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    /// Resets every gradient to an all-zero buffer.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            match &mut p.grad {
                Some(g) => g.fill(S::zero()),
                None => p.grad = Some(vec![S::zero(); p.values.len()]),
            }
        }
    }

    /// Creates gradient-requiring leaves for every parameter on `tape`.
    /// With `trainable = false` the leaves are constants (evaluation mode).
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> BoundParams {
        let mut ids = HashMap::with_capacity(self.params.len());
        for p in &self.params {
            let id = tape
                .leaf(p.values.clone(), p.shape.clone(), trainable)
                .expect("stored parameter shape is consistent");
            ids.insert(p.name.clone(), id);
        }
        BoundParams { ids }
    }

    /// Adds the tape's accumulated gradients into each parameter's `grad`
    /// buffer (allocating zero buffers first, so every parameter ends up with
    /// a present gradient).
    pub fn harvest_grads(&mut self, tape: &Tape<S>, bound: &BoundParams) {
        for p in &mut self.params {
            let g = p.grad.get_or_insert_with(|| vec![S::zero(); p.values.len()]);
            if let Some(tg) = tape.grad(bound.get(&p.name)) {
                for (gv, &tv) in g.iter_mut().zip(tg) {
                    *gv += tv;
                }
            }
        }
    }

    /// Exports `(name, shape, values)` triples in insertion order.
    pub fn to_named(&self) -> Vec<NamedTensor<S>> {
        self.params
            .iter()
            .map(|p| NamedTensor { name: p.name.clone(), shape: p.shape.clone(), values: p.values.clone() })
            .collect()
    }

    /// Rebuilds a store from named tensors, preserving their order.
    pub fn from_named(tensors: Vec<NamedTensor<S>>) -> Result<Self, ParamError> {
        let mut store = ParamStore::new();
        for t in tensors {
            store.insert(&t.name, t.shape, t.values)?;
        }
        Ok(store)
    }
}

/// A named value tensor, the unit of checkpoint storage.
#[derive(Debug, Clone)]
pub struct NamedTensor<S: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<S>,
}

#[derive(Serialize, Deserialize)]
struct TensorJson {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointJson {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorJson>,
}

/// A model snapshot: caller-defined metadata plus named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint<S: Scalar> {
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor<S>>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint { meta, tensors: Vec::new() }
    }

    /// Appends tensors with an optional `prefix.` on their names.
    pub fn push_all(&mut self, prefix: &str, tensors: Vec<NamedTensor<S>>) {
        for mut t in tensors {
            if !prefix.is_empty() {
                t.name = format!("{prefix}.{}", t.name);
            }
            self.tensors.push(t);
        }
    }

    /// Removes and returns every tensor whose name starts with `prefix.`,
    /// stripping the prefix.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<NamedTensor<S>> {
        let full = format!("{prefix}.");
        let mut taken = Vec::new();
        let mut kept = Vec::new();
        for mut t in std::mem::take(&mut self.tensors) {
            if let Some(rest) = t.name.strip_prefix(&full) {
                t.name = rest.to_string();
                taken.push(t);
            } else {
                kept.push(t);
            }
        }
        self.tensors = kept;
        taken
    }

    /// Removes and returns the tensor with this exact name.
    pub fn take(&mut self, name: &str) -> Result<NamedTensor<S>, ParamError> {
        let pos = self
            .tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        Ok(self.tensors.remove(pos))
    }

    /// Serializes to pretty-printed JSON at `path` (atomic enough for our
    /// single-writer usage: full rewrite each call).
    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        let doc = CheckpointJson {
            version: CHECKPOINT_VERSION,
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorJson {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    values: t.values.iter().map(|&v| v.to_f64c()).collect(),
                })
                .collect(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &doc)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        let doc: CheckpointJson = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(ParamError::Version { found: doc.version });
        }
        let tensors = doc
            .tensors
            .into_iter()
            .map(|t| {
                let values: Vec<S> = t.values.iter().map(|&v| S::from_f64c(v)).collect();
                if values.len() != numel(&t.shape) {
                    return Err(ParamError::ShapeMismatch { name: t.name, shape: t.shape, got: values.len() });
                }
                Ok(NamedTensor { name: t.name, shape: t.shape, values })
            })
            .collect::<Result<_, _>>()?;
        Ok(Checkpoint { meta: doc.meta, tensors })
    }
}
