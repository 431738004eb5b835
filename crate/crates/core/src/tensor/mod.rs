//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation as a node in a DAG. Forward methods
//! (`matmul`, `softmax_last`, `mha`, ...) validate shapes, compute values
//! eagerly and return a [`TensorId`]. Calling [`Tape::backward`] on a scalar
//! node walks the recorded nodes in reverse and accumulates gradients for
//! every node that (transitively) depends on a gradient-requiring leaf.
//!
//! Tensors are row-major, shapes are `Vec<usize>` (an empty shape is a
//! scalar), and buffers are reference-counted so zero-copy reshapes are free.
//! A tape is intended to live for one forward/backward episode (one training
//! batch); dropping it frees all intermediate buffers.

mod backward;
pub mod kernels;
mod ops;

use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Errors raised by tensor construction, op shape validation and backward.
#[derive(Debug, Error)]
pub enum TensorError {
    /// Operand shapes are inconsistent for the given op.
    #[error("shape mismatch in `{op}`: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    /// A non-shape argument (axis, rate, index, ...) is invalid.
    #[error("invalid argument to `{op}`: {details}")]
    InvalidArgument { op: &'static str, details: String },
    /// Backward was called on a non-scalar node.
    #[error("backward requires a scalar (single-element) loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Recorded operation; stores input ids plus whatever forward byproducts the
/// backward pass needs.
#[derive(Debug)]
pub(crate) enum Op<S: Scalar> {
    Leaf,
    /// `C = op(A) op(B)` with transpose flags; `op(A)` is `m x k`, `op(B)` is `k x n`.
    Matmul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
        a_t: bool,
        b_t: bool,
    },
    /// `Y = X W + bias` (bias broadcast over rows).
    Linear {
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: S },
    Exp { a: TensorId },
    /// `ln(max(x, floor))`.
    Ln { a: TensorId, floor: S },
    LogSigmoid { a: TensorId },
    Relu { a: TensorId },
    Gelu { a: TensorId },
    Softmax { a: TensorId, rows: usize, cols: usize },
    LogSumExp { a: TensorId, rows: usize, cols: usize },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        rows: usize,
        cols: usize,
        /// Per-row mean, saved on the forward pass.
        mean: Vec<S>,
        /// Per-row `1 / sqrt(var + eps)`, saved on the forward pass.
        inv_std: Vec<S>,
    },
    /// Sum (or mean) over the middle axis of an `(outer, len, inner)` view.
    ReduceAxis {
        a: TensorId,
        outer: usize,
        len: usize,
        inner: usize,
        mean: bool,
    },
    SumAll { a: TensorId },
    Dot { a: TensorId, b: TensorId },
    Norm2 { a: TensorId },
    Cosine { a: TensorId, b: TensorId },
    Concat {
        parts: Vec<TensorId>,
        outer: usize,
        /// Per-part `axis_len * inner` block sizes.
        blocks: Vec<usize>,
    },
    Reshape { a: TensorId },
    GatherRows {
        table: TensorId,
        rows: Arc<Vec<usize>>,
        width: usize,
    },
    Dropout {
        a: TensorId,
        keep: Arc<Vec<bool>>,
        inv_keep: S,
    },
    /// Fused multi-head self-attention with additive masking; see
    /// [`Tape::mha`]. `probs` are the post-softmax attention weights kept for
    /// the backward pass, `drop` an optional attention-dropout keep mask.
    Mha {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        n: usize,
        t: usize,
        heads: usize,
        head_dim: usize,
        scale: S,
        probs: Vec<S>,
        drop: Option<(Vec<bool>, S)>,
    },
}

#[derive(Debug)]
pub(crate) struct Node<S: Scalar> {
    values: Arc<Vec<S>>,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op<S>,
}

/// Records tensor operations and runs reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, values: Arc<Vec<S>>, shape: Vec<usize>, needs_grad: bool, op: Op<S>) -> TensorId {
        debug_assert_eq!(values.len(), numel(&shape), "node value length must match shape");
        self.nodes.push(Node { values, shape, needs_grad, op });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    /// Creates a leaf that does not require gradients (inputs, masks, frozen
    /// statistics).
    pub fn constant(&mut self, values: Vec<S>, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        self.leaf(values, shape, false)
    }

    /// Creates a scalar constant (empty shape).
    pub fn scalar_constant(&mut self, value: S) -> TensorId {
        self.push(Arc::new(vec![value]), Vec::new(), false, Op::Leaf)
    }

    /// Creates a leaf tensor; set `requires_grad` for trainable parameters.
    pub fn leaf(&mut self, values: Vec<S>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId, TensorError> {
        if values.len() != numel(&shape) {
            return Err(TensorError::ShapeMismatch {
                op: "leaf",
                details: format!("{} values for shape {:?}", values.len(), shape),
            });
        }
        Ok(self.push(Arc::new(values), shape, requires_grad, Op::Leaf))
    }

    /// Leaf sharing an existing buffer without copying.
    pub fn leaf_shared(&mut self, values: Arc<Vec<S>>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId, TensorError> {
        if values.len() != numel(&shape) {
            return Err(TensorError::ShapeMismatch {
                op: "leaf",
                details: format!("{} values for shape {:?}", values.len(), shape),
            });
        }
        Ok(self.push(values, shape, requires_grad, Op::Leaf))
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].values.len()
    }

    pub fn values(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].values
    }

    /// Shared handle to a node's value buffer.
    pub fn values_arc(&self, id: TensorId) -> Arc<Vec<S>> {
        Arc::clone(&self.nodes[id.0].values)
    }

    /// Value of a single-element tensor.
    pub fn value_scalar(&self, id: TensorId) -> S {
        debug_assert_eq!(self.numel(id), 1, "value_scalar on non-scalar tensor");
        self.nodes[id.0].values[0]
    }

    /// Whether gradients will flow into this node during backward.
    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Accumulated gradient, if backward has reached this node.
    ///
    /// `None` means "identically zero": either backward has not run, or the
    /// loss does not depend on this node.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    fn input_needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                details: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    /// Interprets a shape as 2D `(rows, cols)` with `cols` = last axis.
    fn rows_cols(&self, op: &'static str, id: TensorId) -> Result<(usize, usize), TensorError> {
        let shape = self.shape(id);
        match shape.last() {
            Some(&cols) if cols > 0 => Ok((self.numel(id) / cols, cols)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                details: format!("need at least one non-empty axis, got {shape:?}"),
            }),
        }
    }
}
