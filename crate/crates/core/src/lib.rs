//! Sequential recommendation engine with contrastive intent modeling.
//!
//! The crate provides everything needed to train and evaluate a
//! self-attention next-item recommender on implicit-feedback sequences:
//!
//! - [`tensor`]: a tape-based reverse-mode autodiff engine over dense
//!   row-major tensors, with a fused multi-head attention op;
//! - [`scalar`]: the floating-point abstraction ([`Scalar`], implemented for
//!   `f32`/`f64`) every numeric module is generic over;
//! - [`gradcheck`]: finite-difference gradient verification used by the
//!   test-suite oracles.
//!
//! Training and evaluation entry points default to `f64`; the [`Real`] alias
//! fixes the concrete scalar used by the command-line interface.

pub mod adam;
pub mod augment;
pub mod dataset;
pub mod encoder;
pub mod eval;
pub mod gradcheck;
pub mod intent;
pub mod losses;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;
pub use tensor::{Tape, TensorError, TensorId};

/// Default concrete scalar for end-to-end training and evaluation.
pub type Real = f64;

/// Tape over the default scalar.
pub type RealTape = Tape<Real>;
