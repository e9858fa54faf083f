//! Desk-scale neural machine translation with complementary knowledge
//! distillation.
//!
//! The crate builds everything needed to run small translation experiments on
//! a CPU: a reverse-mode autodiff engine on a dynamic tape, an
//! encoder-decoder transformer, synthetic cipher translation tasks, a
//! two-stage training pipeline (masked-token encoder pretraining, then
//! frozen-encoder translation training), a complementary distillation stage
//! where teachers and a student rotate over disjoint data subsets, and beam
//! search with BLEU-4/chrF evaluation.
//!
//! The numeric core ([`tensor`], [`autodiff`]) is generic over the scalar
//! type; the model and training stack are pinned to f64 through the aliases
//! below.

pub mod autodiff;
pub mod ckd;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Element type of the model/training stack.
pub type Elem = f64;
/// Tensor at the stack's element type.
pub type Tensor = tensor::Tensor<Elem>;
/// Tape at the stack's element type.
pub type Tape = autodiff::Tape<Elem>;
/// Tape variable at the stack's element type.
pub type Var<'t> = autodiff::Var<'t, Elem>;
