// `Real` may be f32 or f64, so casts to f64 are not always no-ops; negated
// comparisons are used on purpose to reject NaN.
#![allow(clippy::unnecessary_cast, clippy::neg_cmp_op_on_partial_ord)]

//! Hierarchical byte-level language model with entropy patching, block
//! diffusion decoding, self-speculative verification and NFE accounting.

pub mod autograd;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod patching;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{Mask, Real, Tensor};
