//! Differentiable oblivious decision tree GAMs.
//!
//! Soft oblivious trees pick features with 1.5-entmax and split with a sparse
//! sigmoid; as the selection temperature anneals to zero every tree depends
//! on exactly one feature (or one pair), so the whole network stays a GAM
//! (or GA²M) whose shape functions can be read off directly.
// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod container;
pub mod error;
pub mod interpret;
pub mod layer;
pub mod network;
pub mod numeric;
pub mod optim;
pub mod preprocess;
pub mod training;

pub use error::{Error, Result};
