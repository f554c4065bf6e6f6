//! Sparse probability mappings for attention.
//!
//! `entmax-core` implements the α-entmax family of mappings from real score
//! vectors onto the probability simplex: softmax (α = 1), exact 1.5-entmax,
//! sparsemax (α = 2) and the general case solved by bisection on the
//! threshold. Every mapping has an exact backward pass with respect to both
//! its scores and the shape parameter α, which makes α a trainable
//! parameter of each attention head.
//!
//! The crate is `no_std` and only needs `alloc`. IO, file formats and the
//! command line live in the companion `entmax` crate.
//!
//! Modules:
//!
//! - [`types`]: validated value types shared by everything else.
//! - [`transforms`]: forward mappings and Tsallis entropy.
//! - [`gradients`]: Jacobian-vector products and the finite-difference and
//!   grid oracles used to check them.
//! - [`attention`]: scaled dot-product and multi-head attention with a
//!   learnable α per head, forward and backward.
//! - [`analysis`]: head density, head diversity, positional confidence and
//!   cluster-merge metrics over recorded attention.
#![cfg_attr(not(test), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod analysis;
pub mod attention;
mod error;
pub mod gradients;
pub mod linalg;
pub(crate) mod math;
pub mod transforms;
pub mod types;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use types::{
    validate_simplex, AttentionKind, AttentionMask, AttentionTensor, ScoreVector, ShapeParam,
    SimplexPoint, TensorHeader, Threshold, SIMPLEX_TOL,
};
