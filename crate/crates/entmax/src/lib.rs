//! File formats, a toy training harness and a command-line front end for
//! `entmax-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
mod error;
pub mod gradcheck;
pub mod harness;
pub mod io;

pub use error::{Error, Result};
