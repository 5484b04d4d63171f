//! Few-shot meta-learning with a linear head on a shared encoder: exact
//! first- and second-order head gradients, the zeroing trick, a
//! finite-difference oracle, and feature-space diagnostics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod io;
pub mod meta;
pub mod numerics;
pub mod oracle;
pub mod runner;

pub use error::{Error, Result};
