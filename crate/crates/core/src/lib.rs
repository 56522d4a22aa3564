//! Decoupled retrieval-augmented generation on a desk-scale language model.
//!
//! The pipeline routes a query ([`decision`]), retrieves evidence with BM25
//! ([`corpus`]), drafts a parametric Inner-Answer and an evidence-grounded
//! Refer-Answer ([`dualpath`]), splits the latter into atomic segments
//! ([`segmentation`]) and fuses both at the hidden-state level while decoding
//! ([`fusion`]). [`metrics`] scores the results and [`harness`] runs the
//! experiments.

// `!(x > 0.0)` checks are kept on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod decision;
pub mod dualpath;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod lm;
pub mod metrics;
pub mod prompt;
pub mod segmentation;
pub mod text;

pub use error::{Error, Result};
