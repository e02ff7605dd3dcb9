//! Problem generation, single solves and benchmark sweeps on top of
//! `otn-core`, shared by the `otn` binary and its tests.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diagnostics;
pub mod stats;
pub mod sweep;
