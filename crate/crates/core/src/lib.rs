//! Flux sensing with single-qubit and GHZ-entangled sensors read out through
//! a stepped Kitaev phase-estimation protocol.

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod engine;
pub mod error;
pub mod fit;
pub mod model;
pub mod pea;
pub mod readout;

pub use error::{Error, Result};
