//! Satellite-to-ground decoy-state BB84 link simulation.
//!
//! The pipeline runs from a pass geometry and link budget to a loss profile,
//! then through the receiver model (analytic or Monte Carlo), clock recovery,
//! sifting and parameter estimation to a secret-key rate per time slice.

// `!(x > 0.0)` style checks also reject NaN, which is the intent.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod csvfmt;
pub mod error;
pub mod link;
pub mod postprocessing;
pub mod protocol;
pub mod receiver;
pub mod run;
pub mod scenario;
pub mod sync;

pub use error::{Error, Result};
