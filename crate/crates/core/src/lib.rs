#![allow(clippy::needless_range_loop)] // index loops are the house style for the numeric kernels

//! Multi-branch low-rank adaptation of a small decoder-only transformer,
//! with semantic-relevant layer probing, contrastive training of the shared
//! down-projection, switch/router branch control, and the evaluation and
//! analysis machinery around it.
//!
//! Everything runs on a self-contained f64 autodiff substrate ([`tensor`]),
//! at sizes where gradient checks and brute-force oracles are cheap.

pub mod adapter;
pub mod checkpoint;
pub mod contrastive;
pub mod corpus;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod probe;
pub mod switch;
pub mod tensor;

pub use error::{Error, Result};
