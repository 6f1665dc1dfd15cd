//! Multimodal contrastive training for function-level vulnerability
//! detection: a reverse-mode autodiff core, dual transformer encoders,
//! dual-view CLIP alignment with consistency regularization, and code-only
//! inference.
//!
//! `no_std` with `alloc`. File formats, HTTP and the command line live in the
//! `multivul` crate.

#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod augment;
pub mod commenter;
pub mod corpus;
pub mod diff;
pub mod error;
pub mod evaluate;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
