//! Multi-view adaptive feature selection for click-through-rate models.
//!
//! This crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation: a small tape-based reverse-mode engine with an Adam optimizer,
//! the categorical data model and synthetic generator, embedding tables, the
//! multi-view selection controller with its ablations and an AdaFS-style
//! baseline, MLP and DeepFM backbones, the training driver, and the metrics.
//! File formats and the command-line front end live in the `mvfs` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod controller;
pub mod data;
pub mod embedding;
mod error;
pub mod metrics;
pub mod numeric;
pub mod training;

pub use error::{Error, Result};
