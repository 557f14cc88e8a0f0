//! File formats, run files and the `mvfs` command line on top of `mvfs-core`.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod runspec;
pub mod scenarios;
pub mod tsv;

pub use error::{Error, Result};
