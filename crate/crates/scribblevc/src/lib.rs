//! File formats, the training driver, experiment grids, reports and the
//! command-line front end for the dual-branch scribble segmenter in
//! `scribblevc-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod fit;
pub mod manifest;
pub mod png;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
