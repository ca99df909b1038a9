#![no_std]
extern crate alloc;

pub mod autograd;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod mie;
pub mod model;
pub mod morphology;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
