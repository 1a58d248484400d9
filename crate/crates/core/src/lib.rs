pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod flops;
pub mod manifest;
pub mod net;
pub mod nn;
pub mod rng;
pub mod run;
pub mod search;
pub mod search_space;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
