//! The multi-scale, early-exit network built from searchable cells.

mod config;
mod network;

pub use config::NetworkConfig;
pub use network::{Arch, ComponentCosts, NetOutput, Network};
