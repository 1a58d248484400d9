//! Closed-form cost accounting.
//!
//! One multiply-accumulate counts as one FLOP. Convolutions cost
//! `k²·Cin·Cout·Hout·Wout / groups`, dense layers `F·C`; normalization,
//! activations, additions and global pooling cost one op per element, and
//! window pooling `k²` per output element (padded taps included).

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::net::Network;
use crate::nn::{Chw, ParamStore};
use crate::tensor::{out_extent, PoolGeom, Real};

pub fn conv_macs(kernel: usize, cin: usize, cout: usize, oh: usize, ow: usize, groups: usize) -> u64 {
    (kernel * kernel * cin * cout * oh * ow / groups) as u64
}

pub fn elementwise([c, h, w]: Chw) -> u64 {
    (c * h * w) as u64
}

pub fn dense_macs(features: usize, classes: usize) -> u64 {
    (features * classes) as u64
}

pub fn pool([c, h, w]: Chw, geom: PoolGeom) -> Result<(u64, Chw)> {
    let oh = out_extent(h, geom.kernel, geom.stride, geom.padding, 1)?;
    let ow = out_extent(w, geom.kernel, geom.stride, geom.padding, 1)?;
    Ok(((geom.kernel * geom.kernel * c * oh * ow) as u64, [c, oh, ow]))
}

/// Cumulative cost of reaching one exit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitCost {
    pub exit_index: usize,
    pub layer: usize,
    pub macs: u64,
    pub mflops: f64,
    pub params: usize,
}

/// Per-exit cumulative cost: the stem, every layer up to the exit's layer and
/// the heads of this and all shallower exits (anytime evaluation runs them
/// all). Errors for relaxed networks.
pub fn count_flops<T: Real>(net: &Network, store: &ParamStore<T>) -> Result<Vec<ExitCost>> {
    let costs = net.component_costs()?;
    let mut macs = costs.stem;
    let mut params = store.count_of(&net.stem_params());
    let mut built = 1;
    let mut out = Vec::new();
    for (e, layer) in net.exit_layers().into_iter().enumerate() {
        while built < layer {
            built += 1;
            macs += costs.layers[built - 2];
            params += store.count_of(&net.layer_params(built));
        }
        macs += costs.heads[e];
        params += store.count_of(&net.head_params(e));
        out.push(ExitCost {
            exit_index: e,
            layer,
            macs,
            mflops: macs as f64 / 1e6,
            params,
        });
    }
    Ok(out)
}

pub fn costs_to_json(costs: &[ExitCost]) -> Result<String> {
    Ok(serde_json::to_string_pretty(costs)?)
}
