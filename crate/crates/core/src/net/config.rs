use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Chw;

/// Shape of a multi-scale network. Layer indices are 1-based: layer 1 is the
/// stem that produces every scale, cells start at layer 2.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub layers: usize,
    pub scales: usize,
    pub init_channels: usize,
    pub nodes: usize,
    /// Layers carrying an early-exit classifier; the last one must be `layers`.
    pub classifier_layers: Vec<usize>,
    pub reduction_layers: Vec<usize>,
    pub num_classes: usize,
    pub in_channels: usize,
    pub input_size: usize,
}

fn invalid(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: format!("network.{field}"),
        msg: msg.into(),
    }
}

impl NetworkConfig {
    /// Reductions at `⌊L/3⌋+1` and `⌊2L/3⌋+1`, dropping any that fall on the
    /// stem or beyond the last layer.
    pub fn default_reductions(layers: usize) -> Vec<usize> {
        let mut r: Vec<usize> = [layers / 3 + 1, 2 * layers / 3 + 1]
            .into_iter()
            .filter(|&l| (2..=layers).contains(&l))
            .collect();
        r.dedup();
        r
    }

    /// Exits on every layer except the stem.
    pub fn all_exits(layers: usize) -> Vec<usize> {
        (2..=layers).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(invalid("layers", format!("must be at least 2, got {}", self.layers)));
        }
        if !(1..=3).contains(&self.scales) {
            return Err(invalid("scales", format!("must be 1, 2 or 3, got {}", self.scales)));
        }
        for (field, v) in [
            ("init_channels", self.init_channels),
            ("nodes", self.nodes),
            ("in_channels", self.in_channels),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if self.num_classes < 2 {
            return Err(invalid("num_classes", format!("must be at least 2, got {}", self.num_classes)));
        }
        for (field, set) in [
            ("classifier_layers", &self.classifier_layers),
            ("reduction_layers", &self.reduction_layers),
        ] {
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid(field, format!("must be strictly increasing, got {set:?}")));
            }
            if let Some(&bad) = set.iter().find(|&&l| !(2..=self.layers).contains(&l)) {
                return Err(invalid(field, format!("layer {bad} outside 2..={}", self.layers)));
            }
        }
        match self.classifier_layers.last() {
            None => return Err(invalid("classifier_layers", "at least one classifier is required")),
            Some(&last) if last != self.layers => {
                return Err(invalid(
                    "classifier_layers",
                    format!("the deepest classifier must sit on layer {}, got {last}", self.layers),
                ))
            }
            _ => {}
        }
        let levels = self.scales - 1 + self.reduction_layers.len();
        let div = 1usize << levels;
        if self.input_size < div || !self.input_size.is_multiple_of(div) {
            return Err(invalid(
                "input_size",
                format!(
                    "{} is not divisible by 2^{levels} ({} scales, {} reductions)",
                    self.input_size,
                    self.scales,
                    self.reduction_layers.len()
                ),
            ));
        }
        Ok(())
    }

    /// Number of reduction layers at or before `layer`.
    pub fn reductions_through(&self, layer: usize) -> usize {
        self.reduction_layers.iter().filter(|&&r| r <= layer).count()
    }

    pub fn is_reduction(&self, layer: usize) -> bool {
        self.reduction_layers.contains(&layer)
    }

    /// Channel width the cells of `layer` at `scale` operate on.
    pub fn cell_width(&self, layer: usize, scale: usize) -> usize {
        self.init_channels << (scale + self.reductions_through(layer))
    }

    /// Analytic extents of every feature map: `[layer-1][scale]`.
    pub fn grid_shapes(&self) -> Vec<Vec<Chw>> {
        (1..=self.layers)
            .map(|layer| {
                (0..self.scales)
                    .map(|s| {
                        let side = self.input_size >> (s + self.reductions_through(layer));
                        let c = if layer == 1 {
                            self.init_channels << s
                        } else {
                            self.nodes * self.cell_width(layer, s)
                        };
                        [c, side, side]
                    })
                    .collect()
            })
            .collect()
    }

    pub fn num_exits(&self) -> usize {
        self.classifier_layers.len()
    }
}
