use serde::{Deserialize, Serialize};

use super::alpha::AlphaTable;
use super::cell::{CellKind, CellSpec};
use super::ops::CandidateOp;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const GENOTYPE_VERSION: u32 = 1;

/// One retained edge: an input source and the operation applied to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Gene {
    pub source: usize,
    pub op: CandidateOp,
}

/// The two retained edges of one intermediate node, ordered by source.
pub type NodeGenes = [Gene; 2];

/// A discrete architecture: two genes per node for each cell kind.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub version: u32,
    pub normal: Vec<NodeGenes>,
    pub reduction: Vec<NodeGenes>,
}

impl Genotype {
    pub fn new(normal: Vec<NodeGenes>, reduction: Vec<NodeGenes>) -> Result<Self> {
        let g = Genotype {
            version: GENOTYPE_VERSION,
            normal,
            reduction,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn nodes(&self) -> usize {
        self.normal.len()
    }

    pub fn genes(&self, kind: CellKind) -> &[NodeGenes] {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.normal.is_empty() || self.normal.len() != self.reduction.len() {
            return Err(Error::Validation(format!(
                "genotype needs the same nonzero node count for both cells, got {} and {}",
                self.normal.len(),
                self.reduction.len()
            )));
        }
        for (kind, cell) in [("normal", &self.normal), ("reduction", &self.reduction)] {
            for (j, pair) in cell.iter().enumerate() {
                for g in pair {
                    if g.source >= j + 2 {
                        return Err(Error::Validation(format!(
                            "{kind} node {j} reads from source {} which is not yet computed",
                            g.source
                        )));
                    }
                    if g.op == CandidateOp::Zero {
                        return Err(Error::Validation(format!("{kind} node {j} keeps a zero edge")));
                    }
                }
                if pair[0].source >= pair[1].source {
                    return Err(Error::Validation(format!(
                        "{kind} node {j} needs two distinct sources in increasing order"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Validation("genotype has no integer `version` field".into()))?;
        if found != u64::from(GENOTYPE_VERSION) {
            return Err(Error::SchemaVersion {
                artifact: "genotype",
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: GENOTYPE_VERSION,
            });
        }
        let g: Genotype = serde_json::from_value(value)?;
        g.validate()?;
        Ok(g)
    }
}

/// Picks, for every node, the two incoming edges whose strongest non-zero
/// operation weighs the most, and keeps that operation on each. Ties go to
/// the lower operation index, then to the lower source.
pub fn derive_genotype<T: Real>(alphas: &AlphaTable<T>) -> Genotype {
    let spec = alphas.spec();
    let cell = |kind| derive_cell(spec, &alphas.weights(kind));
    Genotype {
        version: GENOTYPE_VERSION,
        normal: cell(CellKind::Normal),
        reduction: cell(CellKind::Reduction),
    }
}

fn derive_cell(spec: CellSpec, weights: &[Vec<f64>]) -> Vec<NodeGenes> {
    let zero = CandidateOp::Zero.index();
    (0..spec.nodes)
        .map(|node| {
            let mut best: Vec<(f64, usize, usize)> = (0..node + 2)
                .map(|source| {
                    let w = &weights[spec.edge_index(node, source)];
                    let (k, wk) = w
                        .iter()
                        .enumerate()
                        .filter(|&(k, _)| k != zero)
                        .fold((usize::MAX, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
                    (wk, k, source)
                })
                .collect();
            // Stable sort keeps lower sources first among equal strengths.
            best.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut pair = [best[0], best[1]].map(|(_, k, source)| Gene {
                source,
                op: CandidateOp::from_index(k).expect("op index in range"),
            });
            pair.sort_by_key(|g| g.source);
            pair
        })
        .collect()
}
