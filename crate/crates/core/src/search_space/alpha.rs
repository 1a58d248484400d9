use serde::{Deserialize, Serialize};

use super::cell::{CellKind, CellSpec};
use super::ops::CandidateOp;
use crate::tensor::{softmax_slice, Graph, Real, Tensor, Var};

/// Architecture logits: one length-K vector per edge, for the normal cell and
/// the reduction cell separately. All entries start at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaTable<T> {
    spec: CellSpec,
    tensors: Vec<Tensor<T>>,
}

/// Alpha leaves recorded on a graph.
#[derive(Clone, Debug)]
pub struct BoundAlphas {
    pub normal: Vec<Var>,
    pub reduction: Vec<Var>,
}

impl BoundAlphas {
    pub fn of(&self, kind: CellKind) -> &[Var] {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduction,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.normal.iter().chain(&self.reduction).copied()
    }
}

impl<T: Real> AlphaTable<T> {
    pub fn new(spec: CellSpec) -> Self {
        let n = 2 * spec.num_edges();
        AlphaTable {
            spec,
            tensors: vec![Tensor::zeros(&[CandidateOp::COUNT]); n],
        }
    }

    pub fn spec(&self) -> CellSpec {
        self.spec
    }

    fn offset(&self, kind: CellKind) -> usize {
        match kind {
            CellKind::Normal => 0,
            CellKind::Reduction => self.spec.num_edges(),
        }
    }

    pub fn edges(&self, kind: CellKind) -> &[Tensor<T>] {
        let o = self.offset(kind);
        &self.tensors[o..o + self.spec.num_edges()]
    }

    pub fn edge_mut(&mut self, kind: CellKind, edge: usize) -> &mut Tensor<T> {
        let o = self.offset(kind);
        &mut self.tensors[o + edge]
    }

    /// Normal edges followed by reduction edges.
    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Softmax-normalized operation weights for every edge of `kind`.
    pub fn weights(&self, kind: CellKind) -> Vec<Vec<f64>> {
        self.edges(kind)
            .iter()
            .map(|t| {
                let raw: Vec<f64> = t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
                softmax_slice(&raw)
            })
            .collect()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundAlphas {
        let vars: Vec<Var> = self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        let e = self.spec.num_edges();
        BoundAlphas {
            normal: vars[..e].to_vec(),
            reduction: vars[e..].to_vec(),
        }
    }

    pub fn snapshot(&self, epoch: usize) -> AlphaSnapshot {
        AlphaSnapshot {
            epoch,
            nodes: self.spec.nodes,
            ops: CandidateOp::ALL.iter().map(|o| o.name().to_string()).collect(),
            normal: self.weights(CellKind::Normal),
            reduction: self.weights(CellKind::Reduction),
        }
    }
}

/// Softmax-normalized alphas at the end of an epoch, as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSnapshot {
    pub epoch: usize,
    pub nodes: usize,
    pub ops: Vec<String>,
    pub normal: Vec<Vec<f64>>,
    pub reduction: Vec<Vec<f64>>,
}
