use serde::{Deserialize, Serialize};

use super::genotype::NodeGenes;
use super::ops::{CandidateOp, OpModule};
use crate::error::{arg_err, shape_err, Result};
use crate::flops;
use crate::nn::{Builder, Chw, ForwardCtx, ParamId};
use crate::tensor::{Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Normal,
    Reduction,
}

/// Topology of a cell with `nodes` intermediate nodes. Node `j` reads from
/// the two cell inputs (sources 0 and 1) and every earlier node (source
/// `2 + i`), so there are `2N + N(N-1)/2` edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub nodes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub node: usize,
    pub source: usize,
}

impl CellSpec {
    pub fn new(nodes: usize) -> Self {
        CellSpec { nodes }
    }

    pub fn num_edges(&self) -> usize {
        2 * self.nodes + self.nodes * (self.nodes.saturating_sub(1)) / 2
    }

    /// Edges in storage order: grouped by node, then by source.
    pub fn edges(&self) -> Vec<Edge> {
        (0..self.nodes)
            .flat_map(|node| (0..node + 2).map(move |source| Edge { node, source }))
            .collect()
    }

    pub fn edge_index(&self, node: usize, source: usize) -> usize {
        debug_assert!(source < node + 2);
        (0..node).map(|j| j + 2).sum::<usize>() + source
    }

    /// Edges leaving a cell input of a reduction cell halve the resolution.
    pub fn stride(kind: CellKind, source: usize) -> usize {
        if kind == CellKind::Reduction && source < 2 {
            2
        } else {
            1
        }
    }
}

/// All candidate operations on one edge, blended by softmax(alpha).
#[derive(Clone, Debug)]
pub struct MixedOp {
    pub ops: Vec<OpModule>,
}

impl MixedOp {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, channels: usize, stride: usize) -> Self {
        let ops = CandidateOp::ALL.iter().map(|op| op.build(b, channels, stride, true)).collect();
        MixedOp { ops }
    }

    /// `Σ_k softmax(alpha)_k · o_k(x)`; the zero op contributes nothing to
    /// the sum but still takes part in the normalization.
    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var, alpha: Var) -> Result<Var> {
        let weights = ctx.g.softmax(alpha)?;
        let mut outs = Vec::with_capacity(self.ops.len());
        let mut slots = Vec::with_capacity(self.ops.len());
        for (k, op) in self.ops.iter().enumerate() {
            if op.is_zero() {
                continue;
            }
            outs.push(op.forward(ctx, x)?);
            slots.push(k);
        }
        ctx.g.weighted_sum(&outs, weights, &slots)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.ops.iter().flat_map(OpModule::params).collect()
    }
}

fn check_inputs<T: Real>(ctx: &ForwardCtx<'_, T>, s0: Var, s1: Var, channels: usize) -> Result<()> {
    let (a, b) = (ctx.g.shape(s0), ctx.g.shape(s1));
    if a != b {
        return Err(arg_err(format!("cell inputs differ in shape: {a:?} vs {b:?}")));
    }
    if a.len() != 4 || a[1] != channels {
        return Err(shape_err(format!("cell expects [N, {channels}, H, W], got {a:?}")));
    }
    Ok(())
}

/// Search-time cell: every edge is a [`MixedOp`].
#[derive(Clone, Debug)]
pub struct RelaxedCell {
    pub spec: CellSpec,
    pub kind: CellKind,
    pub channels: usize,
    pub edges: Vec<MixedOp>,
}

impl RelaxedCell {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, spec: CellSpec, kind: CellKind, channels: usize) -> Self {
        let edges = spec
            .edges()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                b.push(format!("edge{i}"));
                let m = MixedOp::build(b, channels, CellSpec::stride(kind, e.source));
                b.pop();
                m
            })
            .collect();
        RelaxedCell {
            spec,
            kind,
            channels,
            edges,
        }
    }

    /// Output is the channel concatenation of the intermediate nodes.
    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, s0: Var, s1: Var, alphas: &[Var]) -> Result<Var> {
        check_inputs(ctx, s0, s1, self.channels)?;
        if alphas.len() != self.edges.len() {
            return Err(shape_err(format!(
                "{} alpha vectors for {} edges",
                alphas.len(),
                self.edges.len()
            )));
        }
        let mut states = vec![s0, s1];
        for node in 0..self.spec.nodes {
            let mut acc: Option<Var> = None;
            for source in 0..node + 2 {
                let e = self.spec.edge_index(node, source);
                let y = self.edges[e].forward(ctx, states[source], alphas[e])?;
                acc = Some(match acc {
                    Some(a) => ctx.g.add(a, y)?,
                    None => y,
                });
            }
            states.push(acc.expect("every node has at least two inputs"));
        }
        ctx.g.concat_channels(&states[2..])
    }

    /// Keeps only the chosen operation on each selected edge, sharing the
    /// parameters of this cell.
    pub fn discretize(&self, genes: &[NodeGenes]) -> Result<DiscreteCell> {
        if genes.len() != self.spec.nodes {
            return Err(shape_err(format!("{} node genes for a {}-node cell", genes.len(), self.spec.nodes)));
        }
        let nodes = genes
            .iter()
            .enumerate()
            .map(|(j, pair)| {
                (*pair).map(|g| {
                    let e = self.spec.edge_index(j, g.source);
                    (g.source, self.edges[e].ops[g.op.index()].clone())
                })
            })
            .collect();
        Ok(DiscreteCell {
            spec: self.spec,
            kind: self.kind,
            channels: self.channels,
            genes: genes.to_vec(),
            nodes,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.edges.iter().flat_map(MixedOp::params).collect()
    }
}

/// Evaluation-time cell: each node sums two chosen operations.
#[derive(Clone, Debug)]
pub struct DiscreteCell {
    pub spec: CellSpec,
    pub kind: CellKind,
    pub channels: usize,
    pub genes: Vec<NodeGenes>,
    nodes: Vec<[(usize, OpModule); 2]>,
}

impl DiscreteCell {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, genes: &[NodeGenes], kind: CellKind, channels: usize) -> Self {
        let spec = CellSpec::new(genes.len());
        let nodes = genes
            .iter()
            .enumerate()
            .map(|(j, pair)| {
                let mut slot = 0;
                (*pair).map(|g| {
                    b.push(format!("node{j}.{slot}"));
                    slot += 1;
                    let m = g.op.build(b, channels, CellSpec::stride(kind, g.source), false);
                    b.pop();
                    (g.source, m)
                })
            })
            .collect();
        DiscreteCell {
            spec,
            kind,
            channels,
            genes: genes.to_vec(),
            nodes,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, s0: Var, s1: Var) -> Result<Var> {
        check_inputs(ctx, s0, s1, self.channels)?;
        let mut states = vec![s0, s1];
        for pair in &self.nodes {
            let a = pair[0].1.forward(ctx, states[pair[0].0])?;
            let b = pair[1].1.forward(ctx, states[pair[1].0])?;
            let y = ctx.g.add(a, b)?;
            states.push(y);
        }
        ctx.g.concat_channels(&states[2..])
    }

    /// Closed-form per-sample cost and output shape given the input shape.
    pub fn cost(&self, input: Chw) -> Result<(u64, Chw)> {
        let mut shapes = vec![input, input];
        let mut total = 0;
        for pair in &self.nodes {
            let (ma, sa) = pair[0].1.cost(shapes[pair[0].0])?;
            let (mb, sb) = pair[1].1.cost(shapes[pair[1].0])?;
            if sa != sb {
                return Err(shape_err(format!("node inputs disagree: {sa:?} vs {sb:?}")));
            }
            total += ma + mb + flops::elementwise(sa);
            shapes.push(sa);
        }
        let [_, h, w] = shapes[2];
        Ok((total, [self.channels * self.spec.nodes, h, w]))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.nodes.iter().flat_map(|p| p.iter().flat_map(|(_, m)| m.params())).collect()
    }
}
