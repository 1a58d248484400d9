//! Candidate operations, the continuous relaxation over them, cell DAGs and
//! discrete genotypes.

mod alpha;
mod cell;
mod genotype;
mod ops;

pub use alpha::{AlphaSnapshot, AlphaTable, BoundAlphas};
pub use cell::{CellKind, CellSpec, DiscreteCell, Edge, MixedOp, RelaxedCell};
pub use genotype::{derive_genotype, Gene, Genotype, NodeGenes, GENOTYPE_VERSION};
pub use ops::{CandidateOp, OpModule};
