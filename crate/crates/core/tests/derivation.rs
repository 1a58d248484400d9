mod common;

use common::{derive_oracle, randn, rng, softmax};
use proptest::prelude::*;
use rand::Rng;
use scalenas::search_space::{derive_genotype, AlphaTable, CandidateOp, CellKind, CellSpec};

fn random_table(seed: u64, nodes: usize) -> AlphaTable<f64> {
    let mut r = rng(seed);
    let scale = [1e-3, 0.1, 1.0, 5.0][r.gen_range(0..4)];
    let mut t = AlphaTable::new(CellSpec::new(nodes));
    for a in t.tensors_mut() {
        *a = randn(a.shape(), &mut r).map(|v| v * scale);
    }
    t
}

fn oracle_weights(t: &AlphaTable<f64>, kind: CellKind) -> Vec<Vec<f64>> {
    t.edges(kind).iter().map(|e| softmax(e.data())).collect()
}

#[test]
fn matches_exhaustive_oracle_on_1000_tables() {
    for seed in 0..1000 {
        let t = random_table(seed, 2);
        let g = derive_genotype(&t);
        for kind in [CellKind::Normal, CellKind::Reduction] {
            assert_eq!(g.genes(kind), derive_oracle(&oracle_weights(&t, kind), 2).as_slice(), "seed {seed} {kind:?}");
        }
    }
}

#[test]
fn matches_oracle_for_deeper_cells() {
    for seed in 0..100 {
        let nodes = 3 + (seed as usize % 3);
        let t = random_table(seed, nodes);
        let g = derive_genotype(&t);
        assert_eq!(g.genes(CellKind::Normal), derive_oracle(&oracle_weights(&t, CellKind::Normal), nodes).as_slice());
    }
}

#[test]
fn zero_dominated_edges_still_yield_a_real_op() {
    let mut t = AlphaTable::<f64>::new(CellSpec::new(2));
    let zero = CandidateOp::Zero.index();
    for a in t.tensors_mut() {
        a.data_mut()[zero] = 100.0;
    }
    let g = derive_genotype(&t);
    for kind in [CellKind::Normal, CellKind::Reduction] {
        assert!(g.genes(kind).iter().flatten().all(|gene| gene.op != CandidateOp::Zero));
    }
    g.validate().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn per_edge_translation_is_exactly_invariant(seed in any::<u64>(), shifts in prop::collection::vec(-10.0f64..10.0, 10)) {
        let t = random_table(seed, 2);
        let mut moved = t.clone();
        for (a, s) in moved.tensors_mut().iter_mut().zip(shifts.iter().cycle()) {
            *a = a.map(|v| v + s);
        }
        prop_assert_eq!(derive_genotype(&t), derive_genotype(&moved));
    }

    #[test]
    fn zero_never_selected(seed in any::<u64>(), nodes in 1usize..=4) {
        let g = derive_genotype(&random_table(seed, nodes));
        for kind in [CellKind::Normal, CellKind::Reduction] {
            prop_assert!(g.genes(kind).iter().flatten().all(|gene| gene.op != CandidateOp::Zero));
        }
        prop_assert!(g.validate().is_ok());
    }
}
