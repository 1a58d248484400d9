mod common;

use common::{mixed_case, mixed_output, randn, rng, single_output};
use proptest::prelude::*;
use scalenas::search_space::{AlphaTable, CandidateOp, CellKind, CellSpec};
use scalenas::tensor::Graph;

fn geometry() -> impl Strategy<Value = (u64, usize, usize, usize, usize)> {
    (any::<u64>(), 2usize..=3, prop::sample::select(vec![2usize, 4]), 1usize..=2, 1usize..=2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn edge_weights_sum_to_one(seed in any::<u64>(), nodes in 1usize..=4, scale in 0.01f64..20.0) {
        let mut table = AlphaTable::<f64>::new(CellSpec::new(nodes));
        let mut r = rng(seed);
        for t in table.tensors_mut() {
            *t = randn(t.shape(), &mut r).map(|v| v * scale);
        }
        for kind in [CellKind::Normal, CellKind::Reduction] {
            for w in table.weights(kind) {
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(w.iter().all(|&p| p >= 0.0));
            }
        }
        let mut g = Graph::new();
        let a = g.constant(table.tensors()[0].clone());
        let s = g.softmax(a).unwrap();
        prop_assert!((g.value(s).sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn translation_leaves_output_unchanged((seed, c, side, stride, n) in geometry(), shift in -50.0f64..50.0) {
        let case = mixed_case(seed, c, side, stride, n);
        let alpha = randn(&[CandidateOp::COUNT], &mut rng(seed ^ 1)).into_vec();
        let moved: Vec<f64> = alpha.iter().map(|a| a + shift).collect();
        let diff = mixed_output(&case, &alpha).max_abs_diff(&mixed_output(&case, &moved));
        prop_assert!(diff < 1e-6, "diff {}", diff);
    }

    #[test]
    fn one_hot_limit_is_the_single_op((seed, c, side, stride, n) in geometry(), k in 0usize..CandidateOp::COUNT) {
        let case = mixed_case(seed, c, side, stride, n);
        let mut alpha = vec![0.0; CandidateOp::COUNT];
        alpha[k] = 60.0;
        let got = mixed_output(&case, &alpha);
        let want = single_output(&case, k);
        prop_assert_eq!(got.shape(), want.shape());
        let diff = got.max_abs_diff(&want);
        prop_assert!(diff < 1e-6, "op {} diff {}", CandidateOp::ALL[k], diff);
    }
}
