mod common;

use common::*;
use mobipop_core::explain::{
    brute_force_shap, expected_value, local_accuracy_error, tree_shap, tree_shap_single,
};
use mobipop_core::features::split_rows;
use mobipop_core::gbtree::{train, Ensemble, Node, SplitMethod, TrainConfig, FORMAT_VERSION};
use proptest::prelude::*;
use rand::Rng;

fn random_row(r: &mut rand_chacha::ChaCha8Rng, nf: usize) -> Vec<f64> {
    (0..nf).map(|_| r.random_range(-1.2..1.2)).collect()
}

#[test]
fn random_trees_match_subset_enumeration() {
    let mut r = rng(2024);
    for _ in 0..200 {
        let nf = r.random_range(1..=8);
        let tree = random_tree(&mut r, nf, 3);
        for _ in 0..50 {
            let x = random_row(&mut r, nf);
            let fast = tree_shap_single(&tree, &x, nf);
            let oracle = shapley_oracle(&tree, &x, nf);
            let brute = brute_force_shap(&tree, &x, nf).unwrap();
            for j in 0..nf {
                assert!(
                    (fast[j] - oracle[j]).abs() <= 1e-9,
                    "{fast:?} vs {oracle:?}"
                );
                assert!((fast[j] - brute[j]).abs() <= 1e-9, "{fast:?} vs {brute:?}");
            }
        }
    }
}

#[test]
fn unused_features_get_zero() {
    let mut r = rng(5);
    for _ in 0..50 {
        let tree = random_tree(&mut r, 3, 3);
        let x = random_row(&mut r, 6);
        let phi = tree_shap_single(&tree, &x, 6);
        assert!(phi[3..].iter().all(|&p| p == 0.0));
    }
}

#[test]
fn trained_model_local_accuracy() {
    let ds = random_dataset(11, 300, 6, 25);
    let split = split_rows(ds.n_rows(), [0.4, 0.4, 0.2], 1).unwrap();
    let cfg = TrainConfig {
        n_rounds: 60,
        max_depth: 4,
        split_method: SplitMethod::Histogram,
        ..Default::default()
    };
    let (e, _) = train(&ds, &split, &cfg).unwrap();
    let rows: Vec<usize> = (0..ds.n_rows()).collect();
    let sm = tree_shap(&e, &ds.features, &rows).unwrap();
    assert!(local_accuracy_error(&e, &sm, &ds.features, &rows).unwrap() <= 1e-6);
    for (i, &r) in rows.iter().enumerate() {
        let total = sm.base_value + sm.row(i).iter().sum::<f64>();
        assert!((total - margin(&e, ds.features.row(r))).abs() <= 1e-6);
    }
    assert!((sm.base_value - expected_value(&e)).abs() < 1e-12);
}

#[test]
fn ensemble_shap_is_the_shrunk_sum_over_trees() {
    let mut r = rng(77);
    let trees: Vec<_> = (0..5).map(|_| random_tree(&mut r, 4, 3)).collect();
    let e = Ensemble {
        format_version: FORMAT_VERSION,
        base_score: 0.7,
        learning_rate: 0.3,
        feature_names: (0..4).map(|j| column(j).name()).collect(),
        trees: trees.clone(),
    };
    let rows: Vec<f64> = (0..10).flat_map(|_| random_row(&mut r, 4)).collect();
    let ds = dataset(4, rows, vec![1.0; 10]);
    let idx: Vec<usize> = (0..10).collect();
    let sm = tree_shap(&e, &ds.features, &idx).unwrap();
    for &i in &idx {
        let x = ds.features.row(i);
        for j in 0..4 {
            let want: f64 = trees.iter().map(|t| 0.3 * shapley_oracle(t, x, 4)[j]).sum();
            assert!((sm.row(i)[j] - want).abs() < 1e-9);
        }
    }
    let ev = 0.7 + 0.3 * trees.iter().map(|t| t.expected_value()).sum::<f64>();
    assert!((sm.base_value - ev).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn efficiency_and_symmetry(seed in 0u64..100_000, nf in 1usize..7) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r, nf, 3);
        let x = random_row(&mut r, nf);
        let phi = tree_shap_single(&tree, &x, nf);
        let total = tree.expected_value() + phi.iter().sum::<f64>();
        prop_assert!((total - tree.eval(&x)).abs() < 1e-9);
        // a leaf-only tree attributes nothing
        if let [Node::Leaf { .. }] = tree.nodes[..] {
            prop_assert!(phi.iter().all(|&p| p == 0.0));
        }
    }
}
