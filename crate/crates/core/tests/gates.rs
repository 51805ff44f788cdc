use proptest::prelude::*;
use rand::Rng;
use tmoe::gates::{leaf_probabilities, routing_prob, softmax_gate, GateWeights, SoftmaxGate, TreeGate};
use tmoe::params::{seeded_rng, ParamStore};

fn randomize(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = seeded_rng(seed);
    for id in store.ids().collect::<Vec<_>>() {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}

fn tree(depth: usize, dim: usize, seed: u64) -> (ParamStore, TreeGate) {
    let mut store = ParamStore::new();
    let g = TreeGate::build(&mut store, "t", depth, dim, &mut seeded_rng(seed)).unwrap();
    randomize(&mut store, 2.0, seed + 1);
    (store, g)
}

/// Product of routing probabilities along each root-to-leaf path, with the
/// path read from the bits of the leaf index (0 = left, most significant
/// bit at the root).
fn path_oracle(x: &[f64], w: &[f64], b: &[f64], depth: usize) -> Vec<f64> {
    let dim = x.len();
    let d = |n: usize| {
        let z: f64 = (0..dim).map(|j| w[n * dim + j] * x[j]).sum::<f64>() + b[n];
        1.0 / (1.0 + (-z).exp())
    };
    (0..1usize << depth)
        .map(|leaf| {
            let mut node = 0;
            let mut p = 1.0;
            for level in (0..depth).rev() {
                if (leaf >> level) & 1 == 0 {
                    p *= d(node);
                    node = 2 * node + 1;
                } else {
                    p *= 1.0 - d(node);
                    node = 2 * node + 2;
                }
            }
            p
        })
        .collect()
}

#[test]
fn tree_gate_matches_path_enumeration() {
    for depth in 1..=4 {
        let (store, g) = tree(depth, 3, depth as u64);
        let w = store.get(g.weight).data().to_vec();
        let b = store.get(g.bias).data().to_vec();
        let mut rng = seeded_rng(100 + depth as u64);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let got = leaf_probabilities(&x, &g, &store).unwrap();
            let want = path_oracle(&x, &w, &b, depth);
            assert_eq!(got.len(), 1 << depth);
            let sum: f64 = got.as_slice().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "depth {depth}: sum {sum}");
            for (a, o) in got.as_slice().iter().zip(&want) {
                assert!((a - o).abs() < 1e-12, "depth {depth}: {a} vs {o}");
            }
        }
    }
}

#[test]
fn softmax_gate_on_simplex() {
    for experts in [1, 2, 5, 16] {
        let mut store = ParamStore::new();
        let g = SoftmaxGate::build(&mut store, "s", experts, 4, &mut seeded_rng(7)).unwrap();
        randomize(&mut store, 3.0, experts as u64);
        let mut rng = seeded_rng(experts as u64 + 50);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let p = softmax_gate(&x, &g, &store).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(p.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn depth_one_tree_is_routing_pair() {
    let (store, g) = tree(1, 2, 9);
    let x = [0.4, -1.1];
    let w = store.get(g.weight).data();
    let b = store.get(g.bias).data()[0];
    let d = routing_prob(&x, w, b).unwrap();
    let p = leaf_probabilities(&x, &g, &store).unwrap();
    assert_eq!(p.as_slice(), &[d, 1.0 - d]);
}

#[test]
fn zero_parameters_give_uniform_leaves() {
    let mut store = ParamStore::new();
    let g = TreeGate::build(&mut store, "t", 3, 2, &mut seeded_rng(0)).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let p = leaf_probabilities(&[1.0, 2.0], &g, &store).unwrap();
    assert!(p.as_slice().iter().all(|&v| v == 0.125));
}

#[test]
fn saturated_root_zeroes_a_subtree() {
    let (mut store, g) = tree(2, 1, 4);
    store.get_mut(g.weight).data_mut()[0] = 0.0;
    store.get_mut(g.bias).data_mut()[0] = 1000.0;
    let p = leaf_probabilities(&[0.3], &g, &store).unwrap();
    assert_eq!(p.as_slice()[2], 0.0);
    assert_eq!(p.as_slice()[3], 0.0);
    assert!((p.as_slice()[0] + p.as_slice()[1] - 1.0).abs() < 1e-15);
}

#[test]
fn input_dimension_checked() {
    let (store, g) = tree(2, 3, 1);
    assert!(leaf_probabilities(&[1.0, 2.0], &g, &store).is_err());
    assert!(routing_prob(&[1.0], &[1.0, 2.0], 0.0).is_err());
}

#[test]
fn gate_weights_validation() {
    assert!(GateWeights::new(vec![0.5, 0.5]).is_ok());
    assert!(GateWeights::new(vec![0.5, 0.6]).is_err());
    assert!(GateWeights::new(vec![1.5, -0.5]).is_err());
    assert!(GateWeights::new(vec![]).is_err());
    let g = GateWeights::new(vec![0.25, 0.5, 0.25]).unwrap();
    assert_eq!(g.argmax(), 1);
    assert_eq!(GateWeights::uniform(4).unwrap().argmax(), 0);
}

#[test]
fn deep_tree_uses_log_space_without_underflow_errors() {
    let (store, g) = tree(10, 2, 5);
    let p = leaf_probabilities(&[2.0, -2.0], &g, &store).unwrap();
    let sum: f64 = p.as_slice().iter().sum();
    assert!((sum - 1.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tree_leaves_sum_to_one(depth in 1usize..=6, seed in 0u64..1000, x in prop::collection::vec(-10.0f64..10.0, 3)) {
        let (store, g) = tree(depth, 3, seed);
        let p = leaf_probabilities(&x, &g, &store).unwrap();
        let sum: f64 = p.as_slice().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(p.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn subtree_mass_equals_reach_probability(seed in 0u64..1000, x in prop::collection::vec(-4.0f64..4.0, 2)) {
        let (store, g) = tree(3, 2, seed);
        let p = leaf_probabilities(&x, &g, &store).unwrap();
        let w = store.get(g.weight).data();
        let b = store.get(g.bias).data();
        let root = routing_prob(&x, &w[0..2], b[0]).unwrap();
        let left: f64 = p.as_slice()[..4].iter().sum();
        prop_assert!((left - root).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let mut store = ParamStore::new();
        let g = SoftmaxGate::build(&mut store, "s", 6, 2, &mut seeded_rng(seed)).unwrap();
        let x = [0.7, -0.2];
        let before = softmax_gate(&x, &g, &store).unwrap();
        store.get_mut(g.bias).data_mut().iter_mut().for_each(|v| *v += shift);
        let after = softmax_gate(&x, &g, &store).unwrap();
        for (a, b) in before.as_slice().iter().zip(after.as_slice()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
