use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

use switching_consensus::graphs::{centering_matrix, Digraph, TopologyEnsemble};
use switching_consensus::markov::{sample_path, MarkovGenerator};

fn adjacency(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.1f64..3.0], n * n).prop_map(move |v| {
        DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { v[i * n + j] })
    })
}

// Reachability by repeated boolean matrix products.
fn reach_oracle(adj: &DMatrix<f64>) -> bool {
    let n = adj.nrows();
    let mut r = DMatrix::from_fn(n, n, |i, j| i == j || adj[(j, i)] > 0.0);
    for _ in 0..n {
        let next = DMatrix::from_fn(n, n, |i, j| (0..n).any(|k| r[(i, k)] && r[(k, j)]));
        r = next;
    }
    (0..n).any(|root| (0..n).all(|v| r[(root, v)]))
}

fn sorted_eigs(m: &DMatrix<f64>) -> Vec<f64> {
    let mut e: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| a.partial_cmp(b).unwrap());
    e
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn laplacian_matches_definition(a in adjacency(5)) {
        let g = Digraph::new(a.clone()).unwrap();
        let l = g.laplacian();
        for i in 0..5 {
            let row: f64 = (0..5).map(|j| l[(i, j)]).sum();
            prop_assert!(row.abs() < 1e-12);
            for j in 0..5 {
                if i != j {
                    prop_assert_eq!(l[(i, j)], -a[(i, j)]);
                }
            }
        }
        let in_deg = a.column_sum();
        let out_deg = a.row_sum().transpose();
        let balanced = (0..5).all(|i| (in_deg[i] - out_deg[i]).abs() < 1e-9);
        prop_assert_eq!(g.is_balanced(), balanced);
    }

    #[test]
    fn spanning_tree_matches_closure(a in adjacency(6), b in adjacency(6)) {
        let sparse = |m: &DMatrix<f64>| m.map(|w| if w > 2.0 { w } else { 0.0 });
        let (a, b) = (sparse(&a), sparse(&b));
        let e = TopologyEnsemble::new(vec![Digraph::new(a.clone()).unwrap(), Digraph::new(b.clone()).unwrap()]).unwrap();
        prop_assert_eq!(e.union_has_spanning_tree(), reach_oracle(&(a + b)));
    }

    #[test]
    fn spectral_constants_match_eigensolves(a in adjacency(4), b in adjacency(4)) {
        let e = TopologyEnsemble::new(vec![Digraph::new(a).unwrap(), Digraph::new(b).unwrap()]).unwrap();
        let l = e.laplacians()[0].clone() + &e.laplacians()[1];
        prop_assert!((e.union_laplacian() - &l).norm() < 1e-12);
        let sc = e.spectral_constants().unwrap();
        let smax = l.singular_values().max();
        prop_assert!((sc.lambda_max - smax * smax).abs() <= 1e-9 * (1.0 + smax * smax));
        let sym = sorted_eigs(&(&l + l.transpose()));
        prop_assert!((sc.lambda_min2 - sym[1]).abs() <= 1e-9 * (1.0 + sym[3].abs()));
        prop_assert!((sc.kappa - 1.0).abs() < 1e-12);
    }
}

#[test]
fn centering_matrix_is_a_projector() {
    let m = centering_matrix(5);
    assert!((&m * &m - &m).norm() < 1e-14);
    assert!((&m * DVector::from_element(5, 1.0)).norm() < 1e-14);
}

#[test]
fn invalid_graphs_rejected() {
    assert!(Digraph::new(DMatrix::zeros(2, 3)).is_err());
    assert!(Digraph::new(DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])).is_err());
    assert!(Digraph::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0])).is_err());
    let g2 = Digraph::from_edges(2, &[(0, 1)]).unwrap();
    let g3 = Digraph::from_edges(3, &[(0, 1)]).unwrap();
    assert!(TopologyEnsemble::new(vec![g2, g3]).is_err());
    assert!(TopologyEnsemble::new(vec![]).is_err());
}

fn three_state() -> MarkovGenerator {
    MarkovGenerator::new(DMatrix::from_row_slice(
        3,
        3,
        &[-3.0, 2.0, 1.0, 0.5, -1.0, 0.5, 4.0, 0.0, -4.0],
    ))
    .unwrap()
}

#[test]
fn stationary_distribution_solves_balance() {
    let g = three_state();
    let s = g.stationary_distribution().unwrap();
    let q = g.rates();
    // pi^T Q = 0 with unit mass, solved independently via the replaced-row system.
    let mut lhs = q.transpose();
    lhs.row_mut(2).fill(1.0);
    let oracle = lhs.lu().solve(&DVector::from_vec(vec![0.0, 0.0, 1.0])).unwrap();
    assert!((&s.pi - &oracle).amax() < 1e-12);
    assert_eq!(s.pi_bar, oracle.min());
}

#[test]
fn generator_validation() {
    assert!(MarkovGenerator::new(DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 1.0, -1.0])).is_err());
    assert!(MarkovGenerator::new(DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 1.0, -1.0])).is_err());
    let reducible = MarkovGenerator::new(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, 0.0])).unwrap();
    assert!(!reducible.is_ergodic());
    assert!(reducible.stationary_distribution().is_err());
}

#[test]
fn long_run_occupation_matches_pi() {
    let g = three_state();
    let pi = g.stationary_distribution().unwrap().pi;
    let path = sample_path(&g, 0, 2.0e4, 11).unwrap();
    let occ = path.occupation_times(3);
    for k in 0..3 {
        let frac = occ[k] / 2.0e4;
        assert!((frac - pi[k]).abs() < 0.02, "state {k}: {frac} vs {}", pi[k]);
    }
}

#[test]
fn holding_times_have_exit_rate_mean() {
    let g = three_state();
    let path = sample_path(&g, 0, 5.0e4, 3).unwrap();
    for k in 0..3 {
        let s = path.sojourns(k);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let expect = 1.0 / g.exit_rate(k);
        let se = expect / (s.len() as f64).sqrt();
        assert!((mean - expect).abs() < 5.0 * se, "state {k}: {mean} vs {expect}");
    }
}

#[test]
fn path_is_reproducible_and_right_continuous() {
    let g = three_state();
    let p1 = sample_path(&g, 1, 50.0, 99).unwrap();
    assert_eq!(p1, sample_path(&g, 1, 50.0, 99).unwrap());
    assert_eq!(p1.state_at(0.0), 1);
    for k in 1..p1.jump_times.len() {
        assert_eq!(p1.state_at(p1.jump_times[k]), p1.states[k]);
        assert_ne!(p1.states[k], p1.states[k - 1]);
    }
}
