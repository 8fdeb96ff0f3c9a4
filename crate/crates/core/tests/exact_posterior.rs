mod common;

use common::exact::{exact_map_graph, grid_edge_marginals_d2, node_score, two_node_chain_rows};
use ndarray::array;
use rand::Rng;

#[test]
fn grid_oracle_agrees_with_closed_form() {
    for seed in 0..8 {
        let rows = two_node_chain_rows(seed, 20);
        let grid = grid_edge_marginals_d2(&rows, 0.1, 0.5);
        let x = nalgebra::DMatrix::from_fn(20, 2, |r, c| rows[[r, c]]);
        let s = |j, p: &[usize]| node_score(&x, j, p, 0.1);
        let (e, f, b) = (s(0, &[]) + s(1, &[]), s(0, &[]) + s(1, &[0]), s(1, &[]) + s(0, &[1]));
        let m = e.max(f).max(b);
        let z = (e - m).exp() + (f - m).exp() + (b - m).exp();
        assert!((grid[[0, 1]] - (f - m).exp() / z).abs() < 1e-6);
        assert!((grid[[1, 0]] - (b - m).exp() / z).abs() < 1e-6);
    }
}

#[test]
fn grid_marginals_are_a_distribution() {
    let rows = two_node_chain_rows(3, 20);
    let m = grid_edge_marginals_d2(&rows, 0.1, 0.5);
    assert!(m[[0, 1]] > 0.0 && m[[1, 0]] > 0.0 && m[[0, 1]] + m[[1, 0]] < 1.0);
    assert_eq!(m[[0, 0]], 0.0);
}

#[test]
fn exact_map_finds_a_strong_chain() {
    let mut r = common::rng(0);
    let noise = rand_distr::Normal::new(0.0, 0.1f64.sqrt()).unwrap();
    let mut rows = ndarray::Array2::zeros((200, 2));
    for n in 0..200 {
        let x0: f64 = r.sample(noise);
        rows[[n, 0]] = x0;
        rows[[n, 1]] = 3.0 * x0 + r.sample(noise);
    }
    assert_eq!(exact_map_graph(&rows, 0.1, 0.5), array![[0u8, 1], [0, 0]]);
}
