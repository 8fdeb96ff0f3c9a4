//! Exact Bayesian posteriors for small linear Gaussian networks with
//! N(0, 1) weights, used as oracles for the particle approximations.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

fn log_normal(x: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + x * x / var)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log ∫ ∏_n N(y_n; w x_n, σ²) N(w; 0, 1) dw` by the trapezoid rule on a grid.
fn grid_marginal(x: &[f64], y: &[f64], var: f64) -> f64 {
    let (lo, hi, n) = (-10.0, 10.0, 20_001);
    let dw = (hi - lo) / (n - 1) as f64;
    let terms: Vec<f64> = (0..n)
        .map(|i| {
            let w = lo + i as f64 * dw;
            let ll: f64 = x.iter().zip(y).map(|(a, b)| log_normal(b - w * a, var)).sum();
            let end = if i == 0 || i == n - 1 { 0.5f64.ln() } else { 0.0 };
            ll + log_normal(w, 1.0) + end
        })
        .collect();
    log_sum_exp(&terms) + dw.ln()
}

/// Edge marginals `P(i → j | data)` for two variables, enumerating the three
/// DAGs with an Erdős–Rényi prior of edge probability `q` and integrating
/// the single weight numerically.
pub fn grid_edge_marginals_d2(rows: &Array2<f64>, var: f64, q: f64) -> Array2<f64> {
    let x0: Vec<f64> = rows.column(0).to_vec();
    let x1: Vec<f64> = rows.column(1).to_vec();
    let root = |v: &[f64]| v.iter().map(|a| log_normal(*a, var)).sum::<f64>();
    let empty = root(&x0) + root(&x1) + (1.0 - q).ln();
    let forward = root(&x0) + grid_marginal(&x0, &x1, var) + q.ln();
    let backward = root(&x1) + grid_marginal(&x1, &x0, var) + q.ln();
    let z = log_sum_exp(&[empty, forward, backward]);
    let mut m = Array2::zeros((2, 2));
    m[[0, 1]] = (forward - z).exp();
    m[[1, 0]] = (backward - z).exp();
    m
}

/// Closed-form `log p(x_j | x_parents)` with the weights integrated out.
pub fn node_score(x: &DMatrix<f64>, j: usize, parents: &[usize], var: f64) -> f64 {
    let n = x.nrows();
    let y = x.column(j).into_owned();
    let yy = y.dot(&y);
    let k = parents.len();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    if k == 0 {
        return -0.5 * (n as f64 * (ln2pi + var.ln()) + yy / var);
    }
    let xs = DMatrix::from_fn(n, k, |r, c| x[(r, parents[c])]);
    let a = DMatrix::identity(k, k) * var + xs.transpose() * &xs;
    let chol = a.cholesky().expect("positive definite");
    let logdet_a: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let logdet = (n - k) as f64 * var.ln() + logdet_a;
    let xty: DVector<f64> = xs.transpose() * &y;
    let quad = (yy - xty.dot(&chol.solve(&xty))) / var;
    -0.5 * (n as f64 * ln2pi + logdet + quad)
}

/// MAP DAG of the exact posterior under an Erdős–Rényi prior with edge
/// probability `q`, by enumerating every digraph on up to five nodes.
pub fn exact_map_graph(rows: &Array2<f64>, var: f64, q: f64) -> Array2<u8> {
    let (n, d) = rows.dim();
    assert!(d <= 5, "enumeration is limited to five nodes");
    let x = DMatrix::from_fn(n, d, |r, c| rows[[r, c]]);
    let mut scores = vec![vec![0.0; 1 << d]; d];
    for (j, row) in scores.iter_mut().enumerate() {
        for (m, s) in row.iter_mut().enumerate() {
            if m >> j & 1 == 0 {
                let ps: Vec<usize> = (0..d).filter(|i| m >> i & 1 == 1).collect();
                *s = node_score(&x, j, &ps, var);
            }
        }
    }
    let pairs = (d * (d - 1) / 2) as f64;
    let mut best = (f64::NEG_INFINITY, None);
    for g in super::all_digraphs(d) {
        if super::has_cycle(&g) {
            continue;
        }
        let edges = g.iter().filter(|&&v| v == 1).count() as f64;
        let mut s = edges * q.ln() + (pairs - edges) * (1.0 - q).ln();
        for j in 0..d {
            let mask: usize = (0..d).filter(|&i| g[[i, j]] == 1).map(|i| 1 << i).sum();
            s += scores[j][mask];
        }
        if s > best.0 {
            best = (s, Some(g));
        }
    }
    best.1.expect("at least the empty graph")
}

/// `n` rows from the two-node chain `0 → 1` with an N(0, 1) weight and noise
/// variance 0.1.
pub fn two_node_chain_rows(seed: u64, n: usize) -> Array2<f64> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut r = super::rng(seed);
    let w: f64 = r.sample(StandardNormal);
    let sd = 0.1f64.sqrt();
    let mut rows = Array2::zeros((n, 2));
    for i in 0..n {
        let x0 = sd * r.sample::<f64, _>(StandardNormal);
        rows[[i, 0]] = x0;
        rows[[i, 1]] = w * x0 + sd * r.sample::<f64, _>(StandardNormal);
    }
    rows
}
