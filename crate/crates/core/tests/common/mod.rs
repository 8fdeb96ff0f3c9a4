#![allow(dead_code)]

pub mod exact;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

/// Panics with context when the analytic gradient disagrees with central differences.
pub fn assert_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], tol: f64, what: &str) {
    let numeric = numeric_grad(f, x, 1e-5);
    let err = relative_error(analytic, &numeric, 1e-6);
    assert!(
        err < tol,
        "{what}: relative error {err:.3e} exceeds {tol:.0e}\nanalytic {analytic:?}\nnumeric  {numeric:?}"
    );
}

/// Every binary off-diagonal digraph on `d` nodes.
pub fn all_digraphs(d: usize) -> Vec<ndarray::Array2<u8>> {
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    (0..1u64 << pairs.len())
        .map(|code| {
            let mut g = ndarray::Array2::zeros((d, d));
            for (b, &(i, j)) in pairs.iter().enumerate() {
                if code >> b & 1 == 1 {
                    g[[i, j]] = 1;
                }
            }
            g
        })
        .collect()
}

/// Depth-first cycle detection, independent of the library's ordering code.
pub fn has_cycle(g: &ndarray::Array2<u8>) -> bool {
    fn visit(g: &ndarray::Array2<u8>, v: usize, state: &mut [u8]) -> bool {
        state[v] = 1;
        for w in 0..g.ncols() {
            if g[[v, w]] == 1 {
                if state[w] == 1 || (state[w] == 0 && visit(g, w, state)) {
                    return true;
                }
            }
        }
        state[v] = 2;
        false
    }
    let mut state = vec![0u8; g.nrows()];
    (0..g.nrows()).any(|v| state[v] == 0 && visit(g, v, &mut state))
}

/// Small-scale inference settings: a slower temperature schedule and a
/// larger step size than the library defaults, so short runs still mix.
pub fn desk_config(components: usize, particles: usize, steps: usize) -> causalmix::mixture::InferenceConfig {
    let mut c = causalmix::mixture::InferenceConfig::default();
    c.num_components = components;
    c.num_particles = particles;
    c.schedules.omega_slope = 0.005;
    c.schedules.learning_rate = 0.05;
    c.schedules.total_steps = steps;
    c.structure_prior = causalmix::mixture::PriorConfig::ErdosRenyi { edges_per_node: 1.0 };
    c
}

/// Fraction of retained particles whose hard graph contains each edge.
pub fn edge_marginals(graphs: &[ndarray::Array2<u8>]) -> ndarray::Array2<f64> {
    let d = graphs[0].nrows();
    let mut m = ndarray::Array2::zeros((d, d));
    for g in graphs {
        m += &g.mapv(f64::from);
    }
    m / graphs.len() as f64
}
