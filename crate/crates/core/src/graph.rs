//! Latent graph embeddings and the soft-graph relaxation built on them.
//!
//! An embedding `Z = [U, V]` with `U, V` of shape `ℓ × d` induces edge
//! probabilities `G_ω(Z)_ij = σ(ω · U_{·i} · V_{·j})`. Graph sampling, the
//! acyclicity penalty and the structure priors all act on that soft graph.
//! Hard constraints are applied when the soft graph is built, so pinned
//! entries are exactly 0 or 1 and carry no gradient.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary adjacency matrix; `adj[[i, j]] == 1` encodes the edge `i -> j`.
pub type Adjacency = Array2<u8>;

/// Values of `h` below this are treated as acyclic.
pub const ACYCLIC_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentEmbedding {
    latent_dim: usize,
    num_vars: usize,
    /// `U` followed by `V`, each stored row-major as `latent_dim × num_vars`.
    values: Vec<f64>,
}

impl LatentEmbedding {
    pub fn zeros(latent_dim: usize, num_vars: usize) -> Result<Self> {
        Self::from_vec(latent_dim, num_vars, vec![0.0; 2 * latent_dim * num_vars])
    }

    pub fn from_vec(latent_dim: usize, num_vars: usize, values: Vec<f64>) -> Result<Self> {
        if latent_dim < 1 {
            return Err(Error::config("latent_dim", "must be at least 1"));
        }
        if num_vars < 2 {
            return Err(Error::config("num_vars", "must be at least 2"));
        }
        if values.len() != 2 * latent_dim * num_vars {
            return Err(Error::contract(format!(
                "embedding needs {} values, got {}",
                2 * latent_dim * num_vars,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("embedding entries must be finite"));
        }
        Ok(Self {
            latent_dim,
            num_vars,
            values,
        })
    }

    pub fn from_parts(u: &Array2<f64>, v: &Array2<f64>) -> Result<Self> {
        if u.dim() != v.dim() {
            return Err(Error::contract("U and V must have the same shape"));
        }
        let (l, d) = u.dim();
        let values = u.iter().chain(v.iter()).copied().collect();
        Self::from_vec(l, d, values)
    }

    /// Draws every entry independently from `N(0, sigma_z²)`.
    pub fn sample_prior<R: Rng + ?Sized>(
        latent_dim: usize,
        num_vars: usize,
        sigma_z: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, sigma_z)
            .map_err(|e| Error::config("sigma_z", e.to_string()))?;
        let values = (0..2 * latent_dim * num_vars)
            .map(|_| normal.sample(rng))
            .collect();
        Self::from_vec(latent_dim, num_vars, values)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    #[inline]
    pub fn u(&self, l: usize, i: usize) -> f64 {
        self.values[l * self.num_vars + i]
    }

    #[inline]
    pub fn v(&self, l: usize, j: usize) -> f64 {
        self.values[(self.latent_dim + l) * self.num_vars + j]
    }

    pub fn u_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.latent_dim, self.num_vars), |(l, i)| self.u(l, i))
    }

    pub fn v_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.latent_dim, self.num_vars), |(l, j)| self.v(l, j))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `s_ij = U_{·i} · V_{·j}` for all pairs, diagonal included.
    pub fn inner_products(&self) -> Array2<f64> {
        let d = self.num_vars;
        let mut s = Array2::zeros((d, d));
        for l in 0..self.latent_dim {
            let u = &self.values[l * d..(l + 1) * d];
            let v = &self.values[(self.latent_dim + l) * d..(self.latent_dim + l + 1) * d];
            for i in 0..d {
                let ui = u[i];
                for j in 0..d {
                    s[[i, j]] += ui * v[j];
                }
            }
        }
        s
    }

    /// Pulls a gradient with respect to the inner products back onto `Z`.
    pub fn backprop_inner_products(&self, grad_s: &Array2<f64>) -> Vec<f64> {
        let d = self.num_vars;
        let ld = self.latent_dim * d;
        let mut grad = vec![0.0; 2 * ld];
        for l in 0..self.latent_dim {
            for i in 0..d {
                for j in 0..d {
                    let g = grad_s[[i, j]];
                    if g == 0.0 {
                        continue;
                    }
                    // ds_ij/dU[l,i] = V[l,j], ds_ij/dV[l,j] = U[l,i]
                    grad[l * d + i] += g * self.v(l, j);
                    grad[ld + l * d + j] += g * self.u(l, i);
                }
            }
        }
        grad
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeConstraint {
    Free,
    Required,
    Forbidden,
}

/// Per-edge hard constraints of one mixture component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardConstraintMask {
    entries: Array2<EdgeConstraint>,
}

impl HardConstraintMask {
    /// All off-diagonal edges free, diagonal forbidden.
    pub fn new(num_vars: usize) -> Self {
        let entries = Array2::from_shape_fn((num_vars, num_vars), |(i, j)| {
            if i == j {
                EdgeConstraint::Forbidden
            } else {
                EdgeConstraint::Free
            }
        });
        Self { entries }
    }

    /// Pins every off-diagonal edge to the given adjacency.
    pub fn from_adjacency(adj: &Adjacency) -> Result<Self> {
        let d = adj.nrows();
        let mut mask = Self::new(d);
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    continue;
                }
                let c = if adj[[i, j]] != 0 {
                    EdgeConstraint::Required
                } else {
                    EdgeConstraint::Forbidden
                };
                mask.set(i, j, c)?;
            }
        }
        Ok(mask)
    }

    pub fn num_vars(&self) -> usize {
        self.entries.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> EdgeConstraint {
        self.entries[[i, j]]
    }

    #[inline]
    pub fn is_free(&self, i: usize, j: usize) -> bool {
        self.entries[[i, j]] == EdgeConstraint::Free
    }

    /// Sets one entry. Fails on the diagonal and when the required edges
    /// alone would close a directed cycle.
    pub fn set(&mut self, i: usize, j: usize, constraint: EdgeConstraint) -> Result<()> {
        let d = self.num_vars();
        if i >= d || j >= d {
            return Err(Error::contract(format!("edge ({i}, {j}) out of range for d={d}")));
        }
        if i == j {
            if constraint == EdgeConstraint::Forbidden {
                return Ok(());
            }
            return Err(Error::contract("self-loops are always forbidden"));
        }
        let previous = self.entries[[i, j]];
        self.entries[[i, j]] = constraint;
        if constraint == EdgeConstraint::Required && !is_acyclic(&self.required_adjacency()) {
            self.entries[[i, j]] = previous;
            return Err(Error::contract(format!(
                "requiring edge {i}->{j} closes a cycle among required edges"
            )));
        }
        Ok(())
    }

    pub fn required_adjacency(&self) -> Adjacency {
        self.entries
            .mapv(|c| u8::from(c == EdgeConstraint::Required))
    }

    pub fn pinned_count(&self) -> usize {
        let d = self.num_vars();
        let mut n = 0;
        for i in 0..d {
            for j in 0..d {
                if i != j && !self.is_free(i, j) {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Matrix of edge probabilities with constrained entries pinned to 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftGraph {
    pub probs: Array2<f64>,
    pub omega: f64,
    pub mask: HardConstraintMask,
}

impl SoftGraph {
    pub fn num_vars(&self) -> usize {
        self.probs.nrows()
    }

    /// Entry-wise `∂G_ij/∂s_ij = ω G (1 - G)`, zero on pinned entries.
    pub fn logit_jacobian(&self) -> Array2<f64> {
        let d = self.num_vars();
        Array2::from_shape_fn((d, d), |(i, j)| {
            if self.mask.is_free(i, j) {
                let p = self.probs[[i, j]];
                self.omega * p * (1.0 - p)
            } else {
                0.0
            }
        })
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn soft_graph(z: &LatentEmbedding, omega: f64, mask: &HardConstraintMask) -> Result<SoftGraph> {
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(Error::config("omega", "must be positive and finite"));
    }
    let d = z.num_vars();
    if mask.num_vars() != d {
        return Err(Error::contract("mask and embedding disagree on d"));
    }
    let s = z.inner_products();
    let mut probs = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            probs[[i, j]] = match mask.get(i, j) {
                EdgeConstraint::Required => 1.0,
                EdgeConstraint::Forbidden => 0.0,
                EdgeConstraint::Free => {
                    let x = omega * s[[i, j]];
                    if !x.is_finite() {
                        return Err(Error::NumericOverflow {
                            context: format!("inner product at ({i}, {j})"),
                        });
                    }
                    logistic(x)
                }
            };
        }
    }
    Ok(SoftGraph {
        probs,
        omega,
        mask: mask.clone(),
    })
}

/// `G_∞(Z)`: the hard graph obtained as ω → ∞.
pub fn hard_graph(z: &LatentEmbedding, mask: &HardConstraintMask) -> Adjacency {
    let d = z.num_vars();
    let s = z.inner_products();
    Array2::from_shape_fn((d, d), |(i, j)| match mask.get(i, j) {
        EdgeConstraint::Required => 1,
        EdgeConstraint::Forbidden => 0,
        EdgeConstraint::Free => u8::from(s[[i, j]] > 0.0),
    })
}

/// Independent Bernoulli draw for every free edge. Pinned entries are
/// copied without consuming randomness.
pub fn sample_graph<R: Rng + ?Sized>(soft: &SoftGraph, rng: &mut R) -> Adjacency {
    let d = soft.num_vars();
    let mut g = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            g[[i, j]] = match soft.mask.get(i, j) {
                EdgeConstraint::Required => 1,
                EdgeConstraint::Forbidden => 0,
                EdgeConstraint::Free => u8::from(rng.gen::<f64>() < soft.probs[[i, j]]),
            };
        }
    }
    g
}

fn shifted(a: &Array2<f64>) -> Array2<f64> {
    let d = a.nrows();
    let mut m = a / d as f64;
    for i in 0..d {
        m[[i, i]] += 1.0;
    }
    m
}

/// `h(A) = tr[(I + A/d)^d] - d`, zero exactly when the support of a
/// nonnegative `A` is acyclic.
pub fn acyclicity(a: &Array2<f64>) -> f64 {
    let d = a.nrows();
    let m = shifted(a);
    let power = if d.is_power_of_two() {
        let mut p = m;
        let mut e = 1;
        while e < d {
            p = p.dot(&p);
            e *= 2;
        }
        p
    } else {
        let mut p = m.clone();
        for _ in 1..d {
            p = p.dot(&m);
        }
        p
    };
    power.diag().sum() - d as f64
}

/// `h(A)` together with `∇_A h = [(I + A/d)^{d-1}]ᵀ`.
pub fn acyclicity_with_grad(a: &Array2<f64>) -> (f64, Array2<f64>) {
    let d = a.nrows();
    let m = shifted(a);
    let mut p = Array2::eye(d);
    for _ in 1..d {
        p = p.dot(&m);
    }
    let full = p.dot(&m);
    (full.diag().sum() - d as f64, p.reversed_axes())
}

pub fn adjacency_as_f64(adj: &Adjacency) -> Array2<f64> {
    adj.mapv(f64::from)
}

/// Kahn's algorithm; `None` when the graph has a directed cycle.
pub fn topological_order(adj: &Adjacency) -> Option<Vec<usize>> {
    let d = adj.nrows();
    let mut indegree: Vec<usize> = (0..d)
        .map(|j| (0..d).filter(|&i| adj[[i, j]] != 0).count())
        .collect();
    let mut ready: Vec<usize> = (0..d).rev().filter(|&j| indegree[j] == 0).collect();
    let mut order = Vec::with_capacity(d);
    while let Some(i) = ready.pop() {
        order.push(i);
        for j in 0..d {
            if adj[[i, j]] != 0 {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.push(j);
                }
            }
        }
    }
    (order.len() == d).then_some(order)
}

pub fn is_acyclic(adj: &Adjacency) -> bool {
    topological_order(adj).is_some()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum StructurePrior {
    ErdosRenyi { edge_prob: f64 },
    ScaleFree,
}

impl StructurePrior {
    /// Edge probability giving `expected_edges_per_node · d` expected edges,
    /// kept inside (0, 1).
    pub fn erdos_renyi_for_degree(num_vars: usize, expected_edges_per_node: f64) -> Self {
        let pairs = (num_vars * (num_vars - 1)) as f64 / 2.0;
        let q = (expected_edges_per_node * num_vars as f64 / pairs).clamp(1e-3, 1.0 - 1e-3);
        StructurePrior::ErdosRenyi { edge_prob: q }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StructurePrior::ErdosRenyi { edge_prob } if !(edge_prob > 0.0 && edge_prob < 1.0) => {
                Err(Error::config("edge_prob", "must lie strictly inside (0, 1)"))
            }
            _ => Ok(()),
        }
    }
}

/// Unnormalized log structure prior evaluated on the soft graph.
pub fn log_structure_prior(soft: &SoftGraph, prior: &StructurePrior) -> Result<f64> {
    prior.validate()?;
    let d = soft.num_vars();
    Ok(match *prior {
        StructurePrior::ErdosRenyi { edge_prob: q } => {
            let total = soft.probs.sum();
            let pairs = (d * (d - 1) / 2) as f64;
            total * q.ln() + (pairs - total) * (1.0 - q).ln()
        }
        StructurePrior::ScaleFree => soft
            .probs
            .rows()
            .into_iter()
            .map(|row| -3.0 * (1.0 + row.sum()).ln())
            .sum(),
    })
}

/// Gradient of [`log_structure_prior`] with respect to the soft-graph entries.
pub fn structure_prior_grad(soft: &SoftGraph, prior: &StructurePrior) -> Result<Array2<f64>> {
    prior.validate()?;
    let d = soft.num_vars();
    let mut grad = Array2::zeros((d, d));
    match *prior {
        StructurePrior::ErdosRenyi { edge_prob: q } => {
            let g = q.ln() - (1.0 - q).ln();
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        grad[[i, j]] = g;
                    }
                }
            }
        }
        StructurePrior::ScaleFree => {
            for i in 0..d {
                let g = -3.0 / (1.0 + soft.probs.row(i).sum());
                for j in 0..d {
                    if i != j {
                        grad[[i, j]] = g;
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Sum of independent `N(0, sigma_z²)` log densities over all entries of
/// `Z`, and its gradient `-Z / sigma_z²`.
pub fn log_latent_gaussian_prior(z: &LatentEmbedding, sigma_z: f64) -> (f64, Vec<f64>) {
    let var = sigma_z * sigma_z;
    let norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let mut value = 0.0;
    let grad = z
        .as_slice()
        .iter()
        .map(|&x| {
            value += norm - 0.5 * x * x / var;
            -x / var
        })
        .collect();
    (value, grad)
}

/// Chains a gradient with respect to soft-graph entries back onto `Z`.
pub fn soft_graph_backprop(z: &LatentEmbedding, soft: &SoftGraph, grad_probs: &Array2<f64>) -> Vec<f64> {
    let grad_s = grad_probs * &soft.logit_jacobian();
    z.backprop_inner_products(&grad_s)
}
