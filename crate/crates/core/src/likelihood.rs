//! Gaussian Bayesian-network likelihoods with linear or small-MLP means.
//!
//! Parameters are stored densely for every potential edge and masked by the
//! graph when evaluated, so the parameter vector has the same length for
//! every graph.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Adjacency;

pub const DEFAULT_NOISE_VAR: f64 = 0.1;
pub const DEFAULT_HIDDEN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp { hidden: usize },
}

impl ModelKind {
    pub fn num_params(&self, d: usize) -> usize {
        match *self {
            ModelKind::Linear => d * d,
            ModelKind::Mlp { hidden } => d * mlp_block(d, hidden),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, ModelKind::Linear)
    }
}

/// Length of one node's parameter block: `W1 (d×h)`, `b1 (h)`, `w2 (h)`, `b2`.
fn mlp_block(d: usize, h: usize) -> usize {
    d * h + 2 * h + 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub kind: ModelKind,
    num_vars: usize,
    noise_var: f64,
    /// Linear: `W[i, j]` (weight of parent `i` in node `j`) at `i * d + j`.
    /// MLP: one block per node, see [`mlp_block`].
    values: Vec<f64>,
}

impl BnParams {
    pub fn zeros(kind: ModelKind, num_vars: usize, noise_var: f64) -> Result<Self> {
        Self::from_vec(kind, num_vars, noise_var, vec![0.0; kind.num_params(num_vars)])
    }

    pub fn from_vec(kind: ModelKind, num_vars: usize, noise_var: f64, values: Vec<f64>) -> Result<Self> {
        if num_vars < 1 {
            return Err(Error::config("num_vars", "must be at least 1"));
        }
        if !(noise_var > 0.0) || !noise_var.is_finite() {
            return Err(Error::config("noise_var", "must be positive"));
        }
        if let ModelKind::Mlp { hidden } = kind {
            if hidden == 0 {
                return Err(Error::config("hidden", "must be at least 1"));
            }
        }
        if values.len() != kind.num_params(num_vars) {
            return Err(Error::contract(format!(
                "parameter vector needs {} entries, got {}",
                kind.num_params(num_vars),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("parameters must be finite"));
        }
        Ok(Self {
            kind,
            num_vars,
            noise_var,
            values,
        })
    }

    /// Linear weights from a `d×d` matrix indexed `[parent, child]`.
    pub fn linear(weights: &Array2<f64>, noise_var: f64) -> Result<Self> {
        let d = weights.nrows();
        if weights.ncols() != d {
            return Err(Error::contract("weight matrix must be square"));
        }
        Self::from_vec(ModelKind::Linear, d, noise_var, weights.iter().copied().collect())
    }

    /// Every entry drawn from the standard normal parameter prior.
    pub fn sample_prior<R: Rng + ?Sized>(
        kind: ModelKind,
        num_vars: usize,
        noise_var: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let values = (0..kind.num_params(num_vars))
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Self::from_vec(kind, num_vars, noise_var, values)
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Index of the parameter tying parent `i` to child `j`: the linear
    /// weight, or for the MLP the first-layer weight into hidden unit `u`.
    pub fn edge_param_index(&self, i: usize, j: usize, u: usize) -> usize {
        let d = self.num_vars;
        match self.kind {
            ModelKind::Linear => i * d + j,
            ModelKind::Mlp { hidden } => j * mlp_block(d, hidden) + i * hidden + u,
        }
    }

    pub fn linear_weights(&self) -> Option<Array2<f64>> {
        let d = self.num_vars;
        self.kind
            .is_linear()
            .then(|| Array2::from_shape_fn((d, d), |(i, j)| self.values[i * d + j]))
    }
}

/// Observations with an optional held-out split and optional ground-truth
/// component labels, the latter used only for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub rows: Array2<f64>,
    pub held_out: Option<Array2<f64>>,
    pub labels: Option<Vec<usize>>,
    pub held_out_labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        check_matrix(&rows, "rows")?;
        Ok(Self {
            rows: rows.as_standard_layout().into_owned(),
            held_out: None,
            labels: None,
            held_out_labels: None,
        })
    }

    pub fn with_held_out(mut self, held_out: Array2<f64>) -> Result<Self> {
        check_matrix(&held_out, "held_out")?;
        if held_out.ncols() != self.num_vars() {
            return Err(Error::contract("held-out data has a different number of variables"));
        }
        self.held_out = Some(held_out.as_standard_layout().into_owned());
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<usize>, held_out_labels: Option<Vec<usize>>) -> Result<Self> {
        if labels.len() != self.num_rows() {
            return Err(Error::contract("one label per row required"));
        }
        if let Some(h) = &held_out_labels {
            let n = self.held_out.as_ref().map_or(0, |m| m.nrows());
            if h.len() != n {
                return Err(Error::contract("one label per held-out row required"));
            }
        }
        self.labels = Some(labels);
        self.held_out_labels = held_out_labels;
        Ok(self)
    }

    pub fn num_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn num_vars(&self) -> usize {
        self.rows.ncols()
    }
}

fn check_matrix(m: &Array2<f64>, what: &str) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::contract(format!("{what} must be non-empty")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract(format!("{what} contains missing or non-finite values")));
    }
    Ok(())
}

fn check_shapes(d_x: usize, g: &Adjacency, theta: &BnParams) -> Result<()> {
    let d = theta.num_vars;
    if d_x != d || g.nrows() != d || g.ncols() != d {
        return Err(Error::contract(format!(
            "dimension mismatch: data has {d_x} variables, graph is {}x{}, parameters expect {d}",
            g.nrows(),
            g.ncols()
        )));
    }
    Ok(())
}

#[inline]
fn log_norm_const(noise_var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * noise_var).ln()
}

/// Mean of node `j` given the row. `hidden` is scratch space of width at
/// least `h` that receives the pre-activations for the MLP.
pub fn node_mean(x: &[f64], g: &Adjacency, theta: &BnParams, j: usize, hidden: &mut [f64]) -> f64 {
    let d = theta.num_vars;
    let v = &theta.values;
    match theta.kind {
        ModelKind::Linear => (0..d)
            .filter(|&i| g[[i, j]] != 0)
            .map(|i| v[i * d + j] * x[i])
            .sum(),
        ModelKind::Mlp { hidden: h } => {
            let block = &v[j * mlp_block(d, h)..(j + 1) * mlp_block(d, h)];
            let (w1, rest) = block.split_at(d * h);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(h);
            hidden[..h].copy_from_slice(b1);
            for i in 0..d {
                if g[[i, j]] == 0 {
                    continue;
                }
                let xi = x[i];
                for u in 0..h {
                    hidden[u] += w1[i * h + u] * xi;
                }
            }
            b2[0] + (0..h).map(|u| w2[u] * hidden[u].max(0.0)).sum::<f64>()
        }
    }
}

fn hidden_scratch(theta: &BnParams) -> Vec<f64> {
    match theta.kind {
        ModelKind::Linear => Vec::new(),
        ModelKind::Mlp { hidden } => vec![0.0; hidden],
    }
}

/// Conditional log density of node `j` given its parents in `g`.
pub fn node_log_likelihood(x: &[f64], g: &Adjacency, theta: &BnParams, j: usize) -> Result<f64> {
    check_shapes(x.len(), g, theta)?;
    if j >= theta.num_vars {
        return Err(Error::contract(format!("node {j} out of range")));
    }
    let mut scratch = hidden_scratch(theta);
    let r = x[j] - node_mean(x, g, theta, j, &mut scratch);
    Ok(log_norm_const(theta.noise_var) - 0.5 * r * r / theta.noise_var)
}

/// `log p(x | G, Θ)` for a single observation.
pub fn log_likelihood_row(x: &[f64], g: &Adjacency, theta: &BnParams) -> Result<f64> {
    check_shapes(x.len(), g, theta)?;
    let mut scratch = hidden_scratch(theta);
    Ok(row_ll(x, g, theta, &mut scratch))
}

fn row_ll(x: &[f64], g: &Adjacency, theta: &BnParams, scratch: &mut [f64]) -> f64 {
    let c = log_norm_const(theta.noise_var);
    let mut total = 0.0;
    for j in 0..theta.num_vars {
        let r = x[j] - node_mean(x, g, theta, j, scratch);
        total += c - 0.5 * r * r / theta.noise_var;
    }
    total
}

/// Per-row log-likelihoods of a whole matrix.
pub fn row_log_likelihoods(rows: ArrayView2<f64>, g: &Adjacency, theta: &BnParams) -> Result<Vec<f64>> {
    check_shapes(rows.ncols(), g, theta)?;
    let mut scratch = hidden_scratch(theta);
    let rows = rows.as_standard_layout();
    Ok(contiguous_rows(&rows)
        .map(|x| row_ll(x, g, theta, &mut scratch))
        .collect())
}


/// `Σ_n w_n log p(x_n | G, Θ)` with `w_n = 1` when `weights` is `None`.
pub fn weighted_log_likelihood(
    rows: ArrayView2<f64>,
    weights: Option<&[f64]>,
    g: &Adjacency,
    theta: &BnParams,
) -> Result<f64> {
    check_shapes(rows.ncols(), g, theta)?;
    check_weights(rows.nrows(), weights)?;
    let mut scratch = hidden_scratch(theta);
    let rows = rows.as_standard_layout();
    let mut total = 0.0;
    for (n, x) in contiguous_rows(&rows).enumerate() {
        let w = weights.map_or(1.0, |w| w[n]);
        if w == 0.0 {
            continue;
        }
        total += w * row_ll(x, g, theta, &mut scratch);
    }
    Ok(total)
}

fn contiguous_rows<'a>(rows: &'a ndarray::CowArray<'_, f64, ndarray::Ix2>) -> std::slice::ChunksExact<'a, f64> {
    let d = rows.ncols();
    rows.as_slice()
        .expect("standard layout is contiguous")
        .chunks_exact(d)
}

fn check_weights(n: usize, weights: Option<&[f64]>) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::contract("one weight per row required"));
        }
    }
    Ok(())
}

/// Returns `Σ_n w_n log p(x_n | G, Θ)` and adds `scale` times its gradient
/// with respect to `Θ` into `grad`.
pub fn weighted_log_likelihood_with_grad(
    rows: ArrayView2<f64>,
    weights: Option<&[f64]>,
    g: &Adjacency,
    theta: &BnParams,
    grad: &mut [f64],
    scale: f64,
) -> Result<f64> {
    check_shapes(rows.ncols(), g, theta)?;
    check_weights(rows.nrows(), weights)?;
    if grad.len() != theta.len() {
        return Err(Error::contract("gradient buffer has the wrong length"));
    }
    let d = theta.num_vars;
    let var = theta.noise_var;
    let c = log_norm_const(var);
    let v = &theta.values;
    let rows = rows.as_standard_layout();
    let mut total = 0.0;
    match theta.kind {
        ModelKind::Linear => {
            // Effective weights with the parent mask folded in.
            let mut weff = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    if g[[i, j]] != 0 {
                        weff[i * d + j] = v[i * d + j];
                    }
                }
            }
            let mut err = vec![0.0; d];
            for (n, x) in contiguous_rows(&rows).enumerate() {
                let w = weights.map_or(1.0, |w| w[n]);
                if w == 0.0 {
                    continue;
                }
                for j in 0..d {
                    let mut m = 0.0;
                    for i in 0..d {
                        m += weff[i * d + j] * x[i];
                    }
                    let res = x[j] - m;
                    total += w * (c - 0.5 * res * res / var);
                    err[j] = scale * w * res / var;
                }
                for i in 0..d {
                    let xi = x[i];
                    if xi == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        if g[[i, j]] != 0 {
                            grad[i * d + j] += err[j] * xi;
                        }
                    }
                }
            }
        }
        ModelKind::Mlp { hidden: h } => {
            let bl = mlp_block(d, h);
            let mut pre = vec![0.0; h];
            for (n, x) in contiguous_rows(&rows).enumerate() {
                let w = weights.map_or(1.0, |w| w[n]);
                if w == 0.0 {
                    continue;
                }
                for j in 0..d {
                    let m = node_mean(x, g, theta, j, &mut pre);
                    let res = x[j] - m;
                    total += w * (c - 0.5 * res * res / var);
                    let e = scale * w * res / var;
                    let off = j * bl;
                    let w2 = &v[off + d * h + h..off + d * h + 2 * h];
                    grad[off + d * h + 2 * h] += e;
                    for u in 0..h {
                        let a = pre[u];
                        grad[off + d * h + h + u] += e * a.max(0.0);
                        if a > 0.0 {
                            let da = e * w2[u];
                            grad[off + d * h + u] += da;
                            for i in 0..d {
                                if g[[i, j]] != 0 {
                                    grad[off + i * h + u] += da * x[i];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Standard normal log density over every parameter entry, with gradient `-Θ`.
pub fn log_param_prior(theta: &BnParams) -> (f64, Vec<f64>) {
    let c = -0.5 * (2.0 * std::f64::consts::PI).ln();
    let value = theta.values.iter().map(|t| c - 0.5 * t * t).sum();
    let grad = theta.values.iter().map(|t| -t).collect();
    (value, grad)
}

/// How the parameter prior depends on the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamPriorKind {
    /// Standard normal on every stored entry, independent of the graph.
    Dense,
    /// Standard normal only on parameters attached to present edges
    /// (linear weights, MLP first-layer rows); the rest are unconstrained.
    EdgeMasked,
}

/// `log p(Θ | G)` for a possibly soft adjacency `g`, with gradients with
/// respect to `Θ` and to the entries of `g`. Soft entries weight the
/// per-edge log densities.
pub fn log_param_prior_given(theta: &BnParams, g: &Array2<f64>, kind: ParamPriorKind) -> (f64, Vec<f64>, Array2<f64>) {
    let d = theta.num_vars;
    let mut grad_g = Array2::zeros((d, d));
    if kind == ParamPriorKind::Dense {
        let (v, gt) = log_param_prior(theta);
        return (v, gt, grad_g);
    }
    let c = -0.5 * (2.0 * std::f64::consts::PI).ln();
    let v = &theta.values;
    let mut value = 0.0;
    let mut grad = vec![0.0; v.len()];
    match theta.kind {
        ModelKind::Linear => {
            for i in 0..d {
                for j in 0..d {
                    let t = v[i * d + j];
                    let lp = c - 0.5 * t * t;
                    value += g[[i, j]] * lp;
                    grad[i * d + j] = -g[[i, j]] * t;
                    grad_g[[i, j]] = lp;
                }
            }
        }
        ModelKind::Mlp { hidden: h } => {
            let bl = mlp_block(d, h);
            for j in 0..d {
                let off = j * bl;
                for i in 0..d {
                    for u in 0..h {
                        let t = v[off + i * h + u];
                        let lp = c - 0.5 * t * t;
                        value += g[[i, j]] * lp;
                        grad[off + i * h + u] = -g[[i, j]] * t;
                        grad_g[[i, j]] += lp;
                    }
                }
                for k in off + d * h..off + bl {
                    value += c - 0.5 * v[k] * v[k];
                    grad[k] = -v[k];
                }
            }
        }
    }
    (value, grad, grad_g)
}

/// Log-likelihood under a soft adjacency whose entries scale each parent's
/// input, and its gradient with respect to those entries (added into
/// `grad_g`).
pub fn soft_log_likelihood_with_grad(
    rows: ArrayView2<f64>,
    g: &Array2<f64>,
    theta: &BnParams,
    grad_g: &mut Array2<f64>,
) -> Result<f64> {
    let d = theta.num_vars;
    if rows.ncols() != d || g.dim() != (d, d) || grad_g.dim() != (d, d) {
        return Err(Error::contract("dimension mismatch in soft likelihood"));
    }
    let var = theta.noise_var;
    let c = log_norm_const(var);
    let v = &theta.values;
    let rows = rows.as_standard_layout();
    let mut total = 0.0;
    match theta.kind {
        ModelKind::Linear => {
            let mut weff = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    weff[i * d + j] = g[[i, j]] * v[i * d + j];
                }
            }
            // Accumulate Σ_n e_nj x_ni, then scale by θ_ij at the end.
            let mut acc = vec![0.0; d * d];
            let mut err = vec![0.0; d];
            for x in contiguous_rows(&rows) {
                for j in 0..d {
                    let mut m = 0.0;
                    for i in 0..d {
                        m += weff[i * d + j] * x[i];
                    }
                    let res = x[j] - m;
                    total += c - 0.5 * res * res / var;
                    err[j] = res / var;
                }
                for i in 0..d {
                    let xi = x[i];
                    for j in 0..d {
                        acc[i * d + j] += err[j] * xi;
                    }
                }
            }
            for i in 0..d {
                for j in 0..d {
                    grad_g[[i, j]] += acc[i * d + j] * v[i * d + j];
                }
            }
        }
        ModelKind::Mlp { hidden: h } => {
            let bl = mlp_block(d, h);
            let mut pre = vec![0.0; h];
            for x in contiguous_rows(&rows) {
                for j in 0..d {
                    let off = j * bl;
                    let w1 = &v[off..off + d * h];
                    let b1 = &v[off + d * h..off + d * h + h];
                    let w2 = &v[off + d * h + h..off + d * h + 2 * h];
                    let b2 = v[off + d * h + 2 * h];
                    pre.copy_from_slice(b1);
                    for i in 0..d {
                        let xi = x[i] * g[[i, j]];
                        if xi == 0.0 {
                            continue;
                        }
                        for u in 0..h {
                            pre[u] += w1[i * h + u] * xi;
                        }
                    }
                    let m = b2 + (0..h).map(|u| w2[u] * pre[u].max(0.0)).sum::<f64>();
                    let res = x[j] - m;
                    total += c - 0.5 * res * res / var;
                    let e = res / var;
                    for i in 0..d {
                        if x[i] == 0.0 {
                            continue;
                        }
                        let mut s = 0.0;
                        for u in 0..h {
                            if pre[u] > 0.0 {
                                s += w2[u] * w1[i * h + u];
                            }
                        }
                        grad_g[[i, j]] += e * s * x[i];
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Gradient of `log p(Θ) + Σ_n w_n log p(x_n | G, Θ)` with respect to `Θ`.
pub fn grad_theta_log_joint(
    rows: ArrayView2<f64>,
    weights: Option<&[f64]>,
    g: &Adjacency,
    theta: &BnParams,
) -> Result<Vec<f64>> {
    let (_, mut grad) = log_param_prior(theta);
    weighted_log_likelihood_with_grad(rows, weights, g, theta, &mut grad, 1.0)?;
    Ok(grad)
}
