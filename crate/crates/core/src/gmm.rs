//! Full-covariance Gaussian mixture fitted by expectation maximization, used
//! as a clustering baseline.

use nalgebra::{Cholesky, DMatrix, DVector, Dynamic};
use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bed::log_mean_exp;
use crate::error::{Error, Result};
use crate::metrics::map_labels;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub ridge: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            ridge: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    /// Total in-sample log-likelihood after each iteration.
    pub history: Vec<f64>,
    pub log_likelihood: f64,
    pub labels: Vec<usize>,
    pub seed: u64,
}

struct Component {
    chol: Cholesky<f64, Dynamic>,
    log_det: f64,
}

fn factor(cov: &DMatrix<f64>, ridge: f64) -> Result<Component> {
    let chol = match Cholesky::new(cov.clone()) {
        Some(c) => c,
        None => {
            let d = cov.nrows();
            Cholesky::new(cov + DMatrix::identity(d, d) * ridge)
                .ok_or_else(|| Error::contract("covariance is singular even after adding a ridge"))?
        }
    };
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(Component { chol, log_det })
}

fn log_gauss(x: &DVector<f64>, mean: &DVector<f64>, c: &Component) -> f64 {
    let d = x.len() as f64;
    let diff = x - mean;
    let z = c
        .chol
        .l()
        .solve_lower_triangular(&diff)
        .expect("Cholesky factor has a positive diagonal");
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + c.log_det + z.norm_squared())
}

fn to_vectors(data: ArrayView2<f64>) -> Vec<DVector<f64>> {
    data.rows()
        .into_iter()
        .map(|r| DVector::from_iterator(r.len(), r.iter().copied()))
        .collect()
}

/// Log responsibilities (unnormalized joint) and per-row log-likelihood.
fn e_step(
    xs: &[DVector<f64>],
    weights: &[f64],
    means: &[DVector<f64>],
    comps: &[Component],
) -> (Array2<f64>, f64) {
    let k = weights.len();
    let mut resp = Array2::zeros((xs.len(), k));
    let mut total = 0.0;
    let mut row = vec![0.0; k];
    for (n, x) in xs.iter().enumerate() {
        for j in 0..k {
            row[j] = weights[j].ln() + log_gauss(x, &means[j], &comps[j]);
        }
        let lse = log_mean_exp(&row) + (k as f64).ln();
        total += lse;
        for j in 0..k {
            resp[[n, j]] = (row[j] - lse).exp();
        }
    }
    (resp, total)
}

pub fn gmm_em(data: ArrayView2<f64>, k: usize, seed: u64, config: &GmmConfig) -> Result<GmmFit> {
    let (n, d) = data.dim();
    if k == 0 || k > n {
        return Err(Error::config("num_components", "must lie in 1..=N"));
    }
    let xs = to_vectors(data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<DVector<f64>> = sample(&mut rng, n, k).into_iter().map(|i| xs[i].clone()).collect();
    let grand: DVector<f64> = xs.iter().fold(DVector::zeros(d), |a, x| a + x) / n as f64;
    let pooled = xs
        .iter()
        .fold(DMatrix::zeros(d, d), |a, x| a + (x - &grand) * (x - &grand).transpose())
        / n as f64;
    let mut covs = vec![pooled; k];
    let mut weights = vec![1.0 / k as f64; k];
    let mut history = Vec::new();
    let mut resp = Array2::zeros((n, k));
    for _ in 0..config.max_iter {
        let comps = covs
            .iter()
            .map(|c| factor(c, config.ridge))
            .collect::<Result<Vec<_>>>()?;
        let (r, ll) = e_step(&xs, &weights, &means, &comps);
        resp = r;
        let converged = history
            .last()
            .is_some_and(|&prev: &f64| (ll - prev).abs() <= config.tol * prev.abs().max(1.0));
        history.push(ll);
        if converged {
            break;
        }
        for j in 0..k {
            let nk: f64 = resp.column(j).sum() + 10.0 * f64::EPSILON;
            weights[j] = nk / n as f64;
            let mean = xs
                .iter()
                .enumerate()
                .fold(DVector::zeros(d), |a, (i, x)| a + x * resp[[i, j]])
                / nk;
            let cov = xs.iter().enumerate().fold(DMatrix::zeros(d, d), |a, (i, x)| {
                let diff = x - &mean;
                a + (&diff * diff.transpose()) * resp[[i, j]]
            }) / nk;
            means[j] = mean;
            covs[j] = cov;
        }
    }
    let log_likelihood = *history.last().expect("at least one iteration");
    Ok(GmmFit {
        labels: map_labels(&resp),
        weights,
        means,
        covariances: covs,
        history,
        log_likelihood,
        seed,
    })
}

/// Fits once per seed and keeps the fit with the highest log-likelihood.
pub fn gmm_em_best(data: ArrayView2<f64>, k: usize, seeds: &[u64], config: &GmmConfig) -> Result<GmmFit> {
    let mut best: Option<GmmFit> = None;
    for &s in seeds {
        let fit = gmm_em(data, k, s, config)?;
        if best.as_ref().map_or(true, |b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    best.ok_or_else(|| Error::config("seeds", "at least one seed required"))
}

impl GmmFit {
    pub fn predict(&self, data: ArrayView2<f64>, ridge: f64) -> Result<Vec<usize>> {
        let comps = self
            .covariances
            .iter()
            .map(|c| factor(c, ridge))
            .collect::<Result<Vec<_>>>()?;
        let (resp, _) = e_step(&to_vectors(data), &self.weights, &self.means, &comps);
        Ok(map_labels(&resp))
    }
}
