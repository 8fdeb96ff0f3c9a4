//! Query selection by expected information gain.
//!
//! The expert's answer about edge `i -> j` is simulated from the particle's
//! soft graph, either as `Beta(α_s G_ij + 1, β_s (1 - G_ij) + 1)` (mode
//! `G_ij`) or as a Bernoulli draw. The information gain of a query is the
//! mutual information between that answer and the particle index.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::elicitation::{ComponentBeliefs, Edge};
use crate::error::{Error, Result};

const PSI_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorSpec {
    pub alpha_s: f64,
    pub beta_s: f64,
    pub binary_mode: bool,
}

impl Default for SimulatorSpec {
    fn default() -> Self {
        Self {
            alpha_s: 10.0,
            beta_s: 10.0,
            binary_mode: false,
        }
    }
}

impl SimulatorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_s > 0.0 && self.beta_s > 0.0) {
            return Err(Error::config("alpha_s/beta_s", "must be positive"));
        }
        Ok(())
    }

    fn beta_params(&self, g: f64) -> (f64, f64) {
        (self.alpha_s * g + 1.0, self.beta_s * (1.0 - g) + 1.0)
    }

    /// Draws one simulated response for an edge with probability `g`.
    pub fn sample<R: Rng + ?Sized>(&self, g: f64, rng: &mut R) -> f64 {
        if self.binary_mode {
            return if rng.gen::<f64>() < g { 1.0 } else { 0.0 };
        }
        let (a, b) = self.beta_params(g);
        let beta = Beta::new(a, b).expect("shape parameters are at least 1");
        beta.sample(rng).clamp(PSI_CLAMP, 1.0 - PSI_CLAMP)
    }

    /// Log density (or log mass in binary mode) of response `psi`.
    pub fn log_density(&self, psi: f64, g: f64) -> f64 {
        if self.binary_mode {
            return if psi >= 0.5 { g.ln() } else { (1.0 - g).ln() };
        }
        let (a, b) = self.beta_params(g);
        let psi = psi.clamp(PSI_CLAMP, 1.0 - PSI_CLAMP);
        (a - 1.0) * psi.ln() + (b - 1.0) * (1.0 - psi).ln() + ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
    }
}

/// Log of the mean of `exp(xs)`, written so equal inputs give exactly `xs[0]`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + (s / xs.len() as f64).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Nested Monte Carlo estimate. `probs[p]` is the edge probability under
/// particle `p`; every particle also serves in the inner marginal.
pub fn eig_nmc<R: Rng + ?Sized>(probs: &[f64], spec: &SimulatorSpec, samples: usize, rng: &mut R) -> Result<EigEstimate> {
    if probs.is_empty() {
        return Err(Error::contract("at least one particle required"));
    }
    if samples == 0 {
        return Err(Error::config("eig_samples", "must be at least 1"));
    }
    let mut terms = Vec::with_capacity(samples);
    let mut inner = vec![0.0; probs.len()];
    for _ in 0..samples {
        let s = rng.gen_range(0..probs.len());
        let psi = spec.sample(probs[s], rng);
        for (slot, &g) in inner.iter_mut().zip(probs) {
            *slot = spec.log_density(psi, g);
        }
        terms.push(inner[s] - log_mean_exp(&inner));
    }
    let n = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / n;
    let std_err = if terms.len() > 1 {
        let var = terms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(EigEstimate { mean, std_err })
}

/// Exact information gain under the binary simulator, enumerating both answers.
pub fn eig_rao_blackwell(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::contract("at least one particle required"));
    }
    let inv = 1.0 / probs.len() as f64;
    let mut total = 0.0;
    for outcome in [true, false] {
        let cond: Vec<f64> = probs
            .iter()
            .map(|&g| if outcome { g } else { 1.0 - g })
            .collect();
        let logs: Vec<f64> = cond.iter().map(|c| c.ln()).collect();
        let ln_marginal = log_mean_exp(&logs);
        if ln_marginal == f64::NEG_INFINITY {
            continue;
        }
        let mut acc = 0.0;
        for (&c, &lc) in cond.iter().zip(&logs) {
            if c > 0.0 {
                acc += c * (lc - ln_marginal);
            }
        }
        total += acc * inv;
    }
    Ok(total.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EigEstimator {
    Nmc { samples: usize },
    RaoBlackwell,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStrategy {
    Bed,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BedConfig {
    pub simulator: SimulatorSpec,
    pub estimator: EigEstimator,
    pub strategy: QueryStrategy,
}

impl Default for BedConfig {
    fn default() -> Self {
        Self {
            simulator: SimulatorSpec::default(),
            estimator: EigEstimator::Nmc { samples: 200 },
            strategy: QueryStrategy::Bed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub component: usize,
    pub edge: Edge,
    pub eig: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub queries: Vec<Query>,
    /// Set when some component had fewer candidates than requested.
    pub under_run: bool,
}

/// Candidate edges of one component in (row, column) order: off-diagonal,
/// unconstrained, never queried and not excluded by the user.
pub fn design_space(beliefs: &ComponentBeliefs) -> Vec<Edge> {
    let d = beliefs.num_vars();
    let mut out = Vec::new();
    for i in 0..d {
        for j in 0..d {
            let e = (i, j);
            if i != j && beliefs.mask.is_free(i, j) && !beliefs.queried.contains(&e) && !beliefs.excluded.contains(&e) {
                out.push(e);
            }
        }
    }
    out
}

fn edge_rng(round_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(round_seed);
    rng.set_stream(stream);
    rng
}

/// Information gain of every candidate edge for one component, given the
/// soft graph of each particle.
pub fn score_candidates(
    component: usize,
    candidates: &[Edge],
    particle_probs: &[Array2<f64>],
    config: &BedConfig,
    round_seed: u64,
) -> Result<Vec<f64>> {
    config.simulator.validate()?;
    let d = particle_probs.first().map_or(0, |p| p.nrows());
    candidates
        .par_iter()
        .map(|&(i, j)| {
            let probs: Vec<f64> = particle_probs.iter().map(|g| g[[i, j]]).collect();
            match config.estimator {
                EigEstimator::RaoBlackwell => eig_rao_blackwell(&probs),
                EigEstimator::Nmc { samples } => {
                    let stream = ((component * d + i) * d + j) as u64;
                    let mut rng = edge_rng(round_seed, stream);
                    eig_nmc(&probs, &config.simulator, samples, &mut rng).map(|e| e.mean)
                }
            }
        })
        .collect()
}

/// Picks up to `per_component` queries for one component.
pub fn select_component_queries(
    component: usize,
    candidates: &[Edge],
    particle_probs: &[Array2<f64>],
    per_component: usize,
    config: &BedConfig,
    round_seed: u64,
) -> Result<(Vec<Query>, bool)> {
    let eigs = score_candidates(component, candidates, particle_probs, config, round_seed)?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    match config.strategy {
        QueryStrategy::Bed => {
            order.sort_by(|&a, &b| eigs[b].total_cmp(&eigs[a]).then(candidates[a].cmp(&candidates[b])));
        }
        QueryStrategy::Random => {
            let mut rng = edge_rng(round_seed, u64::MAX - component as u64);
            order.shuffle(&mut rng);
        }
    }
    let under_run = candidates.len() < per_component;
    let queries = order
        .into_iter()
        .take(per_component)
        .enumerate()
        .map(|(rank, idx)| Query {
            component,
            edge: candidates[idx],
            eig: eigs[idx],
            rank,
        })
        .collect();
    Ok((queries, under_run))
}
