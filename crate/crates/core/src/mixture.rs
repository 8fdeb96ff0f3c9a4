//! Variational mixture of causal Bayesian networks.
//!
//! Each component keeps a set of SVGD particles over latent graph
//! embeddings and network parameters. Coordinate ascent alternates between
//! row responsibilities, the Dirichlet posterior over mixing weights, and a
//! segment of particle updates per component. Expert beliefs enter through
//! each component's hard-constraint mask and per-particle elicitation
//! matrices.

use ndarray::{Array2, ArrayView2, Axis};
use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::gamma::digamma;

use crate::elicitation::{sample_elicitation_matrices, ComponentBeliefs, ElicitationMatrix, SoftEvidence};
use crate::error::{Error, Result};
use crate::events::{EventSink, ProgressEvent};
use crate::graph::{
    acyclicity, acyclicity_with_grad, adjacency_as_f64, hard_graph, is_acyclic, logistic, log_latent_gaussian_prior,
    log_structure_prior, sample_graph, soft_graph, soft_graph_backprop, structure_prior_grad, Adjacency,
    EdgeConstraint, HardConstraintMask, LatentEmbedding, SoftGraph, StructurePrior, ACYCLIC_TOL,
};
use crate::likelihood::{
    log_param_prior_given, row_log_likelihoods, soft_log_likelihood_with_grad, weighted_log_likelihood,
    weighted_log_likelihood_with_grad, BnParams, Dataset, ModelKind, ParamPriorKind, DEFAULT_NOISE_VAR,
};
use crate::svgd::{svgd_step, KernelSpec, Particle, ParticleGrad, ParticleSet, Schedules};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PriorConfig {
    ErdosRenyi { edges_per_node: f64 },
    ScaleFree,
}

impl PriorConfig {
    pub fn resolve(&self, num_vars: usize) -> StructurePrior {
        match *self {
            PriorConfig::ErdosRenyi { edges_per_node } => {
                StructurePrior::erdos_renyi_for_degree(num_vars, edges_per_node)
            }
            PriorConfig::ScaleFree => StructurePrior::ScaleFree,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub num_components: usize,
    pub num_particles: usize,
    /// Latent dimension; `None` means equal to the number of variables.
    pub latent_dim: Option<usize>,
    pub model: ModelKind,
    pub noise_var: f64,
    pub sigma_z: f64,
    pub structure_prior: PriorConfig,
    pub schedules: Schedules,
    pub cavi_rounds: usize,
    pub early_round_steps: usize,
    pub kernel: KernelSpec,
    /// Graph samples per particle for the score-function gradient.
    pub graph_samples: usize,
    pub z_estimator: ZGradEstimator,
    pub param_prior: ParamPriorKind,
    pub dirichlet_prior: f64,
    pub max_restarts: usize,
    pub collapse_threshold: f64,
    /// Use latent-embedding importance weighting for responsibilities
    /// before the final annealing (otherwise hard graphs throughout).
    pub latent_responsibilities: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self::defaults(ModelKind::Linear)
    }
}

impl InferenceConfig {
    pub fn defaults(model: ModelKind) -> Self {
        let linear = model.is_linear();
        Self {
            num_components: 1,
            num_particles: 60,
            latent_dim: None,
            model,
            noise_var: DEFAULT_NOISE_VAR,
            sigma_z: 1.0,
            structure_prior: PriorConfig::ErdosRenyi { edges_per_node: 2.0 },
            schedules: Schedules {
                omega_slope: if linear { 0.2 } else { 0.02 },
                ..Schedules::default()
            },
            cavi_rounds: 10,
            early_round_steps: 50,
            kernel: KernelSpec {
                gamma_z: 5.0,
                gamma_theta: if linear { 500.0 } else { 1000.0 },
            },
            graph_samples: 4,
            z_estimator: ZGradEstimator::Reparam { tau: 1.0 },
            param_prior: ParamPriorKind::EdgeMasked,
            dirichlet_prior: 1.0,
            max_restarts: 5,
            collapse_threshold: 1e-12,
            latent_responsibilities: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_components == 0 {
            return Err(Error::config("num_components", "must be at least 1"));
        }
        if self.num_particles == 0 {
            return Err(Error::config("num_particles", "must be at least 1"));
        }
        if self.latent_dim == Some(0) {
            return Err(Error::config("latent_dim", "must be at least 1"));
        }
        if !(self.noise_var > 0.0) {
            return Err(Error::config("noise_var", "must be positive"));
        }
        if !(self.sigma_z > 0.0) {
            return Err(Error::config("sigma_z", "must be positive"));
        }
        if self.cavi_rounds == 0 {
            return Err(Error::config("cavi_rounds", "must be at least 1"));
        }
        if self.graph_samples == 0 {
            return Err(Error::config("graph_samples", "must be at least 1"));
        }
        if !(self.dirichlet_prior > 0.0) {
            return Err(Error::config("dirichlet_prior", "must be positive"));
        }
        if !(self.collapse_threshold >= 0.0) {
            return Err(Error::config("collapse_threshold", "must be nonnegative"));
        }
        if let ZGradEstimator::Reparam { tau } = self.z_estimator {
            if !(tau > 0.0) {
                return Err(Error::config("tau", "must be positive"));
            }
        }
        if let PriorConfig::ErdosRenyi { edges_per_node } = self.structure_prior {
            if !(edges_per_node > 0.0) {
                return Err(Error::config("edges_per_node", "must be positive"));
            }
        }
        self.schedules.validate()?;
        self.kernel.validate()?;
        let early = (self.cavi_rounds - 1) * self.early_round_steps;
        if self.schedules.total_steps <= early {
            return Err(Error::config(
                "total_steps",
                format!("must exceed the {early} steps spent in the early rounds"),
            ));
        }
        Ok(())
    }

    /// SVGD steps in 1-based round `u`: the early rounds are short and the
    /// last one takes the remainder of the budget.
    pub fn round_steps(&self, u: usize) -> usize {
        if u < self.cavi_rounds {
            self.early_round_steps
        } else {
            self.schedules.total_steps - (self.cavi_rounds - 1) * self.early_round_steps
        }
    }

    pub fn data_term(&self) -> DataTermSpec {
        DataTermSpec {
            estimator: self.z_estimator,
            param_prior: self.param_prior,
            graph_samples: self.graph_samples,
        }
    }

    pub fn latent_dim_for(&self, num_vars: usize) -> usize {
        self.latent_dim.unwrap_or(num_vars)
    }
}

/// A ChaCha stream keyed by the run seed and a tuple of labels.
pub fn derived_rng(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for l in labels {
        h.update(l.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

const TAG_INIT: u64 = 1;
const TAG_MATRIX: u64 = 2;
const TAG_RESP: u64 = 3;
const TAG_ASSIGN: u64 = 4;
const TAG_SVGD: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentState {
    pub particles: ParticleSet<Particle>,
    pub beliefs: ComponentBeliefs,
    /// One elicitation matrix per particle.
    pub matrices: Vec<ElicitationMatrix>,
    /// Particles whose hard graph is acyclic after the final annealing;
    /// `None` before annealing.
    pub retained: Option<Vec<usize>>,
}

impl ComponentState {
    pub fn mask(&self) -> &HardConstraintMask {
        &self.beliefs.mask
    }

    pub fn retained_indices(&self) -> Vec<usize> {
        self.retained
            .clone()
            .unwrap_or_else(|| (0..self.particles.len()).collect())
    }

    /// Hard graphs `G_∞(Z)` of the retained particles.
    pub fn hard_graphs(&self) -> Vec<Adjacency> {
        self.retained_indices()
            .into_iter()
            .map(|i| hard_graph(&self.particles.particles[i].z, self.mask()))
            .collect()
    }

    /// Particle-averaged soft graph at temperature `omega`.
    pub fn mean_soft_graph(&self, omega: f64) -> Result<Array2<f64>> {
        let idx = self.retained_indices();
        let d = self.mask().num_vars();
        let mut acc = Array2::zeros((d, d));
        for &i in &idx {
            acc += &soft_graph(&self.particles.particles[i].z, omega, self.mask())?.probs;
        }
        Ok(acc / idx.len().max(1) as f64)
    }

    /// Resamples the per-particle elicitation matrices from the beliefs.
    pub fn resample_matrices<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let evidence = self.beliefs.soft_evidence();
        self.matrices = sample_elicitation_matrices(&evidence, self.particles.len(), rng);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureState {
    pub components: Vec<ComponentState>,
    /// `N × K`, rows sum to one.
    pub responsibilities: Array2<f64>,
    pub dirichlet_alpha: Vec<f64>,
    pub prior_alpha: Vec<f64>,
    pub cavi_round: usize,
    /// Number of completed warm-started refits.
    pub segment: usize,
    pub restarts: usize,
    pub converged: bool,
    pub annealed: bool,
    /// Times the importance weights were all invalid and uniform weights
    /// were used instead.
    pub weight_fallbacks: usize,
    pub seed: u64,
}

impl MixtureState {
    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// Hex SHA-256 of the serialized state.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("state serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn step(&self) -> usize {
        self.components.first().map_or(0, |c| c.particles.step)
    }
}

fn new_particles(
    num_vars: usize,
    config: &InferenceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ParticleSet<Particle>> {
    let l = config.latent_dim_for(num_vars);
    let particles = (0..config.num_particles)
        .map(|_| {
            Ok(Particle {
                z: LatentEmbedding::sample_prior(l, num_vars, config.sigma_z, rng)?,
                theta: BnParams::sample_prior(config.model, num_vars, config.noise_var, rng)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ParticleSet::new(particles)
}

/// Fresh particles drawn from the priors, uniform responsibilities, and
/// elicitation matrices sampled from the given beliefs.
pub fn initial_state(
    data: &Dataset,
    config: &InferenceConfig,
    beliefs: Vec<ComponentBeliefs>,
    seed: u64,
) -> Result<MixtureState> {
    config.validate()?;
    let k = config.num_components;
    let d = data.num_vars();
    if d < 2 {
        return Err(Error::config("num_vars", "data must have at least 2 variables"));
    }
    if beliefs.len() != k || beliefs.iter().any(|b| b.num_vars() != d) {
        return Err(Error::contract("one belief set of matching size per component required"));
    }
    let mut components = Vec::with_capacity(k);
    for (c, b) in beliefs.into_iter().enumerate() {
        let mut rng = derived_rng(seed, &[TAG_INIT, 0, 0, c as u64]);
        let mut comp = ComponentState {
            particles: new_particles(d, config, &mut rng)?,
            beliefs: b,
            matrices: Vec::new(),
            retained: None,
        };
        comp.resample_matrices(&mut derived_rng(seed, &[TAG_MATRIX, 0, c as u64]));
        components.push(comp);
    }
    let n = data.num_rows();
    let prior_alpha = vec![config.dirichlet_prior; k];
    Ok(MixtureState {
        components,
        responsibilities: Array2::from_elem((n, k), 1.0 / k as f64),
        dirichlet_alpha: prior_alpha.iter().map(|a| a + n as f64 / k as f64).collect(),
        prior_alpha,
        cavi_round: 0,
        segment: 0,
        restarts: 0,
        converged: false,
        annealed: false,
        weight_fallbacks: 0,
        seed,
    })
}

fn reinitialize(state: &mut MixtureState, data: &Dataset, config: &InferenceConfig) -> Result<()> {
    let d = data.num_vars();
    let (seg, rs) = (state.segment as u64, state.restarts as u64);
    for (c, comp) in state.components.iter_mut().enumerate() {
        let mut rng = derived_rng(state.seed, &[TAG_INIT, seg, rs, c as u64]);
        comp.particles = new_particles(d, config, &mut rng)?;
        comp.retained = None;
    }
    let (n, k) = state.responsibilities.dim();
    state.responsibilities = Array2::from_elem((n, k), 1.0 / k as f64);
    state.dirichlet_alpha = state.prior_alpha.iter().map(|a| a + n as f64 / k as f64).collect();
    Ok(())
}

/// Everything the latent prior needs besides the embedding itself.
#[derive(Clone, Copy, Debug)]
pub struct LatentPriorTerms<'a> {
    pub mask: &'a HardConstraintMask,
    pub structure_prior: StructurePrior,
    pub sigma_z: f64,
    pub beta: f64,
    pub omega: f64,
}

/// `log p(Z)` up to a constant, combining the Gaussian term, the structure
/// prior and the elicitation likelihood on the soft graph with the
/// acyclicity penalty `-β h(G_ω(Z))`, plus its gradient.
pub fn latent_log_prior(
    z: &LatentEmbedding,
    terms: &LatentPriorTerms<'_>,
    evidence: &[SoftEvidence],
) -> Result<(f64, Vec<f64>)> {
    let soft = soft_graph(z, terms.omega, terms.mask)?;
    let (gauss, mut grad) = log_latent_gaussian_prior(z, terms.sigma_z);
    let (h, grad_h) = acyclicity_with_grad(&soft.probs);
    let sp = log_structure_prior(&soft, &terms.structure_prior)?;
    let elic = crate::elicitation::elicitation_log_likelihood(evidence, &soft)?;
    let grad_probs = structure_prior_grad(&soft, &terms.structure_prior)? - &(grad_h * terms.beta);
    for (g, v) in grad.iter_mut().zip(soft_graph_backprop(z, &soft, &grad_probs)) {
        *g += v;
    }
    let grad_s = crate::elicitation::elicitation_grad_logits(evidence, &soft)?;
    for (g, v) in grad.iter_mut().zip(z.backprop_inner_products(&grad_s)) {
        *g += v;
    }
    Ok((gauss + sp + elic - terms.beta * h, grad))
}

fn softmax_weights(f: &[f64], fallbacks: &mut usize) -> Vec<f64> {
    let m = f.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        *fallbacks += 1;
        return vec![1.0 / f.len() as f64; f.len()];
    }
    let e: Vec<f64> = f
        .iter()
        .map(|&v| if v.is_finite() { (v - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Estimator for the latent gradient of the graph expectation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ZGradEstimator {
    /// Likelihood-ratio gradient `E_w[ω (G - G_ω(Z))]` over hard samples.
    ScoreFunction,
    /// Pathwise gradient through logistic-noise relaxed graphs
    /// `σ(τ (L + ω s))`, with the likelihood evaluated on soft adjacencies.
    Reparam { tau: f64 },
}

/// How the data term `log E_{p(G|Z)}[p(Θ | G) ∏_n p(x_n | G, Θ)]` is
/// differentiated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataTermSpec {
    pub estimator: ZGradEstimator,
    pub param_prior: ParamPriorKind,
    pub graph_samples: usize,
}

fn adjacency_f64(g: &Adjacency) -> Array2<f64> {
    g.mapv(f64::from)
}

/// Self-normalized Monte Carlo gradient of the data term, returning
/// `(∇_Z, ∇_Θ)`. The parameter gradient always uses hard graph samples;
/// the latent gradient follows `spec.estimator`. Weights come from the
/// same samples as the gradients they weight.
pub fn likelihood_grad<R: Rng + ?Sized>(
    particle: &Particle,
    rows: ArrayView2<f64>,
    soft: &SoftGraph,
    spec: &DataTermSpec,
    rng: &mut R,
    fallbacks: &mut usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let nt = particle.theta.len();
    let d = soft.num_vars();
    let m = spec.graph_samples;
    let mut graphs = Vec::with_capacity(m);
    let mut fs = Vec::with_capacity(m);
    let mut grads = Vec::with_capacity(m);
    for _ in 0..m {
        let g = sample_graph(soft, rng);
        let mut gt = vec![0.0; nt];
        let ll = weighted_log_likelihood_with_grad(rows, None, &g, &particle.theta, &mut gt, 1.0)?;
        let (lp, gp, _) = log_param_prior_given(&particle.theta, &adjacency_f64(&g), spec.param_prior);
        for (a, b) in gt.iter_mut().zip(gp) {
            *a += b;
        }
        graphs.push(g);
        fs.push(ll + lp);
        grads.push(gt);
    }
    let w = softmax_weights(&fs, fallbacks);
    let mut grad_theta = vec![0.0; nt];
    for (gt, &wm) in grads.iter().zip(&w) {
        for (a, b) in grad_theta.iter_mut().zip(gt) {
            *a += wm * b;
        }
    }
    let mut grad_s = Array2::zeros((d, d));
    match spec.estimator {
        ZGradEstimator::ScoreFunction => {
            for (g, &wm) in graphs.iter().zip(&w) {
                if wm == 0.0 {
                    continue;
                }
                for i in 0..d {
                    for j in 0..d {
                        if soft.mask.is_free(i, j) {
                            grad_s[[i, j]] += wm * soft.omega * (f64::from(g[[i, j]]) - soft.probs[[i, j]]);
                        }
                    }
                }
            }
        }
        ZGradEstimator::Reparam { tau } => {
            let s = particle.z.inner_products();
            let mut relaxed = Vec::with_capacity(m);
            let mut fs = Vec::with_capacity(m);
            let mut ggs = Vec::with_capacity(m);
            for _ in 0..m {
                let mut gs = Array2::zeros((d, d));
                for i in 0..d {
                    for j in 0..d {
                        gs[[i, j]] = if soft.mask.is_free(i, j) {
                            let u: f64 = rng.sample(Open01);
                            logistic(tau * ((u / (1.0 - u)).ln() + soft.omega * s[[i, j]]))
                        } else {
                            soft.probs[[i, j]]
                        };
                    }
                }
                let mut gg = Array2::zeros((d, d));
                let ll = soft_log_likelihood_with_grad(rows, &gs, &particle.theta, &mut gg)?;
                let (lp, _, gpg) = log_param_prior_given(&particle.theta, &gs, spec.param_prior);
                gg += &gpg;
                relaxed.push(gs);
                fs.push(ll + lp);
                ggs.push(gg);
            }
            let w = softmax_weights(&fs, fallbacks);
            for ((gs, gg), &wm) in relaxed.iter().zip(&ggs).zip(&w) {
                if wm == 0.0 {
                    continue;
                }
                for i in 0..d {
                    for j in 0..d {
                        if soft.mask.is_free(i, j) {
                            let p = gs[[i, j]];
                            grad_s[[i, j]] += wm * gg[[i, j]] * tau * soft.omega * p * (1.0 - p);
                        }
                    }
                }
            }
        }
    }
    Ok((particle.z.backprop_inner_products(&grad_s), grad_theta))
}

/// Full log-target gradient for one particle of one component.
pub fn particle_log_target_grad<R: Rng + ?Sized>(
    particle: &Particle,
    rows: ArrayView2<f64>,
    terms: &LatentPriorTerms<'_>,
    evidence: &[SoftEvidence],
    spec: &DataTermSpec,
    rng: &mut R,
    fallbacks: &mut usize,
) -> Result<ParticleGrad> {
    let (_, mut gz) = latent_log_prior(&particle.z, terms, evidence)?;
    let soft = soft_graph(&particle.z, terms.omega, terms.mask)?;
    let (lz, gt) = likelihood_grad(particle, rows, &soft, spec, rng, fallbacks)?;
    for (a, b) in gz.iter_mut().zip(lz) {
        *a += b;
    }
    Ok(ParticleGrad {
        latent: gz,
        params: gt,
    })
}

/// `(1/P) Σ_p log p(x_n | G_∞(Z_p), Θ_p)` over retained particles.
pub fn expected_loglik_hard(comp: &ComponentState, rows: ArrayView2<f64>) -> Result<Vec<f64>> {
    let idx = comp.retained_indices();
    let mut acc = vec![0.0; rows.nrows()];
    for &i in &idx {
        let p = &comp.particles.particles[i];
        let g = hard_graph(&p.z, comp.mask());
        for (a, v) in acc.iter_mut().zip(row_log_likelihoods(rows, &g, &p.theta)?) {
            *a += v;
        }
    }
    let inv = 1.0 / idx.len().max(1) as f64;
    Ok(acc.into_iter().map(|v| v * inv).collect())
}

/// Expected row log-likelihoods through the latent embeddings: graphs are
/// sampled from each particle's soft graph and importance-weighted by
/// `∏_n p(x_n | G, Θ)^{c_n}` with `c` the current responsibilities.
pub fn expected_loglik_latent<R: Rng + ?Sized>(
    comp: &ComponentState,
    rows: ArrayView2<f64>,
    weights: &[f64],
    omega: f64,
    graph_samples: usize,
    rng: &mut R,
    fallbacks: &mut usize,
) -> Result<Vec<f64>> {
    let n = rows.nrows();
    let mut acc = vec![0.0; n];
    let idx = comp.retained_indices();
    for &i in &idx {
        let p = &comp.particles.particles[i];
        let soft = soft_graph(&p.z, omega, comp.mask())?;
        let mut lls = Vec::with_capacity(graph_samples);
        let mut fs = Vec::with_capacity(graph_samples);
        for _ in 0..graph_samples {
            let g = sample_graph(&soft, rng);
            let ll = row_log_likelihoods(rows, &g, &p.theta)?;
            fs.push(ll.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>());
            lls.push(ll);
        }
        let w = softmax_weights(&fs, fallbacks);
        for (ll, wm) in lls.iter().zip(&w) {
            for (a, v) in acc.iter_mut().zip(ll) {
                *a += wm * v;
            }
        }
    }
    let inv = 1.0 / idx.len().max(1) as f64;
    Ok(acc.into_iter().map(|v| v * inv).collect())
}

/// Row-wise softmax of `E[log p(x_n | component k)] + E[log π_k]`.
/// `expected[k][n]` holds the expected log-likelihoods.
pub fn responsibilities_from_expected(expected: &[Vec<f64>], alpha: &[f64]) -> Result<Array2<f64>> {
    let k = expected.len();
    if k == 0 || alpha.len() != k {
        return Err(Error::contract("one expected log-likelihood vector and alpha per component"));
    }
    let n = expected[0].len();
    if expected.iter().any(|e| e.len() != n) {
        return Err(Error::contract("expected log-likelihood vectors differ in length"));
    }
    let total: f64 = alpha.iter().sum();
    let e_log_pi: Vec<f64> = alpha.iter().map(|&a| digamma(a) - digamma(total)).collect();
    let mut resp = Array2::zeros((n, k));
    let mut logits = vec![0.0; k];
    for r in 0..n {
        for c in 0..k {
            logits[c] = expected[c][r] + e_log_pi[c];
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::NumericOverflow {
                context: format!("responsibility logits of row {r}"),
            });
        }
        let s: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for c in 0..k {
            resp[[r, c]] = (logits[c] - m).exp() / s;
        }
    }
    Ok(resp)
}

/// `α*_k = α_k + Σ_n r_nk`.
pub fn update_mixing_weights(responsibilities: &Array2<f64>, prior_alpha: &[f64]) -> Vec<f64> {
    responsibilities
        .sum_axis(Axis(0))
        .iter()
        .zip(prior_alpha)
        .map(|(s, a)| a + s)
        .collect()
}

fn responsibilities_entropy(resp: &Array2<f64>) -> f64 {
    let n = resp.nrows().max(1) as f64;
    resp.iter().filter(|&&r| r > 0.0).map(|&r| -r * r.ln()).sum::<f64>() / n
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Failure {
    Collapse,
    NoAcyclicParticle,
}

/// Recomputes responsibilities and mixing weights. `latent_omega` selects
/// latent-embedding weighting at that temperature; `None` uses hard graphs.
fn refresh_responsibilities(
    state: &mut MixtureState,
    data: &Dataset,
    config: &InferenceConfig,
    latent_omega: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    let k = state.num_components();
    if k == 1 {
        state.responsibilities.fill(1.0);
    } else {
        let rows = data.rows.view();
        let mut expected = Vec::with_capacity(k);
        for c in 0..k {
            let comp = &state.components[c];
            let e = match latent_omega {
                Some(omega) => {
                    let w: Vec<f64> = state.responsibilities.column(c).to_vec();
                    expected_loglik_latent(
                        comp,
                        rows,
                        &w,
                        omega,
                        config.graph_samples,
                        rng,
                        &mut state.weight_fallbacks,
                    )?
                }
                None => expected_loglik_hard(comp, rows)?,
            };
            expected.push(e);
        }
        state.responsibilities = responsibilities_from_expected(&expected, &state.dirichlet_alpha)?;
    }
    state.dirichlet_alpha = update_mixing_weights(&state.responsibilities, &state.prior_alpha);
    let collapsed = state
        .responsibilities
        .sum_axis(Axis(0))
        .iter()
        .any(|&s| s < config.collapse_threshold);
    Ok(collapsed)
}

fn sample_assignments(resp: &Array2<f64>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    resp.rows()
        .into_iter()
        .map(|r| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (k, &p) in r.iter().enumerate() {
                acc += p;
                if u < acc {
                    return k;
                }
            }
            r.len() - 1
        })
        .collect()
}

fn rows_for(data: &Dataset, assignment: &[usize], k: usize) -> Array2<f64> {
    let idx: Vec<usize> = assignment
        .iter()
        .enumerate()
        .filter(|(_, &a)| a == k)
        .map(|(n, _)| n)
        .collect();
    data.rows.select(Axis(0), &idx)
}

fn mean_h(comp: &ComponentState, omega: f64) -> Result<f64> {
    let p = comp.particles.len().max(1) as f64;
    let mut total = 0.0;
    for part in &comp.particles.particles {
        total += acyclicity(&soft_graph(&part.z, omega, comp.mask())?.probs);
    }
    Ok(total / p)
}

fn run_attempt(
    state: &mut MixtureState,
    data: &Dataset,
    config: &InferenceConfig,
    sink: &mut dyn EventSink,
    allow_restart: bool,
) -> Result<Option<Failure>> {
    let k = state.num_components();
    let d = data.num_vars();
    let prior = config.structure_prior.resolve(d);
    let (seg, rs) = (state.segment as u64, state.restarts as u64);
    let mut failure = None;
    for comp in &mut state.components {
        comp.particles.reset_schedule();
        comp.retained = None;
    }
    state.annealed = false;
    for u in 1..=config.cavi_rounds {
        let mut rng = derived_rng(state.seed, &[TAG_RESP, seg, rs, u as u64]);
        let omega_now = config.schedules.omega(state.step().max(1));
        let latent = config.latent_responsibilities.then_some(omega_now);
        if refresh_responsibilities(state, data, config, latent, &mut rng)? {
            log::warn!("component collapse in round {u}");
            if allow_restart {
                return Ok(Some(Failure::Collapse));
            }
            failure = Some(Failure::Collapse);
        }
        let mut rng = derived_rng(state.seed, &[TAG_ASSIGN, seg, rs, u as u64]);
        let assignment = if k == 1 {
            vec![0; data.num_rows()]
        } else {
            sample_assignments(&state.responsibilities, &mut rng)
        };
        let steps = config.round_steps(u);
        let spec = config.data_term();
        for c in 0..k {
            let rows = rows_for(data, &assignment, c);
            let mut rng = derived_rng(state.seed, &[TAG_SVGD, seg, rs, u as u64, c as u64]);
            let comp = &mut state.components[c];
            let mut fallbacks = 0usize;
            let ComponentState {
                particles,
                beliefs,
                matrices,
                ..
            } = comp;
            for _ in 0..steps {
                svgd_step(particles, &config.kernel, config.schedules.learning_rate, |i, p, t| {
                    let terms = LatentPriorTerms {
                        mask: &beliefs.mask,
                        structure_prior: prior,
                        sigma_z: config.sigma_z,
                        beta: config.schedules.beta(t),
                        omega: config.schedules.omega(t),
                    };
                    let evidence = matrices.get(i).map(Vec::as_slice).unwrap_or(&[]);
                    particle_log_target_grad(p, rows.view(), &terms, evidence, &spec, &mut rng, &mut fallbacks)
                })?;
            }
            if fallbacks > 0 {
                log::warn!("component {c}: {fallbacks} uniform importance-weight fallbacks in round {u}");
            }
            state.weight_fallbacks += fallbacks;
        }
        state.cavi_round = u;
        emit_progress(state, config, sink, u)?;
    }
    // Final annealing: keep particles whose hard graph is a DAG.
    for (c, comp) in state.components.iter_mut().enumerate() {
        let keep: Vec<usize> = (0..comp.particles.len())
            .filter(|&i| {
                let g = hard_graph(&comp.particles.particles[i].z, comp.mask());
                is_acyclic(&g)
            })
            .collect();
        if keep.is_empty() {
            log::warn!("component {c}: no particle has an acyclic hard graph");
            if allow_restart {
                return Ok(Some(Failure::NoAcyclicParticle));
            }
            failure = Some(Failure::NoAcyclicParticle);
            comp.retained = None;
        } else {
            comp.retained = Some(keep);
        }
    }
    state.annealed = true;
    let mut rng = derived_rng(state.seed, &[TAG_RESP, seg, rs, config.cavi_rounds as u64 + 1]);
    if refresh_responsibilities(state, data, config, None, &mut rng)? {
        if allow_restart {
            return Ok(Some(Failure::Collapse));
        }
        failure = Some(Failure::Collapse);
    }
    emit_progress(state, config, sink, config.cavi_rounds + 1)?;
    Ok(failure)
}

fn emit_progress(
    state: &MixtureState,
    config: &InferenceConfig,
    sink: &mut dyn EventSink,
    round: usize,
) -> Result<()> {
    let omega = config.schedules.omega(state.step().max(1));
    let mean_h = state
        .components
        .iter()
        .map(|c| mean_h(c, omega))
        .collect::<Result<Vec<_>>>()?;
    sink.emit(&ProgressEvent {
        segment: state.segment,
        restart: state.restarts,
        round,
        mean_h,
        responsibilities_entropy: responsibilities_entropy(&state.responsibilities),
        alpha: state.dirichlet_alpha.clone(),
    })
}

/// Runs the coordinate-ascent schedule from the current particles, with
/// the restart policy. The returned state is flagged non-converged when
/// restarts run out.
pub fn fit(
    mut state: MixtureState,
    data: &Dataset,
    config: &InferenceConfig,
    sink: &mut dyn EventSink,
) -> Result<MixtureState> {
    config.validate()?;
    if state.num_components() != config.num_components {
        return Err(Error::contract("state and config disagree on the number of components"));
    }
    if state.responsibilities.nrows() != data.num_rows() {
        return Err(Error::contract("state and data disagree on the number of rows"));
    }
    loop {
        let allow = state.restarts < config.max_restarts;
        match run_attempt(&mut state, data, config, sink, allow)? {
            None => {
                state.converged = true;
                return Ok(state);
            }
            Some(f) if allow => {
                state.restarts += 1;
                log::info!("restart {} after {:?}", state.restarts, f);
                reinitialize(&mut state, data, config)?;
            }
            Some(f) => {
                log::warn!("restart budget exhausted ({f:?}); returning a non-converged state");
                state.converged = false;
                return Ok(state);
            }
        }
    }
}

/// Fits the mixture from scratch with no expert input.
pub fn run_cavi(data: &Dataset, config: &InferenceConfig, seed: u64, sink: &mut dyn EventSink) -> Result<MixtureState> {
    let beliefs = (0..config.num_components)
        .map(|k| ComponentBeliefs::new(k, data.num_vars()))
        .collect();
    let state = initial_state(data, config, beliefs, seed)?;
    fit(state, data, config, sink)
}

/// How a new inference segment starts after expert input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentStart {
    /// Redraw particles from the prior and reset responsibilities.
    Fresh,
    /// Keep the particles and responsibilities; only the schedule restarts.
    Warm,
}

/// Prepares a fitted state for another segment after new expert input:
/// bumps the segment counter, resamples elicitation matrices and, for a
/// fresh start, redraws the particles.
pub fn begin_segment(state: &mut MixtureState, data: &Dataset, config: &InferenceConfig, start: SegmentStart) -> Result<()> {
    state.segment += 1;
    state.restarts = 0;
    state.converged = false;
    let (seed, seg) = (state.seed, state.segment as u64);
    for (c, comp) in state.components.iter_mut().enumerate() {
        comp.resample_matrices(&mut derived_rng(seed, &[TAG_MATRIX, seg, c as u64]));
    }
    if start == SegmentStart::Fresh {
        reinitialize(state, data, config)?;
    }
    Ok(())
}

/// Responsibilities of new rows under the fitted state, using the
/// retained particles' hard graphs and the current mixing weights.
pub fn predict_responsibilities(state: &MixtureState, rows: ArrayView2<f64>) -> Result<Array2<f64>> {
    let expected = state
        .components
        .iter()
        .map(|c| expected_loglik_hard(c, rows))
        .collect::<Result<Vec<_>>>()?;
    responsibilities_from_expected(&expected, &state.dirichlet_alpha)
}

/// Log joint used to pick a component's MAP particle: responsibility-weighted
/// data log-likelihood under the hard graph, parameter prior and structure
/// prior of the hard graph.
pub fn particle_log_joint(
    particle: &Particle,
    mask: &HardConstraintMask,
    rows: ArrayView2<f64>,
    weights: Option<&[f64]>,
    prior: &StructurePrior,
    param_prior: ParamPriorKind,
) -> Result<f64> {
    let g = hard_graph(&particle.z, mask);
    let ll = weighted_log_likelihood(rows, weights, &g, &particle.theta)?;
    let (lp, _, _) = log_param_prior_given(&particle.theta, &adjacency_f64(&g), param_prior);
    let soft = SoftGraph {
        probs: adjacency_as_f64(&g),
        omega: 1.0,
        mask: mask.clone(),
    };
    Ok(ll + lp + log_structure_prior(&soft, prior)?)
}

/// Index (into all particles) of the retained particle with the highest log joint.
pub fn map_particle(
    comp: &ComponentState,
    data: &Dataset,
    weights: Option<&[f64]>,
    prior: &StructurePrior,
    param_prior: ParamPriorKind,
) -> Result<usize> {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for i in comp.retained_indices() {
        let v = particle_log_joint(&comp.particles.particles[i], comp.mask(), data.rows.view(), weights, prior, param_prior)?;
        if v > best.1 || best.0 == usize::MAX {
            best = (i, v);
        }
    }
    Ok(best.0)
}

/// Whether every retained particle's hard graph has `h < ACYCLIC_TOL`.
pub fn retained_are_acyclic(comp: &ComponentState) -> bool {
    comp.hard_graphs()
        .iter()
        .all(|g| acyclicity(&adjacency_as_f64(g)) < ACYCLIC_TOL)
}

/// True when the mask pins every off-diagonal entry.
pub fn mask_is_complete(mask: &HardConstraintMask) -> bool {
    let d = mask.num_vars();
    (0..d).all(|i| (0..d).all(|j| i == j || mask.get(i, j) != EdgeConstraint::Free))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_two_components() {
        let resp = responsibilities_from_expected(&[vec![-1.0], vec![-3.0]], &[1.0, 1.0]).unwrap();
        assert!((resp[[0, 0]] - 0.8808).abs() < 1e-4);
        assert!((resp[[0, 1]] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn identical_components_split_evenly() {
        let resp = responsibilities_from_expected(&[vec![-2.0, 5.0], vec![-2.0, 5.0]], &[3.0, 3.0]).unwrap();
        assert!(resp.iter().all(|&r| r == 0.5));
    }

    #[test]
    fn mixing_weight_examples() {
        let mut resp = Array2::zeros((100, 2));
        for n in 0..30 {
            resp[[n, 0]] = 1.0;
        }
        for n in 30..100 {
            resp[[n, 1]] = 1.0;
        }
        assert_eq!(update_mixing_weights(&resp, &[1.0, 1.0]), vec![31.0, 71.0]);
        let mut all_first = Array2::zeros((10, 2));
        all_first.column_mut(0).fill(1.0);
        assert_eq!(update_mixing_weights(&all_first, &[1.0, 1.0]), vec![11.0, 1.0]);
    }

    #[test]
    fn round_steps_sum_to_total() {
        let c = InferenceConfig::defaults(ModelKind::Linear);
        let total: usize = (1..=c.cavi_rounds).map(|u| c.round_steps(u)).sum();
        assert_eq!(total, 6000);
        assert_eq!(c.round_steps(10), 5550);
    }

    #[test]
    fn derived_streams_differ() {
        let a: u64 = derived_rng(1, &[1, 2]).gen();
        let b: u64 = derived_rng(1, &[2, 1]).gen();
        let c: u64 = derived_rng(1, &[1, 2]).gen();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
