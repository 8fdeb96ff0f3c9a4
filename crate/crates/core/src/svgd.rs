//! Stein variational gradient descent with an additive squared-exponential
//! kernel and per-coordinate RMSProp step sizes.
//!
//! The engine never looks inside a particle's model: it only sees two flat
//! blocks of coordinates (latent and parameter) and asks a caller-supplied
//! oracle for the gradient of the log target at each particle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::LatentEmbedding;
use crate::likelihood::BnParams;

pub const RMS_DECAY: f64 = 0.9;
pub const RMS_EPS: f64 = 1e-8;

/// A point in the joint space seen by the kernel.
pub trait SteinParticle: Clone {
    fn latent(&self) -> &[f64];
    fn latent_mut(&mut self) -> &mut [f64];
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub z: LatentEmbedding,
    pub theta: BnParams,
}

impl SteinParticle for Particle {
    fn latent(&self) -> &[f64] {
        self.z.as_slice()
    }
    fn latent_mut(&mut self) -> &mut [f64] {
        self.z.as_mut_slice()
    }
    fn params(&self) -> &[f64] {
        self.theta.as_slice()
    }
    fn params_mut(&mut self) -> &mut [f64] {
        self.theta.as_mut_slice()
    }
}

/// Plain vectors, for targets that are not Bayesian networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VecParticle {
    pub latent: Vec<f64>,
    pub params: Vec<f64>,
}

impl SteinParticle for VecParticle {
    fn latent(&self) -> &[f64] {
        &self.latent
    }
    fn latent_mut(&mut self) -> &mut [f64] {
        &mut self.latent
    }
    fn params(&self) -> &[f64] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
}

/// Gradient of the log target at one particle, split like the particle.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParticleGrad {
    pub latent: Vec<f64>,
    pub params: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub gamma_z: f64,
    pub gamma_theta: f64,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_z > 0.0) {
            return Err(Error::config("gamma_z", "must be positive"));
        }
        if !(self.gamma_theta > 0.0) {
            return Err(Error::config("gamma_theta", "must be positive"));
        }
        Ok(())
    }
}

/// Linear annealing schedules `β_t = beta_slope · t`, `ω_t = omega_slope · t`.
/// Missing fields take the linear-model defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedules {
    pub beta_slope: f64,
    pub omega_slope: f64,
    pub learning_rate: f64,
    pub total_steps: usize,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            beta_slope: 1.0,
            omega_slope: 0.2,
            learning_rate: 0.005,
            total_steps: 6000,
        }
    }
}

impl Schedules {
    pub fn beta(&self, t: usize) -> f64 {
        self.beta_slope * t as f64
    }

    pub fn omega(&self, t: usize) -> f64 {
        self.omega_slope * t as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_slope >= 0.0) {
            return Err(Error::config("beta_slope", "must be nonnegative"));
        }
        if !(self.omega_slope > 0.0) {
            return Err(Error::config("omega_slope", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be at least 1"));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `exp(-‖ΔZ‖²/γ_Z) + exp(-‖ΔΘ‖²/γ_Θ)`.
pub fn additive_se_kernel<P: SteinParticle>(a: &P, b: &P, spec: &KernelSpec) -> f64 {
    let (kz, kt) = kernel_parts(a, b, spec);
    kz + kt
}

fn kernel_parts<P: SteinParticle>(a: &P, b: &P, spec: &KernelSpec) -> (f64, f64) {
    (
        (-sq_dist(a.latent(), b.latent()) / spec.gamma_z).exp(),
        (-sq_dist(a.params(), b.params()) / spec.gamma_theta).exp(),
    )
}

/// Gradient of the kernel with respect to its first argument.
pub fn additive_se_kernel_grad<P: SteinParticle>(a: &P, b: &P, spec: &KernelSpec) -> ParticleGrad {
    let (kz, kt) = kernel_parts(a, b, spec);
    let cz = -2.0 * kz / spec.gamma_z;
    let ct = -2.0 * kt / spec.gamma_theta;
    ParticleGrad {
        latent: a.latent().iter().zip(b.latent()).map(|(x, y)| cz * (x - y)).collect(),
        params: a.params().iter().zip(b.params()).map(|(x, y)| ct * (x - y)).collect(),
    }
}

/// Running mean of squared updates, one per coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsState {
    pub latent: Vec<f64>,
    pub params: Vec<f64>,
}

impl RmsState {
    fn zeros_like<P: SteinParticle>(p: &P) -> Self {
        Self {
            latent: vec![0.0; p.latent().len()],
            params: vec![0.0; p.params().len()],
        }
    }
}

/// One RMSProp ascent step on a flat block: `v ← ρv + (1-ρ)φ²`,
/// `x ← x + η φ / sqrt(v + ε)`.
pub fn rmsprop_ascent(x: &mut [f64], v: &mut [f64], phi: &[f64], lr: f64) {
    for ((xi, vi), &g) in x.iter_mut().zip(v.iter_mut()).zip(phi) {
        *vi = RMS_DECAY * *vi + (1.0 - RMS_DECAY) * g * g;
        *xi += lr * g / (*vi + RMS_EPS).sqrt();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet<P> {
    pub particles: Vec<P>,
    pub rms: Vec<RmsState>,
    /// Number of steps taken so far; the next step is `step + 1`.
    pub step: usize,
}

impl<P: SteinParticle> ParticleSet<P> {
    pub fn new(particles: Vec<P>) -> Result<Self> {
        let first = particles
            .first()
            .ok_or_else(|| Error::config("num_particles", "must be at least 1"))?;
        let (nl, np) = (first.latent().len(), first.params().len());
        if particles
            .iter()
            .any(|p| p.latent().len() != nl || p.params().len() != np)
        {
            return Err(Error::contract("particles must share shapes"));
        }
        let rms = particles.iter().map(RmsState::zeros_like).collect();
        Ok(Self {
            particles,
            rms,
            step: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Clears the step counter and the RMSProp accumulators.
    pub fn reset_schedule(&mut self) {
        self.step = 0;
        for (r, p) in self.rms.iter_mut().zip(&self.particles) {
            *r = RmsState::zeros_like(p);
        }
    }

    /// Keeps only the particles at the given indices.
    pub fn retain_indices(&mut self, keep: &[usize]) {
        self.particles = keep.iter().map(|&i| self.particles[i].clone()).collect();
        self.rms = keep.iter().map(|&i| self.rms[i].clone()).collect();
    }
}

fn check_finite(values: &[f64], particle: usize, term: &'static str, step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            particle,
            term,
            step,
        })
    }
}

/// Stein variational direction for every particle given their log-target
/// gradients.
pub fn stein_directions<P: SteinParticle>(
    particles: &[P],
    grads: &[ParticleGrad],
    kernel: &KernelSpec,
) -> Vec<ParticleGrad> {
    let n = particles.len();
    let inv = 1.0 / n as f64;
    let mut out = Vec::with_capacity(n);
    for xi in particles {
        let mut phi = ParticleGrad {
            latent: vec![0.0; xi.latent().len()],
            params: vec![0.0; xi.params().len()],
        };
        for (j, xj) in particles.iter().enumerate() {
            let (kz, kt) = kernel_parts(xj, xi, kernel);
            let k = kz + kt;
            let cz = -2.0 * kz / kernel.gamma_z;
            let ct = -2.0 * kt / kernel.gamma_theta;
            let gj = &grads[j];
            for (g, (a, (xj_l, xi_l))) in phi
                .latent
                .iter_mut()
                .zip(gj.latent.iter().zip(xj.latent().iter().zip(xi.latent())))
            {
                *g += k * a + cz * (xj_l - xi_l);
            }
            for (g, (a, (xj_p, xi_p))) in phi
                .params
                .iter_mut()
                .zip(gj.params.iter().zip(xj.params().iter().zip(xi.params())))
            {
                *g += k * a + ct * (xj_p - xi_p);
            }
        }
        for g in phi.latent.iter_mut().chain(phi.params.iter_mut()) {
            *g *= inv;
        }
        out.push(phi);
    }
    out
}

/// Advances the set by one step. The oracle receives `(index, particle, t)`
/// with `t` the 1-based index of the step being taken.
pub fn svgd_step<P, F>(set: &mut ParticleSet<P>, kernel: &KernelSpec, learning_rate: f64, mut oracle: F) -> Result<()>
where
    P: SteinParticle,
    F: FnMut(usize, &P, usize) -> Result<ParticleGrad>,
{
    let t = set.step + 1;
    let mut grads = Vec::with_capacity(set.len());
    for (i, p) in set.particles.iter().enumerate() {
        let g = oracle(i, p, t)?;
        if g.latent.len() != p.latent().len() || g.params.len() != p.params().len() {
            return Err(Error::contract("gradient oracle returned the wrong shape"));
        }
        check_finite(&g.latent, i, "latent gradient", t)?;
        check_finite(&g.params, i, "parameter gradient", t)?;
        grads.push(g);
    }
    let phis = stein_directions(&set.particles, &grads, kernel);
    for (i, phi) in phis.iter().enumerate() {
        check_finite(&phi.latent, i, "latent update", t)?;
        check_finite(&phi.params, i, "parameter update", t)?;
    }
    for ((p, r), phi) in set.particles.iter_mut().zip(set.rms.iter_mut()).zip(&phis) {
        rmsprop_ascent(p.latent_mut(), &mut r.latent, &phi.latent, learning_rate);
        rmsprop_ascent(p.params_mut(), &mut r.params, &phi.params, learning_rate);
    }
    set.step = t;
    Ok(())
}
