//! Expert edge beliefs: the imaginary-observation user model, the
//! elicitation likelihood on the soft graph, per-particle elicitation
//! matrices and hard-constraint registration.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeConstraint, HardConstraintMask, SoftGraph};

/// Responses within this distance of 0 or 1 become hard constraints.
pub const DEFAULT_HARD_EPS: f64 = 1e-3;

const PROB_CLAMP: f64 = 1e-12;
// Guards the floor against representation error, e.g. 0.7·18 - 9 = 3.5999...
const FLOOR_SLACK: f64 = 1e-9;

pub type Edge = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertPriorHyper {
    pub alpha0: f64,
    pub beta0: f64,
}

impl ExpertPriorHyper {
    pub const SYNTHETIC: Self = Self {
        alpha0: 10.0,
        beta0: 10.0,
    };
    pub const REAL_DATA: Self = Self {
        alpha0: 1000.0,
        beta0: 1000.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 1.0) || !(self.beta0 > 1.0) {
            return Err(Error::config("alpha0/beta0", "both must exceed 1"));
        }
        Ok(())
    }

    pub fn mode(&self) -> f64 {
        (self.alpha0 - 1.0) / (self.alpha0 + self.beta0 - 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImaginedObs {
    pub n: u64,
    pub k: u64,
}

/// Imaginary Bernoulli observations `(n, k)` whose Beta posterior mode
/// reproduces the expert's stated probability.
pub fn map_response_to_observations(psi_star: f64, hyper: &ExpertPriorHyper) -> Result<ImaginedObs> {
    hyper.validate()?;
    if !(psi_star > 0.0 && psi_star < 1.0) {
        return Err(Error::contract(format!(
            "soft response must lie strictly inside (0, 1), got {psi_star}"
        )));
    }
    let (a, b) = (hyper.alpha0, hyper.beta0);
    let mode = hyper.mode();
    if psi_star == mode {
        return Ok(ImaginedObs { n: 0, k: 0 });
    }
    let raw = if psi_star > mode {
        (psi_star * (a + b - 2.0) - a + 1.0) / (1.0 - psi_star)
    } else {
        (a - 1.0 - psi_star * (a + b - 2.0)) / psi_star
    };
    let n = (raw + FLOOR_SLACK).floor().max(0.0);
    if !n.is_finite() || n > u32::MAX as f64 {
        return Err(Error::NumericOverflow {
            context: format!("imaginary observation count for response {psi_star}"),
        });
    }
    let n = n as u64;
    let k = if psi_star > mode { n } else { 0 };
    Ok(ImaginedObs { n, k })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    HardPresent,
    HardAbsent,
    Soft,
}

pub fn classify_response(psi_star: f64, eps: f64) -> ResponseKind {
    if psi_star >= 1.0 - eps {
        ResponseKind::HardPresent
    } else if psi_star <= eps {
        ResponseKind::HardAbsent
    } else {
        ResponseKind::Soft
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElicitationRecord {
    pub component: usize,
    pub edge: Edge,
    pub psi_star: f64,
    pub kind: ResponseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imagined: Option<ImaginedObs>,
    /// Wall-clock receipt time, only set for live sessions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
}

/// One soft response as seen by a single particle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftEvidence {
    pub edge: Edge,
    pub psi_star: f64,
    pub obs: ImaginedObs,
}

/// The soft responses a particle actually uses.
pub type ElicitationMatrix = Vec<SoftEvidence>;

fn check_evidence_edge(ev: &SoftEvidence, soft: &SoftGraph) -> Result<()> {
    let (i, j) = ev.edge;
    let d = soft.num_vars();
    if i >= d || j >= d || i == j {
        return Err(Error::contract(format!("edge ({i}, {j}) invalid for d={d}")));
    }
    if !soft.mask.is_free(i, j) {
        return Err(Error::contract(format!(
            "soft evidence on hard-constrained edge ({i}, {j})"
        )));
    }
    Ok(())
}

/// `Σ [k ln G_ij + (n - k) ln(1 - G_ij)]` over the evidence.
pub fn elicitation_log_likelihood(evidence: &[SoftEvidence], soft: &SoftGraph) -> Result<f64> {
    let mut total = 0.0;
    for ev in evidence {
        check_evidence_edge(ev, soft)?;
        let p = soft.probs[[ev.edge.0, ev.edge.1]].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let (n, k) = (ev.obs.n as f64, ev.obs.k as f64);
        if k > 0.0 {
            total += k * p.ln();
        }
        if n > k {
            total += (n - k) * (1.0 - p).ln();
        }
    }
    Ok(total)
}

/// Gradient of [`elicitation_log_likelihood`] with respect to the inner
/// products `s_ij`, evaluated in logit space as `ω (k - n G_ij)`.
pub fn elicitation_grad_logits(evidence: &[SoftEvidence], soft: &SoftGraph) -> Result<Array2<f64>> {
    let d = soft.num_vars();
    let mut grad = Array2::zeros((d, d));
    for ev in evidence {
        check_evidence_edge(ev, soft)?;
        let (i, j) = ev.edge;
        let p = soft.probs[[i, j]];
        let (n, k) = (ev.obs.n as f64, ev.obs.k as f64);
        grad[[i, j]] += soft.omega * (k - n * p);
    }
    Ok(grad)
}

/// Draws one elicitation matrix per particle. Each soft response is kept
/// with probability `max(ψ*, 1 - ψ*)` and otherwise replaced by an
/// uninformative 0.5 with no imaginary observations.
pub fn sample_elicitation_matrices<R: Rng + ?Sized>(
    evidence: &[SoftEvidence],
    num_particles: usize,
    rng: &mut R,
) -> Vec<ElicitationMatrix> {
    (0..num_particles)
        .map(|_| {
            evidence
                .iter()
                .map(|ev| {
                    let keep = ev.psi_star.max(1.0 - ev.psi_star);
                    if rng.gen::<f64>() < keep {
                        *ev
                    } else {
                        SoftEvidence {
                            edge: ev.edge,
                            psi_star: 0.5,
                            obs: ImaginedObs { n: 0, k: 0 },
                        }
                    }
                })
                .collect()
        })
        .collect()
}

/// Everything elicited so far for one mixture component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentBeliefs {
    pub component: usize,
    pub mask: HardConstraintMask,
    /// Latest record per edge, in registration order.
    pub records: Vec<ElicitationRecord>,
    /// Edges ever queried for this component.
    pub queried: BTreeSet<Edge>,
    /// Pairs the user asked never to be queried.
    pub excluded: BTreeSet<Edge>,
}

impl ComponentBeliefs {
    pub fn new(component: usize, num_vars: usize) -> Self {
        Self {
            component,
            mask: HardConstraintMask::new(num_vars),
            records: Vec::new(),
            queried: BTreeSet::new(),
            excluded: BTreeSet::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.mask.num_vars()
    }

    /// Records a response. Near-certain answers pin the edge in the mask;
    /// the rest become imaginary observations. A repeated edge replaces
    /// the earlier answer. A "present" answer that would close a cycle of
    /// required edges is kept as a strong soft belief instead.
    pub fn register_response(
        &mut self,
        edge: Edge,
        psi_star: f64,
        hyper: &ExpertPriorHyper,
        eps: f64,
        timestamp_ms: Option<u64>,
    ) -> Result<ElicitationRecord> {
        let d = self.num_vars();
        let (i, j) = edge;
        if i >= d || j >= d || i == j {
            return Err(Error::contract(format!("edge ({i}, {j}) invalid for d={d}")));
        }
        if !(0.0..=1.0).contains(&psi_star) {
            return Err(Error::contract(format!("response {psi_star} outside [0, 1]")));
        }
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::config("hard_eps", "must lie in (0, 0.5)"));
        }
        if let Some(pos) = self.records.iter().position(|r| r.edge == edge) {
            log::info!(
                "component {}: replacing earlier response on edge ({i}, {j})",
                self.component
            );
            let old = self.records.remove(pos);
            if old.kind != ResponseKind::Soft {
                self.mask.set(i, j, EdgeConstraint::Free)?;
            }
        }
        let mut kind = classify_response(psi_star, eps);
        let mut effective = psi_star;
        match kind {
            ResponseKind::HardPresent => {
                if self.mask.set(i, j, EdgeConstraint::Required).is_err() {
                    log::warn!(
                        "component {}: required edge ({i}, {j}) would close a cycle; keeping it as a soft belief",
                        self.component
                    );
                    kind = ResponseKind::Soft;
                    effective = 1.0 - 2.0 * eps;
                }
            }
            ResponseKind::HardAbsent => self.mask.set(i, j, EdgeConstraint::Forbidden)?,
            ResponseKind::Soft => {}
        }
        let imagined = match kind {
            ResponseKind::Soft => Some(map_response_to_observations(effective, hyper)?),
            _ => None,
        };
        let record = ElicitationRecord {
            component: self.component,
            edge,
            psi_star: effective,
            kind,
            imagined,
            timestamp_ms,
        };
        self.records.push(record.clone());
        self.queried.insert(edge);
        Ok(record)
    }

    /// Soft records as evidence, without per-particle resampling.
    pub fn soft_evidence(&self) -> Vec<SoftEvidence> {
        self.records
            .iter()
            .filter_map(|r| {
                r.imagined.map(|obs| SoftEvidence {
                    edge: r.edge,
                    psi_star: r.psi_star,
                    obs,
                })
            })
            .collect()
    }
}
