//! Expert-in-the-loop inference: fit the mixture, ask the expert about the
//! most informative edges of every component, fold the answers into the
//! component beliefs and refit, until the query budget is spent.
//!
//! [`ElicitationSession`] is a resumable state machine so the same code
//! drives both the in-process loop and the HTTP service.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bed::{design_space, select_component_queries, BedConfig, Query, Selection};
use crate::elicitation::{ComponentBeliefs, Edge, ElicitationRecord, ExpertPriorHyper, DEFAULT_HARD_EPS};
use crate::error::{Error, Result};
use crate::events::EventSink;
use crate::graph::Adjacency;
use crate::likelihood::Dataset;
use crate::mixture::{begin_segment, derived_rng, fit, initial_state, InferenceConfig, MixtureState, SegmentStart};
use crate::oracle::OracleSpec;

const TAG_QUERY: u64 = 6;
const TAG_ORACLE: u64 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElicitationConfig {
    /// Queries asked per component in each round.
    pub queries_per_component: usize,
    /// Number of query rounds; the budget is `queries_per_component × rounds`.
    pub rounds: usize,
    pub hyper: ExpertPriorHyper,
    pub hard_eps: f64,
    pub bed: BedConfig,
    pub segment_start: SegmentStart,
}

impl Default for ElicitationConfig {
    fn default() -> Self {
        Self {
            queries_per_component: 5,
            rounds: 0,
            hyper: ExpertPriorHyper::SYNTHETIC,
            hard_eps: DEFAULT_HARD_EPS,
            bed: BedConfig::default(),
            segment_start: SegmentStart::Fresh,
        }
    }
}

impl ElicitationConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if !(self.hard_eps > 0.0 && self.hard_eps < 0.5) {
            return Err(Error::config("hard_eps", "must lie in (0, 0.5)"));
        }
        self.bed.simulator.validate()?;
        if let crate::bed::EigEstimator::Nmc { samples } = self.bed.estimator {
            if samples == 0 {
                return Err(Error::config("eig_samples", "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn budget(&self) -> usize {
        self.queries_per_component * self.rounds
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Inferring,
    AwaitingResponses,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BudgetExhausted,
    DesignSpaceEmpty,
    Timeout,
    Abort,
}

/// What a responder returns for one query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Answer {
    Psi(f64),
    Stop(StopReason),
}

pub trait QueryResponder {
    fn respond(&mut self, query: &Query) -> Result<Answer>;
}

/// Simulated expert. Each `(component, edge)` has its own random stream,
/// so the answer to a query does not depend on which queries came before.
#[derive(Clone, Debug)]
pub struct OracleResponder {
    pub spec: OracleSpec,
    pub seed: u64,
}

impl OracleResponder {
    pub fn new(spec: OracleSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, seed })
    }

    pub fn answer(&self, component: usize, edge: Edge) -> Result<f64> {
        let mut rng = derived_rng(
            self.seed,
            &[TAG_ORACLE, component as u64, edge.0 as u64, edge.1 as u64],
        );
        self.spec.respond(edge, component, &mut rng)
    }
}

impl QueryResponder for OracleResponder {
    fn respond(&mut self, query: &Query) -> Result<Answer> {
        Ok(Answer::Psi(self.answer(query.component, query.edge)?))
    }
}

/// Hard graphs of every component after one inference segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSnapshot {
    pub segment: usize,
    pub queries_answered: usize,
    /// `hard_graphs[k]` lists the retained particles' graphs of component `k`.
    pub hard_graphs: Vec<Vec<Adjacency>>,
    pub converged: bool,
    pub restarts: usize,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElicitationSession {
    pub inference: InferenceConfig,
    pub elicitation: ElicitationConfig,
    pub state: MixtureState,
    pub phase: Phase,
    pub pending: Vec<Query>,
    pub records: Vec<ElicitationRecord>,
    pub rounds_done: usize,
    pub under_run: bool,
    pub snapshots: Vec<SegmentSnapshot>,
    pub stop_reason: Option<StopReason>,
}

impl ElicitationSession {
    /// A session in the `Inferring` phase. `beliefs` seeds each component's
    /// prior knowledge; `None` starts from empty beliefs.
    pub fn new(
        data: &Dataset,
        inference: InferenceConfig,
        elicitation: ElicitationConfig,
        beliefs: Option<Vec<ComponentBeliefs>>,
        seed: u64,
    ) -> Result<Self> {
        inference.validate()?;
        elicitation.validate()?;
        let d = data.num_vars();
        let beliefs =
            beliefs.unwrap_or_else(|| (0..inference.num_components).map(|k| ComponentBeliefs::new(k, d)).collect());
        let state = initial_state(data, &inference, beliefs, seed)?;
        Ok(Self {
            inference,
            elicitation,
            state,
            phase: Phase::Inferring,
            pending: Vec::new(),
            records: Vec::new(),
            rounds_done: 0,
            under_run: false,
            snapshots: Vec::new(),
            stop_reason: None,
        })
    }

    pub fn queries_answered(&self) -> usize {
        self.records.len()
    }

    fn require(&self, phase: Phase, action: &str) -> Result<()> {
        if self.phase != phase {
            return Err(Error::Phase(format!(
                "cannot {action} while the session is {:?}",
                self.phase
            )));
        }
        Ok(())
    }

    /// Runs one inference segment and moves to `AwaitingResponses` with a
    /// fresh query list, or to `Done` when the budget is spent.
    pub fn run_segment(&mut self, data: &Dataset, sink: &mut dyn EventSink) -> Result<()> {
        self.require(Phase::Inferring, "run inference")?;
        self.state = fit(self.state.clone(), data, &self.inference, sink)?;
        self.snapshots.push(SegmentSnapshot {
            segment: self.state.segment,
            queries_answered: self.queries_answered(),
            hard_graphs: self.state.components.iter().map(|c| c.hard_graphs()).collect(),
            converged: self.state.converged,
            restarts: self.state.restarts,
            digest: self.state.digest(),
        });
        if self.rounds_done >= self.elicitation.rounds || self.elicitation.queries_per_component == 0 {
            self.finish(StopReason::BudgetExhausted);
            return Ok(());
        }
        let selection = self.select_queries()?;
        self.under_run |= selection.under_run;
        if selection.queries.is_empty() {
            self.finish(StopReason::DesignSpaceEmpty);
        } else {
            self.pending = selection.queries;
            self.phase = Phase::AwaitingResponses;
        }
        Ok(())
    }

    /// Top queries per component by expected information gain, computed on
    /// the soft graphs at the current temperature.
    pub fn select_queries(&self) -> Result<Selection> {
        let omega = self.inference.schedules.omega(self.state.step().max(1));
        let round_seed: u64 = derived_rng(self.state.seed, &[TAG_QUERY, self.state.segment as u64]).gen();
        let mut out = Selection::default();
        for (k, comp) in self.state.components.iter().enumerate() {
            let candidates = design_space(&comp.beliefs);
            let probs = comp
                .retained_indices()
                .into_iter()
                .map(|i| {
                    crate::graph::soft_graph(&comp.particles.particles[i].z, omega, comp.mask()).map(|s| s.probs)
                })
                .collect::<Result<Vec<_>>>()?;
            let (queries, under) = select_component_queries(
                k,
                &candidates,
                &probs,
                self.elicitation.queries_per_component,
                &self.elicitation.bed,
                round_seed,
            )?;
            out.under_run |= under;
            out.queries.extend(queries);
        }
        Ok(out)
    }

    /// Registers an answer to a pending query.
    pub fn submit_response(
        &mut self,
        component: usize,
        edge: Edge,
        psi_star: f64,
        timestamp_ms: Option<u64>,
    ) -> Result<ElicitationRecord> {
        self.require(Phase::AwaitingResponses, "accept responses")?;
        if !(0.0..=1.0).contains(&psi_star) {
            return Err(Error::InvalidResponse(format!("psi_star {psi_star} outside [0, 1]")));
        }
        let pos = self
            .pending
            .iter()
            .position(|q| q.component == component && q.edge == edge)
            .ok_or_else(|| {
                Error::InvalidResponse(format!(
                    "edge ({}, {}) of component {component} is not a pending query",
                    edge.0, edge.1
                ))
            })?;
        let record = self.state.components[component].beliefs.register_response(
            edge,
            psi_star,
            &self.elicitation.hyper,
            self.elicitation.hard_eps,
            timestamp_ms,
        )?;
        self.pending.remove(pos);
        self.records.push(record.clone());
        Ok(record)
    }

    /// Closes the current query round and prepares the next inference
    /// segment. Unanswered queries stay in the design space.
    pub fn advance(&mut self, data: &Dataset) -> Result<()> {
        self.require(Phase::AwaitingResponses, "advance")?;
        self.pending.clear();
        self.rounds_done += 1;
        begin_segment(&mut self.state, data, &self.inference, self.elicitation.segment_start)?;
        self.phase = Phase::Inferring;
        Ok(())
    }

    pub fn finish(&mut self, reason: StopReason) {
        self.pending.clear();
        self.phase = Phase::Done;
        self.stop_reason = Some(reason);
    }
}

/// Runs the full loop with an in-process responder. A responder that stops
/// (timeout or abort) ends the loop with the records gathered so far.
pub fn run_elicitation_loop(
    data: &Dataset,
    inference: InferenceConfig,
    elicitation: ElicitationConfig,
    beliefs: Option<Vec<ComponentBeliefs>>,
    seed: u64,
    responder: &mut dyn QueryResponder,
    sink: &mut dyn EventSink,
) -> Result<ElicitationSession> {
    let mut session = ElicitationSession::new(data, inference, elicitation, beliefs, seed)?;
    loop {
        session.run_segment(data, sink)?;
        if session.phase == Phase::Done {
            return Ok(session);
        }
        for q in session.pending.clone() {
            match responder.respond(&q)? {
                Answer::Psi(psi) => {
                    session.submit_response(q.component, q.edge, psi, None)?;
                }
                Answer::Stop(reason) => {
                    log::warn!("responder stopped ({reason:?}); ending elicitation early");
                    session.finish(reason);
                    return Ok(session);
                }
            }
        }
        session.advance(data)?;
    }
}
