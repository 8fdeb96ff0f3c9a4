//! Experiment suites: data generation, inference with simulated experts,
//! evaluation, strategy comparison and result files.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bed::QueryStrategy;
use crate::elicit_loop::{run_elicitation_loop, ElicitationConfig, ElicitationSession, OracleResponder};
use crate::error::{Error, Result};
use crate::events::{EventSink, ProgressEvent, VecSink};
use crate::gmm::{gmm_em_best, GmmConfig};
use crate::graph::{hard_graph, Adjacency};
use crate::likelihood::{row_log_likelihoods, Dataset};
use crate::metrics::{eshd, map_labels, map_neg_lppd, match_and_score, shd};
use crate::mixture::{derived_rng, map_particle, predict_responsibilities, InferenceConfig, MixtureState};
use crate::oracle::{OracleSpec, DEFAULT_RESPONSE_VARIANCE};
use crate::synthetic::{
    bayes_accuracy, generate_observations, load_csv, sample_mixture, sample_rows, GraphFamily, GroundTruthMixture,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

const TAG_TRUTH: u64 = 20;
const TAG_DATA: u64 = 21;
const TAG_ORACLE: u64 = 22;
const TAG_SPLIT: u64 = 23;
const TAG_BOOTSTRAP: u64 = 24;
const TAG_SEPARATION: u64 = 25;
const TAG_GMM: u64 = 26;

const SEPARATION_ATTEMPTS: u64 = 200;
const SEPARATION_PILOT_ROWS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    SingleComponentQuerying,
    TwoComponentMixture,
    RealData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_vars: usize,
    pub num_rows: usize,
    pub held_out_rows: usize,
    pub family: GraphFamily,
    pub edges_per_node: f64,
    /// Mixing proportions of the generating mixture; uniform over the
    /// inferred components when absent.
    pub mixing: Option<Vec<f64>>,
    /// Redraw the generating mixture until the true parameters classify at
    /// least this fraction of pilot rows correctly.
    pub min_separation: Option<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_vars: 5,
            num_rows: 200,
            held_out_rows: 100,
            family: GraphFamily::ErdosRenyi,
            edges_per_node: 2.0,
            mixing: None,
            min_separation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealDataSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub label_column: bool,
    #[serde(default = "default_true")]
    pub standardize: bool,
    /// Fraction of rows held out for evaluation.
    #[serde(default)]
    pub held_out_fraction: f64,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub reliability: f64,
    pub response_variance: f64,
    pub perfect: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            reliability: 0.9,
            response_variance: DEFAULT_RESPONSE_VARIANCE,
            perfect: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub suite: Suite,
    pub synthetic: Option<SyntheticSpec>,
    pub real_data: Option<RealDataSpec>,
    pub inference: InferenceConfig,
    pub elicitation: ElicitationConfig,
    pub oracle: OracleConfig,
    pub seeds: Vec<u64>,
    /// Fit the Gaussian-mixture baseline when labels are available.
    pub gmm_baseline: bool,
    pub output_dir: Option<PathBuf>,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "experiment".into(),
            suite: Suite::SingleComponentQuerying,
            synthetic: Some(SyntheticSpec::default()),
            real_data: None,
            inference: InferenceConfig::default(),
            elicitation: ElicitationConfig::default(),
            oracle: OracleConfig::default(),
            seeds: vec![0],
            gmm_baseline: false,
            output_dir: None,
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_live()?;
        if self.suite == Suite::RealData && self.elicitation.budget() > 0 {
            return Err(Error::config("rounds", "real data has no reference graphs to answer queries"));
        }
        Ok(())
    }

    /// Checks for a session answered by a live expert, which may query
    /// real data.
    pub fn validate_live(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed required"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        self.inference.validate()?;
        self.elicitation.validate()?;
        if !(0.0..=1.0).contains(&self.oracle.reliability) {
            return Err(Error::config("reliability", "must lie in [0, 1]"));
        }
        if !(self.oracle.response_variance > 0.0) {
            return Err(Error::config("response_variance", "must be positive"));
        }
        match self.suite {
            Suite::RealData => {
                let spec = self
                    .real_data
                    .as_ref()
                    .ok_or_else(|| Error::config("real_data", "required for the real_data suite"))?;
                if !(0.0..1.0).contains(&spec.held_out_fraction) {
                    return Err(Error::config("held_out_fraction", "must lie in [0, 1)"));
                }
            }
            _ => {
                let spec = self
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| Error::config("synthetic", "required for synthetic suites"))?;
                if spec.num_vars < 2 {
                    return Err(Error::config("num_vars", "must be at least 2"));
                }
                if spec.num_rows == 0 {
                    return Err(Error::config("num_rows", "must be at least 1"));
                }
                if !(spec.edges_per_node > 0.0) {
                    return Err(Error::config("edges_per_node", "must be positive"));
                }
                if let Some(m) = &spec.mixing {
                    if m.len() != self.inference.num_components {
                        return Err(Error::config("mixing", "one proportion per component required"));
                    }
                }
                if let Some(s) = spec.min_separation {
                    if !(0.0..=1.0).contains(&s) {
                        return Err(Error::config("min_separation", "must lie in [0, 1]"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the settings that affect results (output location
    /// and worker count excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.workers = 1;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }
}

/// Data for one seed, with the generating mixture when synthetic.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub data: Dataset,
    pub truth: Option<GroundTruthMixture>,
}

pub fn prepare_data(config: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    if config.suite == Suite::RealData {
        let spec = config.real_data.as_ref().expect("validated");
        let full = load_csv(&spec.path, spec.label_column, spec.standardize)?;
        return Ok(SeedData {
            data: split_held_out(full, spec.held_out_fraction, seed)?,
            truth: None,
        });
    }
    let spec = config.synthetic.as_ref().expect("validated");
    let k = config.inference.num_components;
    let mixing = spec.mixing.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
    let draw = |attempt: u64| {
        sample_mixture(
            spec.family,
            spec.num_vars,
            spec.edges_per_node,
            config.inference.model,
            config.inference.noise_var,
            mixing.clone(),
            seed,
            &mut derived_rng(seed, &[TAG_TRUTH, attempt]),
        )
    };
    let truth = match spec.min_separation {
        None => draw(0)?,
        Some(min) => {
            let mut found = None;
            for attempt in 0..SEPARATION_ATTEMPTS {
                let t = draw(attempt)?;
                let (rows, labels) =
                    sample_rows(&t, SEPARATION_PILOT_ROWS, &mut derived_rng(seed, &[TAG_SEPARATION, attempt]))?;
                if bayes_accuracy(&t, &rows, &labels)? >= min {
                    found = Some(t);
                    break;
                }
            }
            found.ok_or_else(|| {
                Error::config(
                    "min_separation",
                    format!("no mixture reached separation {min} in {SEPARATION_ATTEMPTS} draws"),
                )
            })?
        }
    };
    let data = generate_observations(&truth, spec.num_rows, spec.held_out_rows, &mut derived_rng(seed, &[TAG_DATA]))?;
    Ok(SeedData { data, truth: Some(truth) })
}

fn split_held_out(full: Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    let n = full.num_rows();
    let n_ho = (fraction * n as f64).floor() as usize;
    if n_ho == 0 {
        return Ok(full);
    }
    if n_ho >= n {
        return Err(Error::config("held_out_fraction", "leaves no training rows"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derived_rng(seed, &[TAG_SPLIT]));
    let (ho, tr) = idx.split_at(n_ho);
    let mut ds = Dataset::new(full.rows.select(Axis(0), tr))?.with_held_out(full.rows.select(Axis(0), ho))?;
    if let Some(l) = &full.labels {
        ds = ds.with_labels(
            tr.iter().map(|&i| l[i]).collect(),
            Some(ho.iter().map(|&i| l[i]).collect()),
        )?;
    }
    Ok(ds)
}

/// ESHD of every component after one inference segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub queries: usize,
    pub eshd: Vec<f64>,
    pub mean_eshd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub suite: Suite,
    pub seed: u64,
    pub strategy: QueryStrategy,
    pub reliability: f64,
    /// Set when the run failed; the metric fields are then empty.
    pub failure: Option<String>,
    pub converged: bool,
    pub restarts: usize,
    pub queries_answered: usize,
    pub under_run: bool,
    /// Per inferred component, matched to the generating component.
    pub eshd: Vec<f64>,
    pub mean_eshd: Option<f64>,
    pub trajectory: Vec<TrajectoryPoint>,
    /// SHD of each component's MAP particle graph to its matched truth.
    pub map_shd: Vec<usize>,
    pub accuracy: Option<f64>,
    pub in_sample_accuracy: Option<f64>,
    /// `permutation[component] = generating label`.
    pub permutation: Vec<usize>,
    pub map_neg_lppd: Option<f64>,
    pub gmm_accuracy: Option<f64>,
    pub mixing_weights: Vec<f64>,
    pub state_digest: Option<String>,
}

impl SeedReport {
    fn empty(config: &ExperimentConfig, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_hash: config.hash(),
            suite: config.suite,
            seed,
            strategy: config.elicitation.bed.strategy,
            reliability: config.oracle.reliability,
            failure: None,
            converged: false,
            restarts: 0,
            queries_answered: 0,
            under_run: false,
            eshd: Vec::new(),
            mean_eshd: None,
            trajectory: Vec::new(),
            map_shd: Vec::new(),
            accuracy: None,
            in_sample_accuracy: None,
            permutation: Vec::new(),
            map_neg_lppd: None,
            gmm_accuracy: None,
            mixing_weights: Vec::new(),
            state_digest: None,
        }
    }
}

/// Progress event tagged with the seed that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeededEvent {
    pub seed: u64,
    #[serde(flatten)]
    pub event: ProgressEvent,
}

/// Result of one seed: the report, its progress log and the final session.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub report: SeedReport,
    pub events: Vec<ProgressEvent>,
    pub session: Option<ElicitationSession>,
}

pub fn oracle_for(config: &ExperimentConfig, truth: &GroundTruthMixture) -> OracleSpec {
    OracleSpec {
        reference_graphs: truth.graphs(),
        reliability: config.oracle.reliability,
        response_variance: config.oracle.response_variance,
        perfect: config.oracle.perfect,
    }
}

/// Seed of the simulated expert's answer streams for a data seed.
pub fn oracle_seed(seed: u64) -> u64 {
    derived_rng(seed, &[TAG_ORACLE]).gen()
}

/// Runs one seed. Errors inside the run become a failure marker on the
/// report rather than aborting the suite.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> SeedRun {
    let mut sink = VecSink::default();
    match run_seed_inner(config, seed, &mut sink) {
        Ok((report, session)) => SeedRun {
            report,
            events: sink.events,
            session: Some(session),
        },
        Err(e) => {
            log::error!("seed {seed} failed: {e}");
            let mut report = SeedReport::empty(config, seed);
            report.failure = Some(e.to_string());
            SeedRun {
                report,
                events: sink.events,
                session: None,
            }
        }
    }
}

fn run_seed_inner(
    config: &ExperimentConfig,
    seed: u64,
    sink: &mut dyn EventSink,
) -> Result<(SeedReport, ElicitationSession)> {
    config.validate()?;
    let SeedData { data, truth } = prepare_data(config, seed)?;
    let session = match &truth {
        Some(t) => {
            let mut responder = OracleResponder::new(oracle_for(config, t), oracle_seed(seed))?;
            run_elicitation_loop(
                &data,
                config.inference.clone(),
                config.elicitation.clone(),
                None,
                seed,
                &mut responder,
                sink,
            )?
        }
        None => {
            let mut responder = NoResponder;
            run_elicitation_loop(
                &data,
                config.inference.clone(),
                config.elicitation.clone(),
                None,
                seed,
                &mut responder,
                sink,
            )?
        }
    };
    let report = evaluate(config, seed, &data, truth.as_ref(), &session)?;
    Ok((report, session))
}

struct NoResponder;

impl crate::elicit_loop::QueryResponder for NoResponder {
    fn respond(&mut self, _: &crate::bed::Query) -> Result<crate::elicit_loop::Answer> {
        Ok(crate::elicit_loop::Answer::Stop(crate::elicit_loop::StopReason::Abort))
    }
}

/// Metrics of a finished session against the data and the generating mixture.
pub fn evaluate(
    config: &ExperimentConfig,
    seed: u64,
    data: &Dataset,
    truth: Option<&GroundTruthMixture>,
    session: &ElicitationSession,
) -> Result<SeedReport> {
    let state = &session.state;
    let k = state.num_components();
    let mut report = SeedReport::empty(config, seed);
    report.converged = state.converged;
    report.restarts = state.restarts;
    report.queries_answered = session.queries_answered();
    report.under_run = session.under_run;
    let total: f64 = state.dirichlet_alpha.iter().sum();
    report.mixing_weights = state.dirichlet_alpha.iter().map(|a| a / total).collect();
    report.state_digest = Some(state.digest());
    report.permutation = (0..k).collect();

    let train_pred = map_labels(&state.responsibilities);
    if let Some(labels) = &data.labels {
        let (eval_pred, eval_truth) = match (&data.held_out, &data.held_out_labels) {
            (Some(ho), Some(hl)) => (map_labels(&predict_responsibilities(state, ho.view())?), hl.clone()),
            _ => (train_pred.clone(), labels.clone()),
        };
        let score = match_and_score(&train_pred, labels, &eval_pred, &eval_truth, k)?;
        report.accuracy = Some(score.accuracy);
        report.in_sample_accuracy = Some(score.in_sample_accuracy);
        report.permutation = score.permutation;
        if config.gmm_baseline {
            report.gmm_accuracy = Some(gmm_accuracy(data, k, seed)?);
        }
    }

    if let Some(ho) = &data.held_out {
        let map_component = map_labels(&predict_responsibilities(state, ho.view())?);
        report.map_neg_lppd = Some(map_neg_lppd(&map_component, &particle_logliks(state, ho)?)?);
    }

    if let Some(truth) = truth {
        let graphs = truth.graphs();
        if report.permutation.iter().any(|&l| l >= graphs.len()) {
            return Err(Error::contract("label permutation exceeds the generating components"));
        }
        let matched: Vec<&Adjacency> = report.permutation.iter().map(|&l| &graphs[l]).collect();
        for snap in &session.snapshots {
            let e = snap
                .hard_graphs
                .iter()
                .zip(&matched)
                .map(|(hg, t)| eshd(hg, t))
                .collect::<Result<Vec<_>>>()?;
            report.trajectory.push(TrajectoryPoint {
                queries: snap.queries_answered,
                mean_eshd: mean(&e),
                eshd: e,
            });
        }
        report.eshd = report.trajectory.last().map(|p| p.eshd.clone()).unwrap_or_default();
        report.mean_eshd = Some(mean(&report.eshd));
        let prior = config.inference.structure_prior.resolve(data.num_vars());
        for (c, comp) in state.components.iter().enumerate() {
            let w = state.responsibilities.column(c).to_vec();
            let weights = if k > 1 { Some(w.as_slice()) } else { None };
            let m = map_particle(comp, data, weights, &prior, config.inference.param_prior)?;
            let g = hard_graph(&comp.particles.particles[m].z, comp.mask());
            report.map_shd.push(shd(&g, matched[c])?);
        }
    }
    Ok(report)
}

/// `out[k][p][n]`: log-likelihood of row `n` under retained particle `p` of component `k`.
fn particle_logliks(state: &MixtureState, rows: &Array2<f64>) -> Result<Vec<Vec<Vec<f64>>>> {
    state
        .components
        .iter()
        .map(|comp| {
            comp.retained_indices()
                .into_iter()
                .map(|i| {
                    let p = &comp.particles.particles[i];
                    row_log_likelihoods(rows.view(), &hard_graph(&p.z, comp.mask()), &p.theta)
                })
                .collect()
        })
        .collect()
}

fn gmm_accuracy(data: &Dataset, k: usize, seed: u64) -> Result<f64> {
    let labels = data.labels.as_ref().ok_or_else(|| Error::contract("labels required"))?;
    let seeds: Vec<u64> = (0..5).map(|i| derived_rng(seed, &[TAG_GMM, i]).gen()).collect();
    let config = GmmConfig::default();
    let fit = gmm_em_best(data.rows.view(), k, &seeds, &config)?;
    let train_pred = fit.predict(data.rows.view(), config.ridge)?;
    let (eval_pred, eval_truth) = match (&data.held_out, &data.held_out_labels) {
        (Some(ho), Some(hl)) => (fit.predict(ho.view(), config.ridge)?, hl.clone()),
        _ => (train_pred.clone(), labels.clone()),
    };
    Ok(match_and_score(&train_pred, labels, &eval_pred, &eval_truth, k)?.accuracy)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// All seeds of a suite, in seed order.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
}

impl SuiteResult {
    pub fn reports(&self) -> Vec<&SeedReport> {
        self.runs.iter().map(|r| &r.report).collect()
    }

    pub fn any_failed(&self) -> bool {
        self.runs.iter().any(|r| r.report.failure.is_some())
    }
}

/// Runs every seed, up to `config.workers` at a time. Results do not
/// depend on the worker count.
pub fn run_experiment(config: &ExperimentConfig) -> Result<SuiteResult> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    let runs = pool.install(|| config.seeds.par_iter().map(|&s| run_seed(config, s)).collect());
    Ok(SuiteResult {
        config: config.clone(),
        runs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MetricsRow {
    seed: u64,
    strategy: QueryStrategy,
    reliability: f64,
    status: &'static str,
    converged: bool,
    restarts: usize,
    queries_answered: usize,
    mean_eshd: Option<f64>,
    accuracy: Option<f64>,
    in_sample_accuracy: Option<f64>,
    map_neg_lppd: Option<f64>,
    gmm_accuracy: Option<f64>,
    max_map_shd: Option<usize>,
}

/// Aggregate document written as `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub schema_version: u32,
    pub name: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub reports: Vec<SeedReport>,
}

/// Writes `report.json`, one `report_seed<seed>.json` per seed,
/// `metrics.csv` and `progress.ndjson` into `dir`.
pub fn write_outputs(dir: &Path, result: &SuiteResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let reports: Vec<SeedReport> = result.runs.iter().map(|r| r.report.clone()).collect();
    for r in &reports {
        fs::write(dir.join(format!("report_seed{}.json", r.seed)), serde_json::to_vec_pretty(r)?)?;
    }
    let suite = SuiteReport {
        schema_version: SCHEMA_VERSION,
        name: result.config.name.clone(),
        config_hash: result.config.hash(),
        config: result.config.clone(),
        reports: reports.clone(),
    };
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&suite)?)?;
    write_metrics_csv(&dir.join("metrics.csv"), &reports)?;
    let mut log = Vec::new();
    for run in &result.runs {
        for e in &run.events {
            serde_json::to_writer(
                &mut log,
                &SeededEvent {
                    seed: run.report.seed,
                    event: e.clone(),
                },
            )?;
            log.push(b'\n');
        }
    }
    fs::write(dir.join("progress.ndjson"), log)?;
    Ok(())
}

pub fn write_metrics_csv(path: &Path, reports: &[SeedReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in reports {
        w.serialize(MetricsRow {
            seed: r.seed,
            strategy: r.strategy,
            reliability: r.reliability,
            status: if r.failure.is_some() { "failed" } else { "ok" },
            converged: r.converged,
            restarts: r.restarts,
            queries_answered: r.queries_answered,
            mean_eshd: r.mean_eshd,
            accuracy: r.accuracy,
            in_sample_accuracy: r.in_sample_accuracy,
            map_neg_lppd: r.map_neg_lppd,
            gmm_accuracy: r.gmm_accuracy,
            max_map_shd: r.map_shd.iter().copied().max(),
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))
}

/// Mean with a percentile bootstrap 95% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

impl MeanCi {
    pub fn overlaps(&self, other: &MeanCi) -> bool {
        self.low <= other.high && other.low <= self.high
    }
}

pub fn bootstrap_mean_ci<R: Rng + ?Sized>(values: &[f64], resamples: usize, rng: &mut R) -> Result<MeanCi> {
    if values.is_empty() {
        return Err(Error::contract("bootstrap needs at least one value"));
    }
    if resamples == 0 {
        return Err(Error::config("resamples", "must be at least 1"));
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| means[((p * resamples as f64).floor() as usize).min(resamples - 1)];
    Ok(MeanCi {
        mean: mean(values),
        low: q(0.025),
        high: q(0.975),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub seed: u64,
    /// Final mean ESHD per strategy, in the order of `strategies`.
    pub eshd: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: QueryStrategy,
    pub eshd: MeanCi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub strategies: Vec<QueryStrategy>,
    pub rows: Vec<PairedRow>,
    pub summaries: Vec<StrategySummary>,
}

/// Runs the suite once per strategy on identical data, oracle streams and
/// inference seeds, and pairs the final ESHD by seed.
pub fn compare_strategies(config: &ExperimentConfig, strategies: &[QueryStrategy]) -> Result<(Comparison, Vec<SuiteResult>)> {
    if strategies.is_empty() {
        return Err(Error::config("strategies", "at least one strategy required"));
    }
    let mut results = Vec::new();
    for &s in strategies {
        let mut c = config.clone();
        c.elicitation.bed.strategy = s;
        results.push(run_experiment(&c)?);
    }
    let rows: Vec<PairedRow> = config
        .seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| PairedRow {
            seed,
            eshd: results.iter().map(|r| r.runs[i].report.mean_eshd).collect(),
        })
        .collect();
    let mut summaries = Vec::new();
    for (j, &s) in strategies.iter().enumerate() {
        let vals: Vec<f64> = rows.iter().filter_map(|r| r.eshd[j]).collect();
        if vals.is_empty() {
            return Err(Error::contract(format!("no successful runs for strategy {s:?}")));
        }
        let mut rng = derived_rng(config.seeds[0], &[TAG_BOOTSTRAP, j as u64]);
        summaries.push(StrategySummary {
            strategy: s,
            eshd: bootstrap_mean_ci(&vals, BOOTSTRAP_RESAMPLES, &mut rng)?,
        });
    }
    Ok((
        Comparison {
            strategies: strategies.to_vec(),
            rows,
            summaries,
        },
        results,
    ))
}

/// Writes `comparison.json` and `comparison.csv` into `dir`.
pub fn write_comparison(dir: &Path, comparison: &Comparison) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("comparison.json"), serde_json::to_vec_pretty(comparison)?)?;
    let mut w = csv::Writer::from_path(dir.join("comparison.csv")).map_err(csv_err)?;
    let mut header = vec!["seed".to_string()];
    header.extend(comparison.strategies.iter().map(|s| format!("eshd_{}", strategy_name(*s))));
    w.write_record(&header).map_err(csv_err)?;
    for r in &comparison.rows {
        let mut rec = vec![r.seed.to_string()];
        rec.extend(r.eshd.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn strategy_name(s: QueryStrategy) -> &'static str {
    match s {
        QueryStrategy::Bed => "bed",
        QueryStrategy::Random => "random",
    }
}
