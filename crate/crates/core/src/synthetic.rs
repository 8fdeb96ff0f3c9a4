//! Ground-truth graphs and data: Erdős–Rényi and scale-free DAGs, linear and
//! MLP Gaussian networks, mixtures of them, and CSV ingestion.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{is_acyclic, topological_order, Adjacency};
use crate::likelihood::{log_likelihood_row, node_mean, BnParams, Dataset, ModelKind};

/// Random topological order, each forward edge kept with probability
/// `min(1, 2·e·d / (d(d-1)))`.
pub fn sample_er_dag<R: Rng + ?Sized>(d: usize, expected_edges_per_node: f64, rng: &mut R) -> Result<Adjacency> {
    if d < 2 {
        return Err(Error::config("num_vars", "must be at least 2"));
    }
    if !(expected_edges_per_node >= 0.0) {
        return Err(Error::config("expected_edges_per_node", "must be nonnegative"));
    }
    let p = (2.0 * expected_edges_per_node * d as f64 / (d * (d - 1)) as f64).min(1.0);
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(rng);
    let mut g = Array2::zeros((d, d));
    for a in 0..d {
        for b in a + 1..d {
            if rng.gen::<f64>() < p {
                g[[order[a], order[b]]] = 1;
            }
        }
    }
    Ok(g)
}

/// Preferential attachment over a random node order: each new node takes
/// `min(m, #existing)` distinct parents with probability proportional to
/// `1 + out-degree`.
pub fn sample_sf_dag<R: Rng + ?Sized>(d: usize, m: usize, rng: &mut R) -> Result<Adjacency> {
    if d < 2 {
        return Err(Error::config("num_vars", "must be at least 2"));
    }
    if m < 1 {
        return Err(Error::config("attachment", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(rng);
    let mut g = Array2::zeros((d, d));
    let mut out_degree = vec![0usize; d];
    for t in 1..d {
        let child = order[t];
        let mut pool: Vec<usize> = order[..t].to_vec();
        for _ in 0..m.min(t) {
            let weights: Vec<f64> = pool.iter().map(|&v| 1.0 + out_degree[v] as f64).collect();
            let idx = WeightedIndex::new(&weights).expect("weights are positive").sample(rng);
            let parent = pool.swap_remove(idx);
            g[[parent, child]] = 1;
            out_degree[parent] += 1;
        }
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphFamily {
    ErdosRenyi,
    ScaleFree,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBn {
    pub graph: Adjacency,
    pub params: BnParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMixture {
    pub components: Vec<GroundTruthBn>,
    pub mixing: Vec<f64>,
    pub seed: u64,
}

impl GroundTruthMixture {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() || self.components.len() != self.mixing.len() {
            return Err(Error::config("mixing", "one probability per component required"));
        }
        let s: f64 = self.mixing.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.mixing.iter().any(|&w| w < 0.0) {
            return Err(Error::config("mixing", "must be a probability vector"));
        }
        for c in &self.components {
            if !is_acyclic(&c.graph) {
                return Err(Error::contract("ground-truth graph must be acyclic"));
            }
        }
        Ok(())
    }

    pub fn graphs(&self) -> Vec<Adjacency> {
        self.components.iter().map(|c| c.graph.clone()).collect()
    }
}

/// Draws a random network on `graph` with standard normal parameters.
pub fn sample_bn<R: Rng + ?Sized>(graph: Adjacency, kind: ModelKind, noise_var: f64, rng: &mut R) -> Result<GroundTruthBn> {
    let params = BnParams::sample_prior(kind, graph.nrows(), noise_var, rng)?;
    Ok(GroundTruthBn { graph, params })
}

pub fn sample_dag<R: Rng + ?Sized>(family: GraphFamily, d: usize, edges_per_node: f64, rng: &mut R) -> Result<Adjacency> {
    match family {
        GraphFamily::ErdosRenyi => sample_er_dag(d, edges_per_node, rng),
        GraphFamily::ScaleFree => sample_sf_dag(d, edges_per_node.round().max(1.0) as usize, rng),
    }
}

fn hidden_width(p: &BnParams) -> usize {
    match p.kind {
        ModelKind::Linear => 0,
        ModelKind::Mlp { hidden } => hidden,
    }
}

fn ancestral_row<R: Rng + ?Sized>(bn: &GroundTruthBn, order: &[usize], rng: &mut R) -> Vec<f64> {
    let d = bn.graph.nrows();
    let noise = Normal::new(0.0, bn.params.noise_var().sqrt()).expect("noise variance is positive");
    let mut x = vec![0.0; d];
    let mut hidden = vec![0.0; hidden_width(&bn.params)];
    for &j in order {
        x[j] = node_mean(&x, &bn.graph, &bn.params, j, &mut hidden) + noise.sample(rng);
    }
    x
}

/// `n` rows from the mixture, with the generating component of each row.
pub fn sample_rows<R: Rng + ?Sized>(truth: &GroundTruthMixture, n: usize, rng: &mut R) -> Result<(Array2<f64>, Vec<usize>)> {
    truth.validate()?;
    let d = truth.components[0].graph.nrows();
    let orders: Vec<Vec<usize>> = truth
        .components
        .iter()
        .map(|c| topological_order(&c.graph).expect("validated acyclic"))
        .collect();
    let pick = WeightedIndex::new(&truth.mixing).map_err(|e| Error::config("mixing", e.to_string()))?;
    let mut rows = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let k = pick.sample(rng);
        let x = ancestral_row(&truth.components[k], &orders[k], rng);
        for (c, v) in x.into_iter().enumerate() {
            rows[[r, c]] = v;
        }
        labels.push(k);
    }
    Ok((rows, labels))
}

/// A mixture of `mixing.len()` independently drawn networks.
pub fn sample_mixture<R: Rng + ?Sized>(
    family: GraphFamily,
    d: usize,
    edges_per_node: f64,
    kind: ModelKind,
    noise_var: f64,
    mixing: Vec<f64>,
    seed: u64,
    rng: &mut R,
) -> Result<GroundTruthMixture> {
    let components = (0..mixing.len())
        .map(|_| sample_bn(sample_dag(family, d, edges_per_node, rng)?, kind, noise_var, rng))
        .collect::<Result<Vec<_>>>()?;
    let truth = GroundTruthMixture { components, mixing, seed };
    truth.validate()?;
    Ok(truth)
}

/// Fraction of rows whose most probable generating component under the true
/// parameters is their actual label. Measures how separable a mixture is.
pub fn bayes_accuracy(truth: &GroundTruthMixture, rows: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if rows.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::contract("one label per row required"));
    }
    let mut hits = 0usize;
    for (x, &label) in rows.rows().into_iter().zip(labels) {
        let x = x.to_vec();
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (k, (c, &w)) in truth.components.iter().zip(&truth.mixing).enumerate() {
            let v = w.ln() + log_likelihood_row(&x, &c.graph, &c.params)?;
            if v > best.1 {
                best = (k, v);
            }
        }
        hits += (best.0 == label) as usize;
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Training and held-out rows with their component labels.
pub fn generate_observations<R: Rng + ?Sized>(
    truth: &GroundTruthMixture,
    n: usize,
    n_held_out: usize,
    rng: &mut R,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("num_rows", "must be at least 1"));
    }
    let (rows, labels) = sample_rows(truth, n, rng)?;
    let mut ds = Dataset::new(rows)?;
    let mut ho_labels = None;
    if n_held_out > 0 {
        let (ho, hl) = sample_rows(truth, n_held_out, rng)?;
        ds = ds.with_held_out(ho)?;
        ho_labels = Some(hl);
    }
    ds.with_labels(labels, ho_labels)
}

/// Summary written next to generated or loaded data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_rows: usize,
    pub num_vars: usize,
    pub has_labels: bool,
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn describe(ds: &Dataset, seed: Option<u64>) -> Self {
        Self {
            num_rows: ds.num_rows(),
            num_vars: ds.num_vars(),
            has_labels: ds.labels.is_some(),
            seed,
        }
    }
}

/// Parses a headed CSV. When `label_column` is set, the first column holds
/// integer class labels kept for evaluation only.
pub fn load_csv(path: &Path, label_column: bool, standardize: bool) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    parse_csv(file, label_column, standardize)
}

pub fn parse_csv<R: std::io::Read>(reader: R, label_column: bool, standardize: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let width = headers.len();
    let skip = usize::from(label_column);
    if width <= skip || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::Parse {
            line: 1,
            message: "missing header or no feature columns".into(),
        });
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if c < skip {
                let lab = cell
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.fract() == 0.0 && *v >= 0.0)
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: format!("label '{cell}' is not a nonnegative integer"),
                    })?;
                labels.push(lab as usize);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("non-numeric cell '{cell}' in column {}", c + 1),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: format!("non-finite cell in column {}", c + 1),
                    });
                }
                values.push(v);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let d = width - skip;
    let mut rows = Array2::from_shape_vec((n, d), values).map_err(|e| Error::contract(e.to_string()))?;
    if standardize {
        standardize_columns(&mut rows);
    }
    let ds = Dataset::new(rows)?;
    if label_column {
        ds.with_labels(labels, None)
    } else {
        Ok(ds)
    }
}

/// In-place z-scoring with the population standard deviation. Constant
/// columns are only centred.
pub fn standardize_columns(rows: &mut Array2<f64>) {
    let n = rows.nrows() as f64;
    for mut col in rows.columns_mut() {
        let mean = col.sum() / n;
        col.mapv_inplace(|v| v - mean);
        let sd = (col.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        if sd > 0.0 {
            col.mapv_inplace(|v| v / sd);
        }
    }
}
