//! Simulated expert whose answers are Beta draws centred by its reliability.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::elicitation::Edge;
use crate::error::{Error, Result};
use crate::graph::Adjacency;

pub const MEAN_MIN: f64 = 0.02;
pub const MEAN_MAX: f64 = 0.98;
pub const DEFAULT_RESPONSE_VARIANCE: f64 = 0.05;
/// Share of the Bernoulli variance `m(1-m)` the response variance may use.
const MAX_VARIANCE_SHARE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub reference_graphs: Vec<Adjacency>,
    pub reliability: f64,
    pub response_variance: f64,
    /// Answer exactly 0 or 1 from the reference graph.
    #[serde(default)]
    pub perfect: bool,
}

impl OracleSpec {
    pub fn new(reference_graphs: Vec<Adjacency>, reliability: f64) -> Result<Self> {
        let spec = Self {
            reference_graphs,
            reliability,
            response_variance: DEFAULT_RESPONSE_VARIANCE,
            perfect: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn perfect(reference_graphs: Vec<Adjacency>) -> Self {
        Self {
            reference_graphs,
            reliability: 1.0,
            response_variance: DEFAULT_RESPONSE_VARIANCE,
            perfect: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.reliability) {
            return Err(Error::config("reliability", "must lie in [0, 1]"));
        }
        if !(self.response_variance > 0.0) {
            return Err(Error::config("response_variance", "must be positive"));
        }
        if self.reference_graphs.is_empty() {
            return Err(Error::config("reference_graphs", "at least one graph required"));
        }
        Ok(())
    }

    /// Mean answer `|r - 1 + 1[edge]|`, clamped away from 0 and 1.
    pub fn mean(&self, edge_present: bool) -> f64 {
        let ind = if edge_present { 1.0 } else { 0.0 };
        (self.reliability - 1.0 + ind).abs().clamp(MEAN_MIN, MEAN_MAX)
    }

    /// Beta shape parameters from mean/variance matching. A variance above
    /// what a Beta with this mean can carry is shrunk to fit.
    pub fn beta_shape(&self, mean: f64) -> Result<(f64, f64)> {
        let bound = mean * (1.0 - mean);
        let v = self.response_variance.min(MAX_VARIANCE_SHARE * bound);
        let c = bound / v - 1.0;
        let (a, b) = (mean * c, (1.0 - mean) * c);
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::config(
                "response_variance",
                format!("no Beta distribution has mean {mean} and variance {v}"),
            ));
        }
        Ok((a, b))
    }

    pub fn respond<R: Rng + ?Sized>(&self, edge: Edge, component: usize, rng: &mut R) -> Result<f64> {
        let g = self
            .reference_graphs
            .get(component)
            .ok_or_else(|| Error::contract(format!("no reference graph for component {component}")))?;
        let (i, j) = edge;
        if i >= g.nrows() || j >= g.ncols() {
            return Err(Error::contract(format!("edge ({i}, {j}) out of range")));
        }
        let present = g[[i, j]] != 0;
        if self.perfect {
            return Ok(if present { 1.0 } else { 0.0 });
        }
        let (a, b) = self.beta_shape(self.mean(present))?;
        let beta = Beta::new(a, b).map_err(|e| Error::config("response_variance", e.to_string()))?;
        Ok(beta.sample(rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn means_follow_reliability() {
        let o = OracleSpec::new(vec![array![[0, 1], [0, 0]]], 0.9).unwrap();
        assert!((o.mean(true) - 0.9).abs() < 1e-12);
        assert!((o.mean(false) - 0.1).abs() < 1e-12);
        let o = OracleSpec::new(vec![array![[0, 1], [0, 0]]], 1.0).unwrap();
        assert_eq!(o.mean(true), 0.98);
    }

    #[test]
    fn moment_matching_at_point_nine() {
        let o = OracleSpec::new(vec![array![[0, 1], [0, 0]]], 0.9).unwrap();
        let (a, b) = o.beta_shape(0.9).unwrap();
        let mean = a / (a + b);
        let var = a * b / ((a + b) * (a + b) * (a + b + 1.0));
        assert!((mean - 0.9).abs() < 1e-12);
        assert!((var - 0.05).abs() < 1e-12);
    }

    #[test]
    fn perfect_expert_is_exact() {
        let o = OracleSpec::perfect(vec![array![[0, 1], [0, 0]]]);
        let mut rng = rand::thread_rng();
        assert_eq!(o.respond((0, 1), 0, &mut rng).unwrap(), 1.0);
        assert_eq!(o.respond((1, 0), 0, &mut rng).unwrap(), 0.0);
    }
}
