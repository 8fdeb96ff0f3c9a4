//! Structural and predictive evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::bed::log_mean_exp;
use crate::error::{Error, Result};
use crate::graph::Adjacency;

/// Structural Hamming distance. Each unordered pair whose edge status
/// differs counts once, so a reversed edge costs 1.
pub fn shd(a: &Adjacency, b: &Adjacency) -> Result<usize> {
    if a.dim() != b.dim() || a.nrows() != a.ncols() {
        return Err(Error::contract("adjacencies must be square and of equal size"));
    }
    let d = a.nrows();
    let mut count = 0;
    for i in 0..d {
        for j in i + 1..d {
            if (a[[i, j]] != 0, a[[j, i]] != 0) != (b[[i, j]] != 0, b[[j, i]] != 0) {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// Mean SHD of a set of particle graphs to the truth.
pub fn eshd(graphs: &[Adjacency], truth: &Adjacency) -> Result<f64> {
    if graphs.is_empty() {
        return Err(Error::contract("at least one graph required"));
    }
    let mut total = 0usize;
    for g in graphs {
        total += shd(g, truth)?;
    }
    Ok(total as f64 / graphs.len() as f64)
}

/// Exact minimum-cost assignment on a square matrix (Hungarian method with
/// potentials). Returns `assignment[row] = column`.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::contract("assignment cost matrix must be square"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays; column 0 is a virtual start.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    Ok(assignment)
}

/// Index of the largest entry of each row.
pub fn map_labels(responsibilities: &ndarray::Array2<f64>) -> Vec<usize> {
    responsibilities
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect()
}

/// Permutation `perm[component] = label` maximizing agreement.
pub fn best_permutation(predicted: &[usize], truth: &[usize], k: usize) -> Result<Vec<usize>> {
    if predicted.len() != truth.len() {
        return Err(Error::contract("prediction and truth lengths differ"));
    }
    if k == 0 || k > 20 {
        return Err(Error::config("num_components", "label matching supports 1..=20 components"));
    }
    let mut counts = vec![vec![0.0; k]; k];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(Error::contract("label out of range"));
        }
        counts[p][t] += 1.0;
    }
    let cost: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|c| -c).collect()).collect();
    solve_assignment(&cost)
}

pub fn matched_accuracy(predicted: &[usize], truth: &[usize], perm: &[usize]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(&p, &t)| perm[p] == t).count();
    hits as f64 / predicted.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedScore {
    pub accuracy: f64,
    pub in_sample_accuracy: f64,
    pub permutation: Vec<usize>,
}

/// Chooses the label permutation on the in-sample predictions and reports
/// accuracy on the evaluation rows under that permutation.
pub fn match_and_score(
    in_sample_pred: &[usize],
    in_sample_truth: &[usize],
    eval_pred: &[usize],
    eval_truth: &[usize],
    k: usize,
) -> Result<MatchedScore> {
    if eval_pred.len() != eval_truth.len() {
        return Err(Error::contract("prediction and truth lengths differ"));
    }
    let permutation = best_permutation(in_sample_pred, in_sample_truth, k)?;
    Ok(MatchedScore {
        accuracy: matched_accuracy(eval_pred, eval_truth, &permutation),
        in_sample_accuracy: matched_accuracy(in_sample_pred, in_sample_truth, &permutation),
        permutation,
    })
}

/// Negative log pointwise predictive density under each row's MAP
/// component. `loglik[k][p][n]` is the log-likelihood of row `n` under
/// particle `p` of component `k`.
pub fn map_neg_lppd(map_component: &[usize], loglik: &[Vec<Vec<f64>>]) -> Result<f64> {
    let mut total = 0.0;
    let mut buf = Vec::new();
    for (n, &k) in map_component.iter().enumerate() {
        let comp = loglik
            .get(k)
            .ok_or_else(|| Error::contract(format!("component {k} out of range")))?;
        if comp.is_empty() {
            return Err(Error::contract(format!("component {k} has no particles")));
        }
        buf.clear();
        for p in comp {
            buf.push(
                *p.get(n)
                    .ok_or_else(|| Error::contract("log-likelihood table too short"))?,
            );
        }
        total += log_mean_exp(&buf);
    }
    Ok(-total)
}
