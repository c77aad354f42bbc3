//! Diffuses node-level suspicion over the transaction graph augmented with
//! cluster structure, then blends it back into edge scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphCollection, TransactionGraph};
use crate::ppr::ClusterSet;
use crate::tensor::SparseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagationConfig {
    pub alpha: f64,
    pub alpha_lp: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Average only over incoming edges when scoring nodes.
    pub in_edges_only: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            alpha_lp: 0.3,
            tol: 1e-10,
            max_iters: 10_000,
            in_edges_only: false,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1)", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.alpha_lp) {
            return Err(Error::InvalidConfig(format!("alpha_lp {} outside [0, 1]", self.alpha_lp)));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidConfig("tol and max_iters must be positive".into()));
        }
        Ok(())
    }
}

fn check_unit(scores: &[f64], what: &str) -> Result<()> {
    match scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        Some(s) => Err(Error::InvalidInput(format!("{what} score {s} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Mean score over each node's incident edges; isolated nodes get 0.
pub fn node_scores_from_edges(n: usize, edges: &[(usize, usize)], scores: &[f64], in_edges_only: bool) -> Result<Vec<f64>> {
    if edges.len() != scores.len() {
        return Err(Error::InvalidInput(format!("{} scores for {} edges", scores.len(), edges.len())));
    }
    check_unit(scores, "edge")?;
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for (&(u, v), &y) in edges.iter().zip(scores) {
        if !in_edges_only && u != v {
            sum[u] += y;
            count[u] += 1;
        }
        sum[v] += y;
        count[v] += 1;
    }
    Ok(sum.iter().zip(&count).map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect())
}

/// Weight-1 cliques over the accounts of each cluster that appear in `graph`.
pub fn ppr_structure(graph: &TransactionGraph, clusters: &ClusterSet) -> Result<SparseMatrix> {
    let n = graph.node_count();
    let mut trip = Vec::new();
    for c in &clusters.clusters {
        let members: Vec<usize> = c.accounts.iter().filter_map(|a| graph.local_index(a)).collect();
        for (i, &u) in members.iter().enumerate() {
            for &v in &members[i + 1..] {
                trip.push((u, v, 1.0));
                trip.push((v, u, 1.0));
            }
        }
    }
    // overlapping cliques must not stack weights
    let summed = SparseMatrix::from_triplets(n, n, trip)?;
    SparseMatrix::from_triplets(n, n, summed.triplets().map(|(i, j, _)| (i, j, 1.0)))
}

/// Iterates `R ← αSR + (1−α)y` with `S = D̂⁻¹(A + A_PPR)` to L1 convergence
/// and divides the result by its maximum.
pub fn propagate(a: &SparseMatrix, a_ppr: &SparseMatrix, y_nodes: &[f64], config: &PropagationConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let n = y_nodes.len();
    if a.nrows() != n || a.ncols() != n || a_ppr.nrows() != n || a_ppr.ncols() != n {
        return Err(Error::ShapeMismatch {
            op: "propagate",
            left: vec![a.nrows(), a.ncols(), a_ppr.nrows(), a_ppr.ncols()],
            right: vec![n],
        });
    }
    if a_ppr.triplets().any(|(_, _, w)| !(w >= 0.0)) {
        return Err(Error::InvalidInput("cluster structure weights must be non-negative".into()));
    }
    check_unit(y_nodes, "node")?;
    if y_nodes.iter().all(|&y| y == 0.0) {
        return Ok(y_nodes.to_vec());
    }
    let combined = SparseMatrix::from_triplets(n, n, a.triplets().chain(a_ppr.triplets()))?;
    let inv: Vec<f64> = combined.row_sums().into_iter().map(|d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
    let s = combined.scale_rows(&inv);
    let alpha = config.alpha;
    let mut r = y_nodes.to_vec();
    for _ in 0..config.max_iters {
        let next: Vec<f64> = s
            .mul_vec(&r)
            .iter()
            .zip(y_nodes)
            .map(|(&sr, &y)| alpha * sr + (1.0 - alpha) * y)
            .collect();
        let residual: f64 = next.iter().zip(&r).map(|(x, y)| (x - y).abs()).sum();
        r = next;
        if residual < config.tol {
            let max = r.iter().cloned().fold(0.0, f64::max);
            return Ok(r.into_iter().map(|x| x / max).collect());
        }
    }
    let last = s.mul_vec(&r);
    let residual = last
        .iter()
        .zip(y_nodes)
        .zip(&r)
        .map(|((&sr, &y), &x)| (alpha * sr + (1.0 - alpha) * y - x).abs())
        .sum();
    Err(Error::NoConvergence {
        iters: config.max_iters,
        residual,
    })
}

/// `(1−α_lp)·ŷ_uv + α_lp·max(R_u, R_v)`.
pub fn refine_edges(edges: &[(usize, usize)], scores: &[f64], node_scores: &[f64], alpha_lp: f64) -> Result<Vec<f64>> {
    if edges.len() != scores.len() {
        return Err(Error::InvalidInput(format!("{} scores for {} edges", scores.len(), edges.len())));
    }
    check_unit(scores, "edge")?;
    check_unit(node_scores, "node")?;
    Ok(edges
        .iter()
        .zip(scores)
        .map(|(&(u, v), &y)| (1.0 - alpha_lp) * y + alpha_lp * node_scores[u].max(node_scores[v]))
        .collect())
}

/// Refines every market's edge scores; markets are processed in parallel.
pub fn refine_collection(
    collection: &GraphCollection,
    scores: &BTreeMap<String, Vec<f64>>,
    clusters: &ClusterSet,
    config: &PropagationConfig,
) -> Result<BTreeMap<String, Vec<f64>>> {
    config.validate()?;
    std::thread::scope(|scope| {
        let handles: Vec<_> = collection
            .graphs
            .iter()
            .map(|(c, g)| {
                let s = scores.get(c);
                scope.spawn(move || -> Result<(String, Vec<f64>)> {
                    let s = s.ok_or_else(|| Error::InvalidInput(format!("no scores for market {c}")))?;
                    let y = node_scores_from_edges(g.node_count(), &g.edges, s, config.in_edges_only)?;
                    let a = g.collapsed_adjacency(None, false)?;
                    let a = SparseMatrix::from_triplets(a.nrows(), a.ncols(), a.triplets().map(|(i, j, _)| (i, j, 1.0)))?;
                    let r = propagate(&a, &ppr_structure(g, clusters)?, &y, config)?;
                    Ok((c.clone(), refine_edges(&g.edges, s, &r, config.alpha_lp)?))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("propagation worker panicked")).collect()
    })
}
