//! Personalized PageRank, cross-bank PPR, cluster extraction and merging,
//! sweep cuts, and the planted-group detectability harness.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AccountKey, GraphCollection, TransactionGraph};
use crate::synth::{sbm_generate, SbmSpec};
use crate::tensor::SparseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PprConfig {
    /// Teleport probability.
    pub alpha_ppr: f64,
    /// L1 residual at which iteration stops.
    pub tol: f64,
    pub max_iters: usize,
    /// Cut on max-normalized scores for cluster membership.
    pub score_threshold: f64,
    /// Walk along transaction direction instead of the symmetrized graph.
    pub directed: bool,
    /// Share of teleport mass given to the cross-bank component when present.
    pub cross_weight: f64,
    /// Node score needed to seed a cluster.
    pub seed_threshold: f64,
    pub max_seeds: usize,
    /// Foreign score needed for a cross-border edge to count as flagged.
    pub cross_flag_threshold: f64,
}

impl Default for PprConfig {
    fn default() -> Self {
        Self {
            alpha_ppr: 0.15,
            tol: 1e-10,
            max_iters: 10_000,
            score_threshold: 0.5,
            directed: false,
            cross_weight: 0.3,
            seed_threshold: 0.5,
            max_seeds: 50,
            cross_flag_threshold: 0.5,
        }
    }
}

impl PprConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_ppr > 0.0 && self.alpha_ppr < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha_ppr {} outside (0, 1)", self.alpha_ppr)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("tol must be positive".into()));
        }
        if !(self.score_threshold > 0.0 && self.score_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!("score_threshold {} outside (0, 1]", self.score_threshold)));
        }
        if !(0.0..1.0).contains(&self.cross_weight) {
            return Err(Error::InvalidConfig(format!("cross_weight {} outside [0, 1)", self.cross_weight)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PprResult {
    pub scores: Vec<f64>,
    /// `scores / max(scores)`.
    pub normalized: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// `D⁻¹(A + Â)`; zero-degree rows stay empty and are treated as dangling by the solver.
pub fn cross_bank_transition(a: &SparseMatrix, a_hat: &SparseMatrix) -> Result<SparseMatrix> {
    if a.nrows() != a_hat.nrows() || a.ncols() != a_hat.ncols() || a.nrows() != a.ncols() {
        return Err(Error::ShapeMismatch {
            op: "cross_bank_transition",
            left: vec![a.nrows(), a.ncols()],
            right: vec![a_hat.nrows(), a_hat.ncols()],
        });
    }
    if a_hat.triplets().any(|(_, _, v)| !(v >= 0.0)) {
        return Err(Error::InvalidInput("edge predictions must be non-negative".into()));
    }
    let sum = SparseMatrix::from_triplets(a.nrows(), a.ncols(), a.triplets().chain(a_hat.triplets()))?;
    Ok(row_normalize(&sum))
}

/// Plain random-walk operator `D⁻¹A`; identical to the cross-bank operator with `Â = 0`.
pub fn transition(a: &SparseMatrix) -> Result<SparseMatrix> {
    cross_bank_transition(a, &SparseMatrix::from_triplets(a.nrows(), a.ncols(), std::iter::empty())?)
}

fn row_normalize(m: &SparseMatrix) -> SparseMatrix {
    let inv: Vec<f64> = m.row_sums().into_iter().map(|d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
    m.scale_rows(&inv)
}

/// Power iteration for `r = (1−α)Pᵀr + αv`, with dangling rows sending their
/// mass to `v`.
pub fn ppr_solve(p: &SparseMatrix, v: &[f64], config: &PprConfig) -> Result<PprResult> {
    config.validate()?;
    let n = p.nrows();
    if p.ncols() != n || v.len() != n {
        return Err(Error::ShapeMismatch {
            op: "ppr_solve",
            left: vec![p.nrows(), p.ncols()],
            right: vec![v.len()],
        });
    }
    if v.iter().any(|&x| !(x >= 0.0)) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput("personalization must be non-negative and sum to 1".into()));
    }
    let row_sums = p.row_sums();
    let dangling: Vec<usize> = (0..n).filter(|&i| row_sums[i] == 0.0).collect();
    if row_sums.iter().any(|&s| s != 0.0 && (s - 1.0).abs() > 1e-9) {
        return Err(Error::InvalidInput("transition rows must sum to 1 or be empty".into()));
    }
    let alpha = config.alpha_ppr;
    let mut r = v.to_vec();
    let mut residual = f64::INFINITY;
    for it in 1..=config.max_iters {
        let walked = p.transpose_mul_vec(&r);
        let sink: f64 = dangling.iter().map(|&i| r[i]).sum();
        let next: Vec<f64> = walked
            .iter()
            .zip(v)
            .map(|(&w, &vi)| (1.0 - alpha) * (w + sink * vi) + alpha * vi)
            .collect();
        residual = next.iter().zip(&r).map(|(a, b)| (a - b).abs()).sum();
        r = next;
        if residual < config.tol {
            return Ok(finish(r, it, residual));
        }
    }
    Err(Error::NoConvergence {
        iters: config.max_iters,
        residual,
    })
}

fn finish(scores: Vec<f64>, iterations: usize, residual: f64) -> PprResult {
    let max = scores.iter().cloned().fold(0.0, f64::max);
    let normalized = if max > 0.0 {
        scores.iter().map(|s| s / max).collect()
    } else {
        vec![0.0; scores.len()]
    };
    PprResult {
        scores,
        normalized,
        iterations,
        residual,
    }
}

/// `(v_local, v_cross)` with `‖v_local + v_cross‖₁ = 1`. `seeds` and `cross`
/// are `(node, weight)` pairs; when `cross` carries mass it receives the share
/// `cross_weight`.
pub fn build_personalization(n: usize, seeds: &[(usize, f64)], cross: &[(usize, f64)], cross_weight: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let local_total: f64 = seeds.iter().map(|s| s.1).sum();
    if seeds.is_empty() || seeds.iter().any(|s| s.1 < 0.0) || !(local_total > 0.0) {
        return Err(Error::InvalidInput("seed scores must be non-negative and not all zero".into()));
    }
    if seeds.iter().chain(cross).any(|&(i, _)| i >= n) {
        return Err(Error::InvalidInput("personalization node outside the graph".into()));
    }
    let cross_total: f64 = cross.iter().map(|c| c.1.max(0.0)).sum();
    let share = if cross_total > 0.0 { cross_weight } else { 0.0 };
    let mut local = vec![0.0; n];
    for &(i, s) in seeds {
        local[i] += (1.0 - share) * s / local_total;
    }
    let mut xc = vec![0.0; n];
    if share > 0.0 {
        for &(i, s) in cross {
            xc[i] += share * s.max(0.0) / cross_total;
        }
    }
    Ok((local, xc))
}

/// Nodes whose normalized score reaches `threshold`; never empty for a non-zero result.
pub fn extract_cluster(result: &PprResult, threshold: f64) -> Vec<usize> {
    let argmax = result
        .normalized
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);
    let mut out: Vec<usize> = (0..result.normalized.len())
        .filter(|&i| result.normalized[i] >= threshold && result.normalized[i] > 0.0)
        .collect();
    if let Some(a) = argmax {
        if out.is_empty() && result.normalized[a] > 0.0 {
            out.push(a);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: usize,
    pub seed: AccountKey,
    pub accounts: BTreeSet<AccountKey>,
    pub countries: BTreeSet<String>,
    pub hits: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusterSet {
    pub clusters: Vec<Cluster>,
}

/// Unions clusters that share an account until no two clusters overlap.
///
/// The result is the set of connected components of the cluster-overlap
/// graph, so it does not depend on the order of the dictionaries; ids are
/// assigned by smallest member account. The seed of a merged cluster is the
/// seed of its first contributor, taking the largest dictionary first.
pub fn merge_clusters(dictionaries: &[Vec<Cluster>]) -> ClusterSet {
    let mut order: Vec<usize> = (0..dictionaries.len()).collect();
    let size = |d: &Vec<Cluster>| d.iter().map(|c| c.accounts.len()).sum::<usize>();
    order.sort_by(|&a, &b| size(&dictionaries[b]).cmp(&size(&dictionaries[a])).then(a.cmp(&b)));
    let flat: Vec<&Cluster> = order.iter().flat_map(|&d| dictionaries[d].iter()).collect();

    let mut parent: Vec<usize> = (0..flat.len()).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    let mut owner: HashMap<&AccountKey, usize> = HashMap::new();
    for (i, c) in flat.iter().enumerate() {
        for a in &c.accounts {
            if let Some(&j) = owner.get(a) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            } else {
                owner.insert(a, i);
            }
        }
    }
    let mut groups: BTreeMap<usize, Cluster> = BTreeMap::new();
    for (i, c) in flat.iter().enumerate() {
        let root = find(&mut parent, i);
        let g = groups.entry(root).or_insert_with(|| Cluster {
            id: 0,
            seed: c.seed.clone(),
            accounts: BTreeSet::new(),
            countries: BTreeSet::new(),
            hits: 0,
        });
        g.accounts.extend(c.accounts.iter().cloned());
        g.countries.extend(c.countries.iter().cloned());
    }
    let mut clusters: Vec<Cluster> = groups.into_values().collect();
    clusters.sort_by(|a, b| a.accounts.iter().next().cmp(&b.accounts.iter().next()));
    for (i, c) in clusters.iter_mut().enumerate() {
        c.id = i;
    }
    ClusterSet { clusters }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterStats {
    pub clusters: usize,
    pub accounts: usize,
    pub malicious_accounts: usize,
    pub zero_hit_clusters: usize,
    /// Malicious accounts over all clustered accounts (0 when empty).
    pub proportion: f64,
}

impl ClusterSet {
    /// Recomputes hit counts against a set of known malicious accounts.
    pub fn annotate_hits(&mut self, malicious: &HashSet<AccountKey>) {
        for c in &mut self.clusters {
            c.hits = c.accounts.iter().filter(|a| malicious.contains(*a)).count();
        }
    }

    pub fn stats(&self) -> ClusterStats {
        let accounts: usize = self.clusters.iter().map(|c| c.accounts.len()).sum();
        let malicious: usize = self.clusters.iter().map(|c| c.hits).sum();
        ClusterStats {
            clusters: self.clusters.len(),
            accounts,
            malicious_accounts: malicious,
            zero_hit_clusters: self.clusters.iter().filter(|c| c.hits == 0).count(),
            proportion: if accounts > 0 { malicious as f64 / accounts as f64 } else { 0.0 },
        }
    }

    /// One row per cluster: `cluster_id,seed,accounts,countries,hit_count`, with
    /// accounts and countries comma-joined inside their fields.
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["cluster_id", "seed", "accounts", "countries", "hit_count"])?;
        for c in &self.clusters {
            let accounts: Vec<String> = c.accounts.iter().map(|a| a.to_string()).collect();
            let countries: Vec<&str> = c.countries.iter().map(String::as_str).collect();
            out.write_record([
                c.id.to_string(),
                c.seed.to_string(),
                accounts.join(","),
                countries.join(","),
                c.hits.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut clusters = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let bad = |reason: String| Error::BadRow { row: i + 2, reason };
            if rec.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", rec.len())));
            }
            let key = |s: &str| -> Result<AccountKey> {
                s.split_once(':')
                    .map(|(b, a)| AccountKey::new(b, a))
                    .ok_or_else(|| bad(format!("malformed account `{s}`")))
            };
            clusters.push(Cluster {
                id: rec[0].parse().map_err(|_| bad("bad cluster_id".into()))?,
                seed: key(&rec[1])?,
                accounts: rec[2].split(',').filter(|s| !s.is_empty()).map(key).collect::<Result<_>>()?,
                countries: rec[3].split(',').filter(|s| !s.is_empty()).map(String::from).collect(),
                hits: rec[4].parse().map_err(|_| bad("bad hit_count".into()))?,
            });
        }
        Ok(Self { clusters })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub set: Vec<usize>,
    pub conductance: f64,
    /// Zero-degree nodes left out of the ordering.
    pub skipped: Vec<usize>,
}

/// Minimum-conductance prefix of the nodes ordered by `r(v)/d(v)` (ties by
/// index). `max_size` bounds the prefix length.
pub fn sweep_cut(scores: &[f64], adjacency: &SparseMatrix, max_size: Option<usize>) -> Result<SweepResult> {
    let n = adjacency.nrows();
    if scores.len() != n {
        return Err(Error::ShapeMismatch {
            op: "sweep_cut",
            left: vec![scores.len()],
            right: vec![n],
        });
    }
    let deg = adjacency.row_sums();
    let (mut order, skipped): (Vec<usize>, Vec<usize>) = (0..n).partition(|&v| deg[v] > 0.0);
    order.sort_by(|&a, &b| (scores[b] / deg[b]).total_cmp(&(scores[a] / deg[a])).then(a.cmp(&b)));
    let total: f64 = deg.iter().sum();
    let limit = order.len().saturating_sub(1).min(max_size.unwrap_or(usize::MAX));
    if limit == 0 {
        return Err(Error::InvalidInput("sweep cut needs at least two connected nodes".into()));
    }
    let mut in_set = vec![false; n];
    let (mut vol, mut cut) = (0.0, 0.0);
    let mut best = (f64::INFINITY, 0usize);
    for (k, &u) in order.iter().take(limit).enumerate() {
        let internal: f64 = adjacency.row(u).filter(|&(w, _)| in_set[w] || w == u).map(|(_, x)| x).sum();
        let self_loop: f64 = adjacency.row(u).filter(|&(w, _)| w == u).map(|(_, x)| x).sum();
        in_set[u] = true;
        vol += deg[u];
        cut += deg[u] - 2.0 * internal + self_loop;
        let denom = vol.min(total - vol);
        if denom > 0.0 {
            let phi = cut / denom;
            if phi < best.0 {
                best = (phi, k + 1);
            }
        }
    }
    Ok(SweepResult {
        set: order[..best.1].to_vec(),
        conductance: best.0,
        skipped,
    })
}

/// Conductance of an explicit node set.
pub fn conductance(set: &[usize], adjacency: &SparseMatrix) -> f64 {
    let mut inside = vec![false; adjacency.nrows()];
    set.iter().for_each(|&v| inside[v] = true);
    let deg = adjacency.row_sums();
    let total: f64 = deg.iter().sum();
    let vol: f64 = set.iter().map(|&v| deg[v]).sum();
    let cut: f64 = set
        .iter()
        .flat_map(|&u| adjacency.row(u).filter(|&(w, _)| !inside[w]).map(|(_, x)| x))
        .sum();
    cut / vol.min(total - vol)
}

/// Mean-field PPR gap `μ_in − μ_out` for a planted group under the teleport
/// convention of [`ppr_solve`], from the two-block averaged walk.
pub fn mean_field_gap(n: usize, s: usize, p_in: f64, p_out: f64, alpha: f64) -> f64 {
    let (nf, sf) = (n as f64, s as f64);
    let d_in = (sf - 1.0) * p_in + (nf - sf) * p_out;
    let d_out = sf * p_out + (nf - sf - 1.0) * p_out;
    let stay_in = if d_in > 0.0 { (sf - 1.0) * p_in / d_in } else { 1.0 };
    let enter = if d_out > 0.0 { sf * p_out / d_out } else { 0.0 };
    // m = α (I − (1−α) Tᵀ)⁻¹ e_in with T = [[stay_in, 1−stay_in], [enter, 1−enter]]
    let c = 1.0 - alpha;
    let (a11, a12) = (1.0 - c * stay_in, -c * enter);
    let (a21, a22) = (-c * (1.0 - stay_in), 1.0 - c * (1.0 - enter));
    let det = a11 * a22 - a12 * a21;
    let m_in = alpha * a22 / det;
    let m_out = alpha * -a21 / det;
    m_in / sf - m_out / (nf - sf)
}

/// Working constant `C′` of the detectability condition
/// `s(p_in − p_out) ≥ C′·√(n·p_in·ln n)`, calibrated on the harness.
pub const DETECTABILITY_CONSTANT: f64 = 0.25;

/// `p_in` at which `s(p_in − p_out) = c·√(n·p_in·ln n)` (assumes `p_in ≥ p_out`).
pub fn p_in_for_signal(n: usize, s: usize, p_out: f64, c: f64) -> f64 {
    let (nf, sf) = (n as f64, s as f64);
    let k = c * (nf * nf.ln()).sqrt();
    let x = (k + (k * k + 4.0 * sf * sf * p_out).sqrt()) / (2.0 * sf);
    (x * x).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectabilityConfig {
    pub alpha_ppr: f64,
    pub trials: usize,
    /// Longest sweep prefix, as a multiple of the planted size.
    pub max_prefix_factor: f64,
    /// Redraw disconnected samples (up to `max_resamples` times).
    pub require_connected: bool,
    pub max_resamples: usize,
}

impl Default for DetectabilityConfig {
    fn default() -> Self {
        Self {
            alpha_ppr: 0.15,
            trials: 50,
            max_prefix_factor: 1.2,
            require_connected: true,
            max_resamples: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed_node: usize,
    pub recovery: f64,
    pub conductance: f64,
    pub mean_in: f64,
    pub mean_out: f64,
    /// `mean_in − mean_out ≥ ½·Δ_mean`.
    pub separated: bool,
    pub resamples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectabilityReport {
    pub spec: SbmSpec,
    pub gap: f64,
    pub trials: Vec<TrialOutcome>,
}

impl DetectabilityReport {
    pub fn mean_recovery(&self) -> f64 {
        self.trials.iter().map(|t| t.recovery).sum::<f64>() / self.trials.len().max(1) as f64
    }

    pub fn fraction(&self, pred: impl Fn(&TrialOutcome) -> bool) -> f64 {
        self.trials.iter().filter(|t| pred(t)).count() as f64 / self.trials.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for t in &self.trials {
            out.serialize(t)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// One SBM draw: PPR from a random planted seed, sweep cut, recovery and
/// separation statistics. Disconnected draws are resampled.
pub fn detectability_trial(spec: &SbmSpec, config: &DetectabilityConfig, trial: usize) -> Result<TrialOutcome> {
    let mut resamples = 0;
    let sample = loop {
        let draw = SbmSpec {
            seed: spec
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add((trial * (config.max_resamples + 1) + resamples) as u64),
            ..spec.clone()
        };
        let s = sbm_generate(&draw)?;
        if !config.require_connected || s.is_connected() {
            break s;
        }
        resamples += 1;
        if resamples > config.max_resamples {
            return Err(Error::InvalidInput(format!("SBM draw stayed disconnected after {resamples} resamples")));
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let seed_node = *sample.planted.choose(&mut rng).expect("planted group non-empty");
    let p = transition(&sample.adjacency)?;
    let mut v = vec![0.0; spec.n];
    v[seed_node] = 1.0;
    let ppr_cfg = PprConfig {
        alpha_ppr: config.alpha_ppr,
        tol: 1e-12,
        ..Default::default()
    };
    let r = ppr_solve(&p, &v, &ppr_cfg)?;
    let max_prefix = ((spec.s as f64) * config.max_prefix_factor).round().max(1.0) as usize;
    let sweep = sweep_cut(&r.scores, &sample.adjacency, Some(max_prefix))?;
    let hits = sweep.set.iter().filter(|&&v| sample.in_group[v]).count();
    let (mut sum_in, mut sum_out) = (0.0, 0.0);
    for (v, &x) in r.scores.iter().enumerate() {
        if sample.in_group[v] {
            sum_in += x;
        } else {
            sum_out += x;
        }
    }
    let mean_in = sum_in / spec.s as f64;
    let mean_out = sum_out / (spec.n - spec.s) as f64;
    let gap = mean_field_gap(spec.n, spec.s, spec.p_in, spec.p_out, config.alpha_ppr);
    Ok(TrialOutcome {
        trial,
        seed_node,
        recovery: hits as f64 / spec.s as f64,
        conductance: sweep.conductance,
        mean_in,
        mean_out,
        separated: mean_in - mean_out >= 0.5 * gap,
        resamples,
    })
}

pub fn detectability_harness(spec: &SbmSpec, config: &DetectabilityConfig) -> Result<DetectabilityReport> {
    spec.validate()?;
    let trials = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.trials)
            .map(|t| scope.spawn(move || detectability_trial(spec, config, t)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("trial worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(DetectabilityReport {
        spec: spec.clone(),
        gap: mean_field_gap(spec.n, spec.s, spec.p_in, spec.p_out, config.alpha_ppr),
        trials,
    })
}

/// Whether PPR reweights transitions by predictions and mixes in foreign signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PprMode {
    Plain,
    #[default]
    CrossBank,
}

/// Node suspicion: the largest prediction over incident edges.
pub fn node_scores(graph: &TransactionGraph, edge_scores: &[f64]) -> Vec<f64> {
    let mut s = vec![0.0f64; graph.node_count()];
    for (&(a, b), &y) in graph.edges.iter().zip(edge_scores) {
        s[a] = s[a].max(y);
        s[b] = s[b].max(y);
    }
    s
}

/// Accounts incident to at least one laundering edge.
pub fn malicious_accounts(collection: &GraphCollection) -> HashSet<AccountKey> {
    let mut out = HashSet::new();
    for g in collection.graphs.values() {
        for (&(a, b), &y) in g.edges.iter().zip(&g.edge_labels) {
            if y == 1 {
                out.insert(g.account(a).clone());
                out.insert(g.account(b).clone());
            }
        }
    }
    out
}

/// Seeded clusters for one market. `foreign_flags` maps record index to the
/// score the other institution assigned to its copy of a cross-border edge.
pub fn country_clusters(
    graph: &TransactionGraph,
    edge_scores: &[f64],
    foreign_flags: &HashMap<usize, f64>,
    config: &PprConfig,
    mode: PprMode,
) -> Result<Vec<Cluster>> {
    config.validate()?;
    if edge_scores.len() != graph.edge_count() {
        return Err(Error::InvalidInput(format!(
            "{} scores for {} edges in {}",
            edge_scores.len(),
            graph.edge_count(),
            graph.country
        )));
    }
    let n = graph.node_count();
    if n == 0 {
        return Ok(Vec::new());
    }
    let a = graph.collapsed_adjacency(None, config.directed)?;
    let (p, cross) = match mode {
        PprMode::Plain => (transition(&a)?, Vec::new()),
        PprMode::CrossBank => {
            let a_hat = graph.collapsed_adjacency(Some(edge_scores), config.directed)?;
            let mut cross = Vec::new();
            for (e, &(s, d)) in graph.edges.iter().enumerate() {
                if !graph.edge_cross_border[e] {
                    continue;
                }
                if let Some(&f) = foreign_flags.get(&graph.edge_records[e]) {
                    if f >= config.cross_flag_threshold {
                        cross.push((s, f));
                        cross.push((d, f));
                    }
                }
            }
            (cross_bank_transition(&a, &a_hat)?, cross)
        }
    };
    let ns = node_scores(graph, edge_scores);
    let mut seeds: Vec<usize> = (0..n).filter(|&v| ns[v] >= config.seed_threshold).collect();
    seeds.sort_by(|&x, &y| ns[y].total_cmp(&ns[x]).then(x.cmp(&y)));
    seeds.truncate(config.max_seeds);

    let mut covered = vec![false; n];
    let mut clusters = Vec::new();
    for q in seeds {
        if covered[q] {
            continue;
        }
        let (local, xc) = build_personalization(n, &[(q, ns[q])], &cross, config.cross_weight)?;
        let v: Vec<f64> = local.iter().zip(&xc).map(|(a, b)| a + b).collect();
        let r = ppr_solve(&p, &v, config)?;
        let members = extract_cluster(&r, config.score_threshold);
        members.iter().for_each(|&m| covered[m] = true);
        covered[q] = true;
        clusters.push(Cluster {
            id: clusters.len(),
            seed: graph.account(q).clone(),
            accounts: members.iter().map(|&m| graph.account(m).clone()).collect(),
            countries: std::iter::once(graph.country.clone()).collect(),
            hits: 0,
        });
    }
    Ok(clusters)
}

/// Clusters for every market, merged, with hits annotated from the labels.
pub fn cluster_collection(
    collection: &GraphCollection,
    scores: &BTreeMap<String, Vec<f64>>,
    config: &PprConfig,
    mode: PprMode,
) -> Result<ClusterSet> {
    // record -> (market, score) for every copy; a market only reads other markets' copies
    let mut copies: HashMap<usize, Vec<(&str, f64)>> = HashMap::new();
    for (c, g) in &collection.graphs {
        let s = scores
            .get(c)
            .ok_or_else(|| Error::InvalidInput(format!("no scores for market {c}")))?;
        for (e, &r) in g.edge_records.iter().enumerate() {
            if g.edge_cross_border[e] {
                copies.entry(r).or_default().push((c.as_str(), s[e]));
            }
        }
    }
    let mut dicts = Vec::new();
    for (c, g) in &collection.graphs {
        let flags: HashMap<usize, f64> = copies
            .iter()
            .filter_map(|(&r, list)| {
                list.iter()
                    .filter(|(m, _)| *m != c.as_str())
                    .map(|x| x.1)
                    .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))))
                    .map(|f| (r, f))
            })
            .collect();
        dicts.push(country_clusters(g, &scores[c], &flags, config, mode)?);
    }
    let mut set = merge_clusters(&dicts);
    set.annotate_hits(&malicious_accounts(collection));
    Ok(set)
}
