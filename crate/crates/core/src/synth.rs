//! Synthetic data: laundering-pattern injection, background transaction streams and
//! the two-block stochastic block model.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TransactionRecord;
use crate::error::{Error, Result};
use crate::graph::{AccountKey, GraphCollection};
use crate::tensor::SparseMatrix;

pub const PAYMENT_TYPES: [&str; 7] = ["ACH", "Bitcoin", "Cash", "Cheque", "Credit Card", "Reinvestment", "Wire"];
const LEGIT_PAYMENT_WEIGHTS: [f64; 7] = [0.25, 0.02, 0.10, 0.20, 0.25, 0.08, 0.10];
const ILLICIT_PAYMENT_WEIGHTS: [f64; 7] = [0.45, 0.10, 0.20, 0.05, 0.02, 0.0, 0.18];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    FanOut,
    Loop,
    GatherScatter,
    Hybrid,
}

impl PatternKind {
    pub const ALL: [PatternKind; 4] = [
        PatternKind::FanOut,
        PatternKind::Loop,
        PatternKind::GatherScatter,
        PatternKind::Hybrid,
    ];
}

impl FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "fan-out" | "fanout" => Ok(PatternKind::FanOut),
            "loop" | "cycle" => Ok(PatternKind::Loop),
            "gather-scatter" => Ok(PatternKind::GatherScatter),
            "hybrid" => Ok(PatternKind::Hybrid),
            other => Err(Error::InvalidInput(format!("unknown pattern `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPatternSpec {
    pub pattern: PatternKind,
    pub group_size: usize,
    pub countries: Vec<String>,
    pub amount_range: (f64, f64),
}

impl SyntheticPatternSpec {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 3 {
            return Err(Error::InvalidConfig(format!("group_size must be >= 3, got {}", self.group_size)));
        }
        if self.countries.is_empty() {
            return Err(Error::InvalidConfig("pattern needs at least one country".into()));
        }
        let (lo, hi) = self.amount_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidConfig(format!("amount_range must satisfy 0 < low <= high, got {lo}..{hi}")));
        }
        Ok(())
    }
}

/// Directed edges, over group-local account slots `0..group_size`, realizing a pattern.
pub fn pattern_edges(pattern: PatternKind, k: usize) -> Vec<(usize, usize)> {
    match pattern {
        PatternKind::FanOut => (1..k).map(|i| (0, i)).collect(),
        PatternKind::Loop => (0..k).map(|i| (i, (i + 1) % k)).collect(),
        PatternKind::GatherScatter => {
            // sources 1..=a gather into hub 0, which scatters to the rest
            let a = (k - 1) / 2;
            let mut e: Vec<_> = (1..=a).map(|i| (i, 0)).collect();
            e.extend((a + 1..k).map(|i| (0, i)));
            e
        }
        PatternKind::Hybrid => {
            // sources gather into collector 0, collector hands off to distributor 1,
            // distributor fans out
            let rest = k - 2;
            let a = rest.div_ceil(2).max(1).min(rest);
            let mut e: Vec<_> = (2..2 + a).map(|i| (i, 0)).collect();
            e.push((0, 1));
            e.extend((2 + a..k).map(|i| (1, i)));
            e
        }
    }
}

fn pick_payment<R: Rng>(rng: &mut R, weights: &[f64; 7]) -> &'static str {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (t, w) in PAYMENT_TYPES.iter().zip(weights) {
        if u < *w {
            return t;
        }
        u -= w;
    }
    PAYMENT_TYPES[0]
}

/// Records for one laundering group. Slot `i` lives in `countries[i % len]`;
/// `accounts`, when given, supplies existing identities for the first slots.
pub fn pattern_records<R: Rng>(
    spec: &SyntheticPatternSpec,
    rng: &mut R,
    id_prefix: &str,
    start_timestamp: i64,
    accounts: &[AccountKey],
) -> Result<(Vec<TransactionRecord>, Vec<AccountKey>)> {
    spec.validate()?;
    let k = spec.group_size;
    let group: Vec<AccountKey> = (0..k)
        .map(|i| {
            accounts.get(i).cloned().unwrap_or_else(|| {
                AccountKey::new(&spec.countries[i % spec.countries.len()], format!("{id_prefix}-{i}"))
            })
        })
        .collect();
    let (lo, hi) = spec.amount_range;
    let mut ts = start_timestamp;
    let records = pattern_edges(spec.pattern, k)
        .into_iter()
        .map(|(s, d)| {
            ts += rng.gen_range(60..3600);
            TransactionRecord {
                timestamp: ts,
                from_bank: group[s].bank.clone(),
                from_account: group[s].account.clone(),
                to_bank: group[d].bank.clone(),
                to_account: group[d].account.clone(),
                amount: round_cents(if hi > lo { rng.gen_range(lo..hi) } else { lo }),
                payment_type: pick_payment(rng, &ILLICIT_PAYMENT_WEIGHTS).to_string(),
                is_laundering: 1,
            }
        })
        .collect();
    Ok((records, group))
}

/// Adds a laundering group to an existing collection and returns its accounts.
pub fn inject_pattern<R: Rng>(
    mut collection: GraphCollection,
    spec: &SyntheticPatternSpec,
    rng: &mut R,
) -> Result<(GraphCollection, Vec<AccountKey>)> {
    for c in &spec.countries {
        if collection.graph(c).is_none() {
            return Err(Error::InvalidInput(format!("country `{c}` not in collection")));
        }
    }
    let prefix = format!("ml{}", collection.record_count());
    let (records, group) = pattern_records(spec, rng, &prefix, 0, &[])?;
    collection.add_records(&records)?;
    Ok((collection, group))
}

fn round_cents(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub n: usize,
    pub s: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub seed: u64,
}

impl SbmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.s >= self.n {
            return Err(Error::InvalidConfig(format!("need 0 < s < n, got s={} n={}", self.s, self.n)));
        }
        if !(0.0 <= self.p_out && self.p_out <= self.p_in && self.p_in <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= p_out <= p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SbmSample {
    /// Symmetric 0/1 adjacency without self-loops.
    pub adjacency: SparseMatrix,
    pub neighbors: Vec<Vec<usize>>,
    /// Sorted planted group.
    pub planted: Vec<usize>,
    pub in_group: Vec<bool>,
}

impl SbmSample {
    pub fn degrees(&self) -> Vec<f64> {
        self.neighbors.iter().map(|n| n.len() as f64).collect()
    }

    /// Undirected edge list `u,v` (u < v) with an `in_group` flag per endpoint pair.
    pub fn write_edges<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["u", "v", "planted_edge"])?;
        for (u, ns) in self.neighbors.iter().enumerate() {
            for &v in ns.iter().filter(|&&v| v > u) {
                let both = self.in_group[u] && self.in_group[v];
                out.write_record([u.to_string(), v.to_string(), u8::from(both).to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn is_connected(&self) -> bool {
        let n = self.neighbors.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &self.neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == n
    }
}

/// Two-block SBM with a uniformly random planted group.
pub fn sbm_generate(spec: &SbmSpec) -> Result<SbmSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut nodes: Vec<usize> = (0..spec.n).collect();
    nodes.shuffle(&mut rng);
    let mut planted = nodes[..spec.s].to_vec();
    planted.sort_unstable();
    let mut in_group = vec![false; spec.n];
    for &v in &planted {
        in_group[v] = true;
    }
    let mut neighbors = vec![Vec::new(); spec.n];
    let mut trip = Vec::new();
    for u in 0..spec.n {
        for v in u + 1..spec.n {
            let p = if in_group[u] && in_group[v] { spec.p_in } else { spec.p_out };
            if rng.gen::<f64>() < p {
                neighbors[u].push(v);
                neighbors[v].push(u);
                trip.push((u, v, 1.0));
                trip.push((v, u, 1.0));
            }
        }
    }
    Ok(SbmSample {
        adjacency: SparseMatrix::from_triplets(spec.n, spec.n, trip)?,
        neighbors,
        planted,
        in_group,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountrySpec {
    pub code: String,
    pub accounts: usize,
    pub transactions: usize,
    /// Multiplies every amount generated in this country.
    #[serde(default = "one")]
    pub amount_scale: f64,
}

fn one() -> f64 {
    1.0
}

/// Background traffic plus injected laundering groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub countries: Vec<CountrySpec>,
    /// Fraction of background transfers whose receiver sits in another country.
    pub cross_border_rate: f64,
    pub laundering_groups: usize,
    pub group_size: (usize, usize),
    /// Fraction of groups spread over two or more countries.
    pub cross_border_group_rate: f64,
    /// Fraction of group slots filled by existing background accounts.
    pub reuse_rate: f64,
    /// Laundering amount range before the country scale is applied.
    pub laundering_amounts: (f64, f64),
    /// Apply the home country's `amount_scale` to laundering amounts too.
    /// When false, laundering amounts are absolute and only the background
    /// differs between countries.
    pub scale_laundering: bool,
    /// Log-normal parameters of background amounts before scaling.
    pub legit_log_mean: f64,
    pub legit_log_sd: f64,
    /// Per-country override of `legit_log_sd`.
    pub country_log_sd: BTreeMap<String, f64>,
    /// Time span in days.
    pub days: i64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            countries: vec![
                CountrySpec { code: "US".into(), accounts: 400, transactions: 2500, amount_scale: 1.0 },
                CountrySpec { code: "DE".into(), accounts: 250, transactions: 1400, amount_scale: 1.0 },
                CountrySpec { code: "FR".into(), accounts: 200, transactions: 1000, amount_scale: 1.0 },
            ],
            cross_border_rate: 0.08,
            laundering_groups: 20,
            group_size: (4, 7),
            cross_border_group_rate: 0.5,
            reuse_rate: 0.3,
            laundering_amounts: (200.0, 3000.0),
            scale_laundering: true,
            legit_log_mean: 4.0,
            legit_log_sd: 1.3,
            country_log_sd: BTreeMap::new(),
            days: 10,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<TransactionRecord>,
    pub groups: Vec<Vec<AccountKey>>,
    pub patterns: Vec<PatternKind>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.countries.is_empty() {
            return Err(Error::InvalidConfig("dataset needs at least one country".into()));
        }
        if self.countries.iter().any(|c| c.accounts < 2) {
            return Err(Error::InvalidConfig("every country needs at least 2 accounts".into()));
        }
        let (lo, hi) = self.group_size;
        if lo < 3 || hi < lo {
            return Err(Error::InvalidConfig(format!("group_size range {lo}..{hi} invalid (min 3)")));
        }
        for (name, r) in [
            ("cross_border_rate", self.cross_border_rate),
            ("cross_border_group_rate", self.cross_border_group_rate),
            ("reuse_rate", self.reuse_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidConfig(format!("{name} {r} outside [0, 1]")));
            }
        }
        if self.days <= 0 {
            return Err(Error::InvalidConfig("days must be positive".into()));
        }
        Ok(())
    }
}

/// Generates a dataset; records are sorted by timestamp.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let span = spec.days * 86_400;
    let account = |c: &CountrySpec, i: usize| AccountKey::new(&c.code, format!("{}{:05}", c.code.to_lowercase(), i));
    let mut records = Vec::new();
    for (ci, c) in spec.countries.iter().enumerate() {
        let sd = spec.country_log_sd.get(&c.code).copied().unwrap_or(spec.legit_log_sd);
        let normal = Normal::new(spec.legit_log_mean, sd).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for _ in 0..c.transactions {
            let s = rng.gen_range(0..c.accounts);
            let (dc, d) = if spec.countries.len() > 1 && rng.gen::<f64>() < spec.cross_border_rate {
                let mut other = rng.gen_range(0..spec.countries.len() - 1);
                if other >= ci {
                    other += 1;
                }
                let oc = &spec.countries[other];
                (oc, skewed_index(&mut rng, oc.accounts))
            } else {
                let mut d = skewed_index(&mut rng, c.accounts);
                if d == s {
                    d = (d + 1) % c.accounts;
                }
                (c, d)
            };
            let from = account(c, s);
            let to = account(dc, d);
            records.push(TransactionRecord {
                timestamp: rng.gen_range(0..span),
                from_bank: from.bank,
                from_account: from.account,
                to_bank: to.bank,
                to_account: to.account,
                amount: round_cents((c.amount_scale * normal.sample(&mut rng).exp()).max(0.01)),
                payment_type: pick_payment(&mut rng, &LEGIT_PAYMENT_WEIGHTS).to_string(),
                is_laundering: 0,
            });
        }
    }
    let mut groups = Vec::with_capacity(spec.laundering_groups);
    let mut patterns = Vec::with_capacity(spec.laundering_groups);
    for g in 0..spec.laundering_groups {
        let pattern = PatternKind::ALL[g % 4];
        let size = rng.gen_range(spec.group_size.0..=spec.group_size.1);
        let home = rng.gen_range(0..spec.countries.len());
        let mut countries = vec![spec.countries[home].code.clone()];
        if spec.countries.len() > 1 && rng.gen::<f64>() < spec.cross_border_group_rate {
            let mut other = rng.gen_range(0..spec.countries.len() - 1);
            if other >= home {
                other += 1;
            }
            countries.push(spec.countries[other].code.clone());
        }
        let scale = if spec.scale_laundering { spec.countries[home].amount_scale } else { 1.0 };
        let pspec = SyntheticPatternSpec {
            pattern,
            group_size: size,
            countries: countries.clone(),
            amount_range: (spec.laundering_amounts.0 * scale, spec.laundering_amounts.1 * scale),
        };
        let reused: Vec<AccountKey> = (0..size)
            .map_while(|i| {
                (rng.gen::<f64>() < spec.reuse_rate).then(|| {
                    let c = spec
                        .countries
                        .iter()
                        .find(|c| c.code == countries[i % countries.len()])
                        .expect("country listed");
                    account(c, rng.gen_range(0..c.accounts))
                })
            })
            .collect();
        let mut unique = reused.clone();
        unique.sort();
        unique.dedup();
        let reused = if unique.len() == reused.len() { reused } else { Vec::new() };
        let start = rng.gen_range(0..span.max(2) - span / 10);
        let (recs, group) = pattern_records(&pspec, &mut rng, &format!("ml{g:03}"), start, &reused)?;
        records.extend(recs);
        groups.push(group);
        patterns.push(pattern);
    }
    records.sort_by_key(|r| r.timestamp);
    Ok(Dataset {
        records,
        groups,
        patterns,
    })
}

/// Index biased toward low values, giving a few hub receivers.
fn skewed_index<R: Rng>(rng: &mut R, n: usize) -> usize {
    let u: f64 = rng.gen();
    ((u * u) * n as f64) as usize % n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_collection;

    fn spec(pattern: PatternKind, k: usize, countries: &[&str]) -> SyntheticPatternSpec {
        SyntheticPatternSpec {
            pattern,
            group_size: k,
            countries: countries.iter().map(|s| s.to_string()).collect(),
            amount_range: (100.0, 200.0),
        }
    }

    #[test]
    fn fan_out_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (recs, group) = pattern_records(&spec(PatternKind::FanOut, 4, &["US"]), &mut rng, "g", 0, &[]).unwrap();
        assert_eq!(group.len(), 4);
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.is_laundering == 1 && r.from_account == "g-0"));
        let sinks: std::collections::BTreeSet<_> = recs.iter().map(|r| r.to_account.clone()).collect();
        assert_eq!(sinks.len(), 3);
    }

    #[test]
    fn loop_three_is_a_cycle() {
        assert_eq!(pattern_edges(PatternKind::Loop, 3), vec![(0, 1), (1, 2), (2, 0)]);
    }

    #[test]
    fn every_pattern_connects_the_whole_group() {
        for p in PatternKind::ALL {
            for k in 3..9 {
                let e = pattern_edges(p, k);
                let mut touched = vec![false; k];
                for (s, d) in &e {
                    touched[*s] = true;
                    touched[*d] = true;
                }
                assert!(touched.iter().all(|&t| t), "{p:?} k={k}");
            }
        }
        assert_eq!(pattern_edges(PatternKind::GatherScatter, 5), vec![(1, 0), (2, 0), (0, 3), (0, 4)]);
    }

    #[test]
    fn unknown_pattern_rejected() {
        assert!("smurfing".parse::<PatternKind>().is_err());
        assert_eq!("gather_scatter".parse::<PatternKind>().unwrap(), PatternKind::GatherScatter);
    }

    #[test]
    fn hybrid_across_two_countries_is_duplicated() {
        let base = vec![
            TransactionRecord {
                timestamp: 0,
                from_bank: "US".into(),
                from_account: "u".into(),
                to_bank: "US".into(),
                to_account: "v".into(),
                amount: 1.0,
                payment_type: "ACH".into(),
                is_laundering: 0,
            },
            TransactionRecord {
                timestamp: 0,
                from_bank: "DE".into(),
                from_account: "w".into(),
                to_bank: "DE".into(),
                to_account: "x".into(),
                amount: 1.0,
                payment_type: "ACH".into(),
                is_laundering: 0,
            },
        ];
        let c = build_collection(&base).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = spec(PatternKind::Hybrid, 6, &["US", "DE"]);
        let (c, group) = inject_pattern(c, &s, &mut rng).unwrap();
        assert_eq!(group.len(), 6);
        let edges = pattern_edges(PatternKind::Hybrid, 6);
        let cross = edges.iter().filter(|(a, b)| a % 2 != b % 2).count();
        let domestic = edges.len() - cross;
        let labelled: usize = c
            .graphs
            .values()
            .map(|g| g.edge_labels.iter().filter(|&&l| l == 1).count())
            .sum();
        assert_eq!(labelled, domestic + 2 * cross);
        assert!(cross > 0);
    }

    #[test]
    fn inject_requires_known_country() {
        let c = build_collection(&[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(inject_pattern(c, &spec(PatternKind::Loop, 3, &["US"]), &mut rng).is_err());
    }

    #[test]
    fn sbm_extremes() {
        let full = sbm_generate(&SbmSpec { n: 12, s: 4, p_in: 1.0, p_out: 1.0, seed: 1 }).unwrap();
        assert!(full.neighbors.iter().all(|n| n.len() == 11));
        let empty = sbm_generate(&SbmSpec { n: 12, s: 4, p_in: 0.0, p_out: 0.0, seed: 1 }).unwrap();
        assert_eq!(empty.adjacency.nnz(), 0);
    }

    #[test]
    fn sbm_is_symmetric_and_reproducible() {
        let spec = SbmSpec { n: 60, s: 10, p_in: 0.5, p_out: 0.1, seed: 9 };
        let a = sbm_generate(&spec).unwrap();
        let b = sbm_generate(&spec).unwrap();
        assert_eq!(a.adjacency, b.adjacency);
        assert_eq!(a.adjacency, a.adjacency.transpose());
        assert_eq!(a.planted, b.planted);
    }

    #[test]
    fn sbm_rejects_bad_spec() {
        assert!(sbm_generate(&SbmSpec { n: 10, s: 10, p_in: 0.5, p_out: 0.1, seed: 0 }).is_err());
        assert!(sbm_generate(&SbmSpec { n: 10, s: 3, p_in: 0.1, p_out: 0.5, seed: 0 }).is_err());
    }

    #[test]
    fn dataset_is_reproducible_and_labelled() {
        let spec = DatasetSpec::default();
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a.records, b.records);
        let pos = a.records.iter().filter(|r| r.is_laundering == 1).count();
        let expected: usize = a.groups.iter().zip(&a.patterns).map(|(g, p)| pattern_edges(*p, g.len()).len()).sum();
        assert_eq!(pos, expected);
        assert!(a.records.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }
}
