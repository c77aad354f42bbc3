//! Country-partitioned transaction graphs and the cross-border super-node registry.
//!
//! Every transaction becomes an edge in the graph of each partition it touches:
//! a domestic transfer lands in one graph, a cross-border transfer is duplicated
//! into both endpoint graphs. Nodes are indexed by first appearance, so the same
//! record list always produces the same collection.

use std::collections::{BTreeMap, HashMap};

use crate::data::TransactionRecord;
use crate::error::{Error, Result};
use crate::tensor::{SparseMatrix, Tensor};

/// Globally unique account identity: the bank code plus the opaque account id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AccountKey {
    pub bank: String,
    pub account: String,
}

impl AccountKey {
    pub fn new(bank: impl Into<String>, account: impl Into<String>) -> Self {
        Self {
            bank: bank.into(),
            account: account.into(),
        }
    }
}

impl std::fmt::Display for AccountKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.bank, self.account)
    }
}

/// A node of one country graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AccountId<'a> {
    pub country: &'a str,
    pub local_index: usize,
}

/// Maps bank codes to partition names ("Rest Countries" style bucketing).
/// Banks without an explicit mapping are their own partition.
#[derive(Debug, Clone, Default)]
pub struct Partitioner {
    map: HashMap<String, String>,
}

impl Partitioner {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn with(mut self, bank: impl Into<String>, partition: impl Into<String>) -> Self {
        self.map.insert(bank.into(), partition.into());
        self
    }

    pub fn partition_of<'a>(&'a self, bank: &'a str) -> &'a str {
        self.map.get(bank).map(String::as_str).unwrap_or(bank)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransactionGraph {
    pub country: String,
    accounts: Vec<AccountKey>,
    index: HashMap<AccountKey, usize>,
    /// `(src, dst)` local node indices, one per transaction; parallel edges kept.
    pub edges: Vec<(usize, usize)>,
    /// Index of the originating record for each edge.
    pub edge_records: Vec<usize>,
    pub edge_amounts: Vec<f64>,
    pub edge_labels: Vec<u8>,
    pub edge_payment_types: Vec<String>,
    pub edge_timestamps: Vec<i64>,
    /// True when the edge crosses a partition boundary.
    pub edge_cross_border: Vec<bool>,
    /// True for the copy that lives in the sender's partition (the canonical copy).
    pub edge_is_origin: Vec<bool>,
    pub node_features: Tensor,
    pub edge_features: Tensor,
}

impl TransactionGraph {
    pub fn new(country: impl Into<String>) -> Self {
        Self {
            country: country.into(),
            accounts: Vec::new(),
            index: HashMap::new(),
            edges: Vec::new(),
            edge_records: Vec::new(),
            edge_amounts: Vec::new(),
            edge_labels: Vec::new(),
            edge_payment_types: Vec::new(),
            edge_timestamps: Vec::new(),
            edge_cross_border: Vec::new(),
            edge_is_origin: Vec::new(),
            node_features: Tensor::zeros(&[0, 0]),
            edge_features: Tensor::zeros(&[0, 0]),
        }
    }

    pub fn node_count(&self) -> usize {
        self.accounts.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn accounts(&self) -> &[AccountKey] {
        &self.accounts
    }

    pub fn account(&self, local: usize) -> &AccountKey {
        &self.accounts[local]
    }

    pub fn local_index(&self, key: &AccountKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn account_id(&self, local: usize) -> AccountId<'_> {
        AccountId {
            country: &self.country,
            local_index: local,
        }
    }

    fn intern(&mut self, key: &AccountKey) -> usize {
        if let Some(&i) = self.index.get(key) {
            return i;
        }
        let i = self.accounts.len();
        self.accounts.push(key.clone());
        self.index.insert(key.clone(), i);
        i
    }

    fn push_edge(&mut self, rec: &TransactionRecord, record: usize, cross: bool, origin: bool) {
        let s = self.intern(&rec.from_key());
        let d = self.intern(&rec.to_key());
        self.edges.push((s, d));
        self.edge_records.push(record);
        self.edge_amounts.push(rec.amount);
        self.edge_labels.push(rec.is_laundering);
        self.edge_payment_types.push(rec.payment_type.clone());
        self.edge_timestamps.push(rec.timestamp);
        self.edge_cross_border.push(cross);
        self.edge_is_origin.push(origin);
    }

    /// Per-node out-degree, summing `weights` (1 per edge when absent).
    pub fn degree_vector(&self, weights: Option<&[f64]>) -> Result<Vec<f64>> {
        if let Some(w) = weights {
            if w.len() != self.edge_count() {
                return Err(Error::InvalidInput(format!(
                    "weight vector has length {} but graph has {} edges",
                    w.len(),
                    self.edge_count()
                )));
            }
        }
        let mut deg = vec![0.0; self.node_count()];
        for (e, &(s, _)) in self.edges.iter().enumerate() {
            deg[s] += weights.map_or(1.0, |w| w[e]);
        }
        Ok(deg)
    }

    /// Incident neighbors of every node, both directions, deduplicated and sorted.
    pub fn undirected_neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.node_count()];
        for &(s, d) in &self.edges {
            nb[s].push(d);
            if s != d {
                nb[d].push(s);
            }
        }
        for list in &mut nb {
            list.sort_unstable();
            list.dedup();
        }
        nb
    }

    /// Binary symmetric adjacency plus identity: the propagation operator of the encoder.
    pub fn encoder_adjacency(&self) -> SparseMatrix {
        let n = self.node_count();
        let mut trip: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * self.edge_count() + n);
        for (u, list) in self.undirected_neighbors().into_iter().enumerate() {
            for v in list {
                if v != u {
                    trip.push((u, v, 1.0));
                }
            }
            trip.push((u, u, 1.0));
        }
        SparseMatrix::from_triplets(n, n, trip).expect("indices in range")
    }

    /// Account-level adjacency with parallel edges collapsed by summing weights
    /// (1 per edge when absent). `directed = false` symmetrizes by the max of both
    /// directions.
    pub fn collapsed_adjacency(&self, weights: Option<&[f64]>, directed: bool) -> Result<SparseMatrix> {
        if let Some(w) = weights {
            if w.len() != self.edge_count() {
                return Err(Error::InvalidInput(format!(
                    "weight vector has length {} but graph has {} edges",
                    w.len(),
                    self.edge_count()
                )));
            }
        }
        let n = self.node_count();
        let trip = self
            .edges
            .iter()
            .enumerate()
            .map(|(e, &(s, d))| (s, d, weights.map_or(1.0, |w| w[e])));
        let a = SparseMatrix::from_triplets(n, n, trip)?;
        if directed {
            return Ok(a);
        }
        let mut sym: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (r, c, v) in a.triplets() {
            for key in [(r, c), (c, r)] {
                let slot = sym.entry(key).or_insert(0.0);
                *slot = slot.max(v);
            }
        }
        SparseMatrix::from_triplets(n, n, sym.into_iter().map(|((r, c), v)| (r, c, v)))
    }
}

/// One side of a cross-border account pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SupernodeEntry {
    pub home_country: String,
    pub foreign_country: String,
    /// Local index of the home account in the home graph.
    pub home_account: usize,
    /// Local index of the foreign account in the foreign graph.
    pub foreign_account: usize,
    pub home_key: AccountKey,
    pub foreign_key: AccountKey,
    /// Edge ids, in the home graph, of the transfers between the two accounts.
    pub cross_border_edge_ids: Vec<usize>,
}

impl SupernodeEntry {
    /// Identifier shared by an entry and its mirror.
    pub fn pair_key(&self) -> (AccountKey, AccountKey) {
        if self.home_key <= self.foreign_key {
            (self.home_key.clone(), self.foreign_key.clone())
        } else {
            (self.foreign_key.clone(), self.home_key.clone())
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SupernodeRegistry {
    pub entries: Vec<SupernodeEntry>,
}

/// How super-node embeddings summarize the neighbor set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Mean,
    /// Mean followed by per-dimension population variance.
    MeanVariance,
}

impl SupernodeRegistry {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose home side is `country`, with their registry positions.
    pub fn entries_for<'a>(&'a self, country: &'a str) -> impl Iterator<Item = (usize, &'a SupernodeEntry)> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.home_country == country)
    }

    /// Registry position of the mirror entry.
    pub fn mirror_of(&self, idx: usize) -> Option<usize> {
        let e = &self.entries[idx];
        self.entries.iter().position(|m| {
            m.home_country == e.foreign_country
                && m.foreign_country == e.home_country
                && m.home_key == e.foreign_key
                && m.foreign_key == e.home_key
        })
    }

    /// Neighbor sets `N` of the home account of each entry in `country`.
    pub fn neighbor_sets(&self, country: &str, graph: &TransactionGraph) -> Vec<(usize, Vec<usize>)> {
        let nb = graph.undirected_neighbors();
        self.entries_for(country)
            .map(|(i, e)| (i, nb[e.home_account].clone()))
            .collect()
    }

    /// Row-per-entry sparse matrix whose product with node embeddings gives the
    /// neighbor means. Returns the registry positions of the rows.
    pub fn mean_operator(&self, country: &str, graph: &TransactionGraph) -> Result<(Vec<usize>, SparseMatrix)> {
        let sets = self.neighbor_sets(country, graph);
        let mut rows = Vec::with_capacity(sets.len());
        let mut trip = Vec::new();
        for (r, (idx, set)) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::InvalidInput(format!("super-node entry {idx} has an empty neighbor set")));
            }
            let w = 1.0 / set.len() as f64;
            trip.extend(set.iter().map(|&v| (r, v, w)));
            rows.push(*idx);
        }
        let op = SparseMatrix::from_triplets(sets.len(), graph.node_count(), trip)?;
        Ok((rows, op))
    }
}

/// Neighbor-aggregated embedding for every entry whose home side is `country`.
pub fn neighbor_mean_embedding(
    registry: &SupernodeRegistry,
    country: &str,
    graph: &TransactionGraph,
    embeddings: &Tensor,
    mode: Aggregation,
) -> Result<Vec<(usize, Vec<f64>)>> {
    if embeddings.rows() != graph.node_count() {
        return Err(Error::ShapeMismatch {
            op: "neighbor_mean_embedding",
            left: embeddings.shape().to_vec(),
            right: vec![graph.node_count(), embeddings.cols()],
        });
    }
    let mut out = Vec::new();
    for (idx, set) in registry.neighbor_sets(country, graph) {
        out.push((idx, aggregate_rows(embeddings, &set, mode)?));
    }
    Ok(out)
}

/// Mean (and optionally population variance) of the selected rows.
pub fn aggregate_rows(embeddings: &Tensor, rows: &[usize], mode: Aggregation) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("empty neighbor set".into()));
    }
    let d = embeddings.cols();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &r in rows {
        for (m, &x) in mean.iter_mut().zip(embeddings.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    if mode == Aggregation::Mean {
        return Ok(mean);
    }
    let mut var = vec![0.0; d];
    for &r in rows {
        for ((v, &x), &m) in var.iter_mut().zip(embeddings.row(r)).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    mean.extend(var);
    Ok(mean)
}

#[derive(Debug, Clone, Default)]
pub struct GraphCollection {
    pub graphs: BTreeMap<String, TransactionGraph>,
    pub supernodes: SupernodeRegistry,
    partitioner: Partitioner,
    record_count: usize,
    entry_index: HashMap<(String, AccountKey, AccountKey), usize>,
}

impl GraphCollection {
    pub fn partitioner(&self) -> &Partitioner {
        &self.partitioner
    }

    pub fn countries(&self) -> impl Iterator<Item = &str> {
        self.graphs.keys().map(String::as_str)
    }

    pub fn graph(&self, country: &str) -> Option<&TransactionGraph> {
        self.graphs.get(country)
    }

    pub fn record_count(&self) -> usize {
        self.record_count
    }

    pub fn total_edges(&self) -> usize {
        self.graphs.values().map(TransactionGraph::edge_count).sum()
    }

    /// Appends records, keeping every existing node and edge index stable.
    /// Record indices continue from the records already added.
    pub fn add_records(&mut self, records: &[TransactionRecord]) -> Result<()> {
        for (i, rec) in records.iter().enumerate() {
            rec.validate().map_err(|reason| Error::InvalidRecord {
                index: self.record_count + i,
                reason,
            })?;
        }
        for rec in records {
            let record = self.record_count;
            self.record_count += 1;
            let from = self.partitioner.partition_of(&rec.from_bank).to_string();
            let to = self.partitioner.partition_of(&rec.to_bank).to_string();
            let cross = from != to;
            self.graphs
                .entry(from.clone())
                .or_insert_with(|| TransactionGraph::new(from.clone()))
                .push_edge(rec, record, cross, true);
            if cross {
                let g = self
                    .graphs
                    .entry(to.clone())
                    .or_insert_with(|| TransactionGraph::new(to.clone()));
                g.push_edge(rec, record, cross, false);
                self.register_cross_border(&from, &to, rec);
            }
        }
        Ok(())
    }

    fn register_cross_border(&mut self, from: &str, to: &str, rec: &TransactionRecord) {
        let a = rec.from_key();
        let b = rec.to_key();
        let (from_graph, to_graph) = (&self.graphs[from], &self.graphs[to]);
        let a_in_from = from_graph.local_index(&a).expect("interned");
        let b_in_to = to_graph.local_index(&b).expect("interned");
        let edge_in_from = from_graph.edge_count() - 1;
        let edge_in_to = to_graph.edge_count() - 1;
        // the sender-side entry, then its mirror
        self.upsert(from, to, &a, &b, a_in_from, b_in_to, edge_in_from);
        self.upsert(to, from, &b, &a, b_in_to, a_in_from, edge_in_to);
    }

    #[allow(clippy::too_many_arguments)]
    fn upsert(
        &mut self,
        home: &str,
        foreign: &str,
        home_key: &AccountKey,
        foreign_key: &AccountKey,
        home_account: usize,
        foreign_account: usize,
        edge: usize,
    ) {
        let key = (home.to_string(), home_key.clone(), foreign_key.clone());
        if let Some(&i) = self.entry_index.get(&key) {
            self.supernodes.entries[i].cross_border_edge_ids.push(edge);
            return;
        }
        self.entry_index.insert(key, self.supernodes.entries.len());
        self.supernodes.entries.push(SupernodeEntry {
            home_country: home.to_string(),
            foreign_country: foreign.to_string(),
            home_account,
            foreign_account,
            home_key: home_key.clone(),
            foreign_key: foreign_key.clone(),
            cross_border_edge_ids: vec![edge],
        });
    }
}

/// Builds the per-country graphs and the super-node registry.
pub fn build_collection(records: &[TransactionRecord]) -> Result<GraphCollection> {
    build_collection_with(records, Partitioner::identity())
}

pub fn build_collection_with(records: &[TransactionRecord], partitioner: Partitioner) -> Result<GraphCollection> {
    let mut c = GraphCollection {
        partitioner,
        ..Default::default()
    };
    c.add_records(records)?;
    Ok(c)
}
