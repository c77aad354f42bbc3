//! Simulated multi-institution training.
//!
//! Every client owns one market graph and trains on it in its own thread. The
//! coordinator only ever sees [`Message`] values: parameter snapshots and
//! neighbor-aggregated super-node vectors. Raw features, labels and edges stay
//! inside the worker.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::mpsc;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{aggregate_rows, Aggregation, GraphCollection, SupernodeRegistry, TransactionGraph};
use crate::metrics::{auprc, auroc, error_rates, ScoreRow};
use crate::model::{encode, init_params, loss_and_gradients, predict_edges, ConsistencyTargets, EncoderConfig, LossConfig, LossParts, ModelInput};
use crate::params::{sgd_step, ModelParams};
use crate::tensor::{SparseMatrix, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Federated,
    /// Each client trains alone: no averaging, no super-node exchange.
    Isolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    /// Total local epochs per client.
    pub rounds: usize,
    /// Aggregate every `comm_frequency` epochs.
    pub comm_frequency: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub mode: Mode,
    /// Participating markets; all markets when empty.
    pub clients: Vec<String>,
    /// Weight clients by edge count instead of the plain mean.
    pub weighted: bool,
    pub aggregation: Aggregation,
    /// Evaluate every this many aggregations (0 = final only).
    pub eval_every: usize,
    /// Flag threshold for Type I/II columns of the round metrics.
    pub threshold: f64,
    /// Average Adam moments along with the parameters. Without this each
    /// client normalises its own step and the mean update degenerates into a
    /// per-coordinate sign vote, which drifts on the consistency objective.
    pub sync_optimizer: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            comm_frequency: 1,
            lr: 0.01,
            seed: 0,
            optimizer: Optimizer::Adam,
            mode: Mode::Federated,
            clients: Vec::new(),
            weighted: false,
            aggregation: Aggregation::Mean,
            eval_every: 10,
            threshold: 0.5,
            sync_optimizer: true,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.comm_frequency == 0 {
            return Err(Error::InvalidConfig("comm_frequency must be at least 1".into()));
        }
        if self.rounds < self.comm_frequency {
            return Err(Error::InvalidConfig(format!(
                "rounds ({}) must be at least comm_frequency ({})",
                self.rounds, self.comm_frequency
            )));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        Ok(())
    }
}

/// The only values that cross a client boundary.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Params { from: String, params: ModelParams },
    /// Aggregated neighbor embeddings keyed by registry position of the sender's entry.
    SupernodeEmbeddings { from: String, entries: Vec<(usize, Vec<f64>)> },
}

/// Private, per-market training data. Never leaves its worker.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub country: String,
    pub input: ModelInput,
    pub train_edges: Vec<usize>,
    pub eval_edges: Vec<usize>,
    pub origin: Vec<bool>,
    /// Registry position and local neighbor set of each home super-node entry.
    pub supernodes: Vec<(usize, Vec<usize>)>,
}

impl ClientData {
    /// `train_mask` is indexed by record; edges of training records are labelled.
    pub fn new(graph: &TransactionGraph, registry: &SupernodeRegistry, train_mask: &[bool]) -> Result<Self> {
        let mut train_edges = Vec::new();
        let mut eval_edges = Vec::new();
        for (e, &r) in graph.edge_records.iter().enumerate() {
            let is_train = *train_mask
                .get(r)
                .ok_or_else(|| Error::InvalidInput(format!("train mask has no entry for record {r}")))?;
            if is_train {
                train_edges.push(e);
            } else {
                eval_edges.push(e);
            }
        }
        Ok(Self {
            country: graph.country.clone(),
            input: ModelInput::from_graph(graph),
            train_edges,
            eval_edges,
            origin: graph.edge_is_origin.clone(),
            supernodes: registry.neighbor_sets(&graph.country, graph),
        })
    }

    pub fn edge_count(&self) -> usize {
        self.input.edge_count()
    }
}

#[derive(Debug, Clone, Default)]
struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub country: String,
    pub params: ModelParams,
    pub epoch: usize,
    /// Latest foreign-side vectors, keyed by registry position of the home entry.
    pub foreign: HashMap<usize, Vec<f64>>,
    pub last_loss: LossParts,
    adam: AdamState,
}

impl ClientState {
    pub fn new(country: impl Into<String>, params: ModelParams) -> Self {
        Self {
            country: country.into(),
            params,
            epoch: 0,
            foreign: HashMap::new(),
            last_loss: LossParts::default(),
            adam: AdamState::default(),
        }
    }
}

/// Static training settings shared by all clients.
#[derive(Debug, Clone, Default)]
pub struct TrainSpec {
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub optimizer: Optimizer,
}

fn consistency_targets(data: &ClientData, foreign: &HashMap<usize, Vec<f64>>, dim: usize) -> Result<Option<ConsistencyTargets>> {
    let mut trip = Vec::new();
    let mut targets = Vec::new();
    let mut r = 0;
    for (idx, set) in &data.supernodes {
        let Some(f) = foreign.get(idx) else { continue };
        if set.is_empty() {
            continue;
        }
        if f.len() < dim {
            return Err(Error::ShapeMismatch {
                op: "self_consistency",
                left: vec![f.len()],
                right: vec![dim],
            });
        }
        let w = 1.0 / set.len() as f64;
        trip.extend(set.iter().map(|&v| (r, v, w)));
        targets.extend_from_slice(&f[..dim]);
        r += 1;
    }
    if r == 0 {
        return Ok(None);
    }
    Ok(Some(ConsistencyTargets {
        operator: SparseMatrix::from_triplets(r, data.input.node_count(), trip)?,
        targets: Tensor::matrix(r, dim, targets)?,
    }))
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_step(params: &ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64) -> Result<ModelParams> {
    params.check_aligned(grads)?;
    if state.m.is_empty() {
        state.m = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_B1.powi(state.t);
    let c2 = 1.0 - ADAM_B2.powi(state.t);
    let mut out = ModelParams::new();
    for (k, ((name, p), g)) in params.iter().zip(grads.tensors()).enumerate() {
        let mut next = p.clone();
        for (i, (x, &d)) in next.data_mut().iter_mut().zip(g.data()).enumerate() {
            let m = &mut state.m[k][i];
            let v = &mut state.v[k][i];
            *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * d;
            *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * d * d;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
        out.push(name, next);
    }
    Ok(out)
}

/// One full-batch gradient step on the client's own graph.
pub fn local_epoch(client: &mut ClientState, data: &ClientData, spec: &TrainSpec, lr: f64) -> Result<LossParts> {
    let dim = spec.encoder.embedding_dim();
    let consistency = consistency_targets(data, &client.foreign, dim)?;
    let (parts, grads) = loss_and_gradients(
        &data.input,
        &client.params,
        &spec.encoder,
        &spec.loss,
        Some(&data.train_edges),
        consistency.as_ref(),
    )?;
    if !parts.total.is_finite() || !grads.all_finite() {
        return Err(Error::NonFiniteLoss {
            client: client.country.clone(),
            epoch: client.epoch,
        });
    }
    client.params = match spec.optimizer {
        Optimizer::Sgd => sgd_step(&client.params, &grads, lr)?,
        Optimizer::Adam => adam_step(&client.params, &grads, &mut client.adam, lr)?,
    };
    client.epoch += 1;
    client.last_loss = parts;
    Ok(parts)
}

/// Per-tensor arithmetic mean.
pub fn fed_average(params: &[ModelParams]) -> Result<ModelParams> {
    let weights = vec![1.0; params.len()];
    fed_average_weighted(params, &weights)
}

/// Per-tensor weighted mean; weights need not sum to one.
pub fn fed_average_weighted(params: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = params
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot average zero clients".into()))?;
    if weights.len() != params.len() {
        return Err(Error::InvalidInput("one weight per client required".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::InvalidInput("client weights must be non-negative with positive sum".into()));
    }
    for p in &params[1..] {
        first.check_aligned(p)?;
    }
    if params.len() == 1 {
        return Ok(first.clone());
    }
    let mut out = ModelParams::new();
    let mut column: Vec<(f64, f64)> = Vec::with_capacity(params.len());
    for (k, (name, t)) in first.iter().enumerate() {
        let sources: Vec<&[f64]> = params.iter().map(|p| p.tensors().nth(k).expect("aligned").data()).collect();
        let mut acc = Vec::with_capacity(t.len());
        for i in 0..t.len() {
            column.clear();
            column.extend(sources.iter().zip(weights).map(|(src, &w)| (src[i], w)));
            acc.push(offset_mean(&mut column, total));
        }
        out.push(name, Tensor::new(t.shape().to_vec(), acc)?);
    }
    Ok(out)
}

// Sorted offsets from the minimum: exact for identical inputs and independent
// of client order.
fn offset_mean(column: &mut [(f64, f64)], total: f64) -> f64 {
    column.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let base = column[0].0;
    let offset: f64 = column.iter().map(|&(x, w)| w * (x - base)).sum();
    base + offset / total
}

/// Replaces every client's Adam moments by their (weighted) mean so the next
/// local steps share one normaliser.
fn sync_moments(clients: &mut [ClientState], weights: &[f64]) {
    if clients.len() < 2 || clients.iter().any(|c| c.adam.m.is_empty()) {
        return;
    }
    let total: f64 = weights.iter().sum();
    let mut column: Vec<(f64, f64)> = Vec::with_capacity(clients.len());
    let mut mean = |pick: fn(&AdamState) -> &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let first = pick(&clients[0].adam);
        first
            .iter()
            .enumerate()
            .map(|(k, t)| {
                (0..t.len())
                    .map(|i| {
                        column.clear();
                        column.extend(clients.iter().zip(weights).map(|(c, &w)| (pick(&c.adam)[k][i], w)));
                        offset_mean(&mut column, total)
                    })
                    .collect()
            })
            .collect()
    };
    let m = mean(|a| &a.m);
    let v = mean(|a| &a.v);
    for c in clients.iter_mut() {
        c.adam.m = m.clone();
        c.adam.v = v.clone();
    }
}

/// Home-side aggregated vectors for every super-node entry of the client.
pub fn supernode_message(client: &ClientState, data: &ClientData, encoder: &EncoderConfig, mode: Aggregation) -> Result<Message> {
    let h = encode(&data.input, &client.params, encoder)?;
    let mut entries = Vec::with_capacity(data.supernodes.len());
    for (idx, set) in &data.supernodes {
        entries.push((*idx, aggregate_rows(&h, set, mode)?));
    }
    Ok(Message::SupernodeEmbeddings {
        from: client.country.clone(),
        entries,
    })
}

/// Routes every client's super-node vectors to the client holding the mirror entry.
pub fn exchange_supernodes(
    clients: &mut [ClientState],
    data: &[ClientData],
    registry: &SupernodeRegistry,
    encoder: &EncoderConfig,
    mode: Aggregation,
) -> Result<()> {
    let (tx, rx) = mpsc::channel();
    for (c, d) in clients.iter().zip(data) {
        if !d.supernodes.is_empty() {
            tx.send(supernode_message(c, d, encoder, mode)?).expect("receiver alive");
        }
    }
    drop(tx);
    let slot: HashMap<String, usize> = clients.iter().enumerate().map(|(i, c)| (c.country.clone(), i)).collect();
    let mirrors = mirror_table(registry)?;
    for msg in rx {
        let Message::SupernodeEmbeddings { entries, .. } = msg else { continue };
        for (idx, vec) in entries {
            let m = mirrors[idx];
            if let Some(&target) = slot.get(&registry.entries[m].home_country) {
                clients[target].foreign.insert(m, vec);
            }
        }
    }
    Ok(())
}

fn mirror_table(registry: &SupernodeRegistry) -> Result<Vec<usize>> {
    let mut by_key: HashMap<(&str, &str, _, _), usize> = HashMap::new();
    for (i, e) in registry.entries.iter().enumerate() {
        by_key.insert((e.home_country.as_str(), e.foreign_country.as_str(), &e.home_key, &e.foreign_key), i);
    }
    registry
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            by_key
                .get(&(e.foreign_country.as_str(), e.home_country.as_str(), &e.foreign_key, &e.home_key))
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("super-node entry {i} has no mirror")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub client: String,
    pub loss: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub type1: Option<f64>,
    pub type2: Option<f64>,
}

pub fn write_round_metrics<W: std::io::Write>(w: W, rows: &[RoundMetrics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["round", "client", "loss", "auroc", "auprc", "type1", "type2"])?;
    let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    for r in rows {
        out.write_record([
            r.round.to_string(),
            r.client.clone(),
            format!("{:.6}", r.loss),
            f(r.auroc),
            f(r.auprc),
            f(r.type1),
            f(r.type2),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    /// Global parameters after the final aggregation (first client's in isolated mode).
    pub global: ModelParams,
    pub clients: BTreeMap<String, ModelParams>,
    pub metrics: Vec<RoundMetrics>,
}

impl FederationOutcome {
    pub fn params_for(&self, country: &str) -> &ModelParams {
        self.clients.get(country).unwrap_or(&self.global)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        if let Some(last) = self.metrics.iter().map(|m| m.round).max() {
            for m in self.metrics.iter().filter(|m| m.round == last) {
                let _ = writeln!(s, "{} loss={:.5} auprc={}", m.client, m.loss, m.auprc.map_or("-".into(), |v| format!("{v:.4}")));
            }
        }
        s
    }
}

/// Held-out metrics for one client under the given parameters.
pub fn evaluate_client(data: &ClientData, params: &ModelParams, encoder: &EncoderConfig, threshold: f64) -> Result<(Option<f64>, Option<f64>, Option<f64>, Option<f64>)> {
    let probs = predict_edges(&data.input, params, encoder)?;
    let s: Vec<f64> = data.eval_edges.iter().map(|&e| probs[e]).collect();
    let y: Vec<f64> = data.eval_edges.iter().map(|&e| data.input.labels[e]).collect();
    let rates = error_rates(&s, &y, threshold)?;
    Ok((auroc(&s, &y).ok(), auprc(&s, &y).ok(), rates.type1, rates.type2))
}

/// Prepares one [`ClientData`] per participating market.
pub fn client_data(collection: &GraphCollection, train_mask: &[bool], clients: &[String]) -> Result<Vec<ClientData>> {
    let names: Vec<String> = if clients.is_empty() {
        collection.countries().map(String::from).collect()
    } else {
        clients.to_vec()
    };
    names
        .iter()
        .map(|c| {
            let g = collection
                .graph(c)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown client market `{c}`")))?;
            ClientData::new(g, &collection.supernodes, train_mask)
        })
        .collect()
}

/// k local epochs per client in parallel worker threads, then aggregation and
/// super-node exchange on the coordinator, until `rounds` epochs are done.
pub fn run_federation(
    data: &[ClientData],
    registry: &SupernodeRegistry,
    spec: &TrainSpec,
    config: &FederationConfig,
) -> Result<FederationOutcome> {
    config.validate()?;
    spec.encoder.validate()?;
    spec.loss.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("federation needs at least one client".into()));
    }
    let init = init_params(&spec.encoder, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let mut clients: Vec<ClientState> = data.iter().map(|d| ClientState::new(d.country.clone(), init.clone())).collect();
    let weights: Vec<f64> = data.iter().map(|d| d.edge_count().max(1) as f64).collect();
    let federated = config.mode == Mode::Federated;
    let mut global = init;
    let mut metrics = Vec::new();
    let mut done = 0;
    let mut round = 0;

    while done < config.rounds {
        let k = config.comm_frequency.min(config.rounds - done);
        let (tx, rx) = mpsc::channel::<(usize, Message)>();
        let results: Vec<Result<ClientState>> = std::thread::scope(|scope| {
            let handles: Vec<_> = clients
                .drain(..)
                .zip(data)
                .enumerate()
                .map(|(i, (mut c, d))| {
                    let tx = tx.clone();
                    scope.spawn(move || -> Result<ClientState> {
                        for _ in 0..k {
                            local_epoch(&mut c, d, spec, config.lr)?;
                        }
                        tx.send((
                            i,
                            Message::Params {
                                from: c.country.clone(),
                                params: c.params.clone(),
                            },
                        ))
                        .expect("coordinator alive");
                        Ok(c)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("client worker panicked")).collect()
        });
        drop(tx);
        clients = results.into_iter().collect::<Result<_>>()?;
        done += k;
        round += 1;

        if federated {
            let mut snapshots: Vec<(usize, ModelParams)> = rx
                .into_iter()
                .filter_map(|(i, m)| match m {
                    Message::Params { params, .. } => Some((i, params)),
                    Message::SupernodeEmbeddings { .. } => None,
                })
                .collect();
            // arrival order is nondeterministic; aggregate in client order
            snapshots.sort_by_key(|(i, _)| *i);
            let (order, params): (Vec<usize>, Vec<ModelParams>) = snapshots.into_iter().unzip();
            let w: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
            global = if config.weighted {
                fed_average_weighted(&params, &w)?
            } else {
                fed_average(&params)?
            };
            for c in &mut clients {
                c.params = global.clone();
            }
            if config.sync_optimizer {
                let w = if config.weighted { weights.clone() } else { vec![1.0; clients.len()] };
                sync_moments(&mut clients, &w);
            }
            if spec.loss.lambda2 > 0.0 {
                exchange_supernodes(&mut clients, data, registry, &spec.encoder, config.aggregation)?;
            }
        }

        let last = done == config.rounds;
        if last || (config.eval_every > 0 && round % config.eval_every == 0) {
            for (c, d) in clients.iter().zip(data) {
                let (auroc, auprc, type1, type2) = evaluate_client(d, &c.params, &spec.encoder, config.threshold)?;
                metrics.push(RoundMetrics {
                    round,
                    client: c.country.clone(),
                    loss: c.last_loss.total,
                    auroc,
                    auprc,
                    type1,
                    type2,
                });
            }
            debug!("round {round} ({done} epochs) evaluated");
        }
    }
    info!("training finished after {done} epochs and {round} rounds");
    if !federated {
        global = clients[0].params.clone();
    }
    Ok(FederationOutcome {
        global,
        clients: clients.into_iter().map(|c| (c.country, c.params)).collect(),
        metrics,
    })
}

/// Plain full-batch training of a single model on a single graph.
pub fn train_centralized(data: &ClientData, spec: &TrainSpec, epochs: usize, lr: f64, seed: u64) -> Result<ModelParams> {
    let init = init_params(&spec.encoder, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut c = ClientState::new(data.country.clone(), init);
    for _ in 0..epochs {
        local_epoch(&mut c, data, spec, lr)?;
    }
    Ok(c.params)
}

/// Score rows for every edge of every client, each scored with its own parameters.
pub fn score_clients(data: &[ClientData], outcome: &FederationOutcome, encoder: &EncoderConfig) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::new();
    for d in data {
        let probs = predict_edges(&d.input, outcome.params_for(&d.country), encoder)?;
        for (e, p) in probs.into_iter().enumerate() {
            rows.push(ScoreRow::new(&d.country, e, p, d.input.labels[e] as u8, d.origin[e]));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TransactionRecord;
    use crate::features::{featurize, FeatureConfig};
    use crate::graph::build_collection;

    fn rec(fb: &str, fa: &str, tb: &str, ta: &str, amount: f64, y: u8) -> TransactionRecord {
        TransactionRecord {
            timestamp: 0,
            from_bank: fb.into(),
            from_account: fa.into(),
            to_bank: tb.into(),
            to_account: ta.into(),
            amount,
            payment_type: if y == 1 { "Wire".into() } else { "ACH".into() },
            is_laundering: y,
        }
    }

    fn toy_collection() -> GraphCollection {
        let mut recs = Vec::new();
        for i in 0..6 {
            recs.push(rec("US", &format!("a{i}"), "US", &format!("a{}", (i + 1) % 6), 100.0 + i as f64, 0));
            recs.push(rec("DE", &format!("b{i}"), "DE", &format!("b{}", (i + 2) % 6), 80.0 + i as f64, 0));
        }
        recs.push(rec("US", "x", "US", "y", 9000.0, 1));
        recs.push(rec("US", "y", "DE", "z", 9500.0, 1));
        recs.push(rec("DE", "z", "DE", "b0", 9100.0, 1));
        recs.push(rec("US", "a1", "DE", "b3", 120.0, 0));
        let mut c = build_collection(&recs).unwrap();
        featurize(
            &mut c,
            &FeatureConfig {
                fixed_range: Some((0.0, 10_000.0)),
                ..Default::default()
            },
        )
        .unwrap();
        c
    }

    fn small_spec() -> TrainSpec {
        TrainSpec {
            encoder: EncoderConfig {
                layers: 1,
                hidden_dim: 4,
                mlp_hidden: vec![4],
                membership_clusters: 2,
                ..Default::default()
            },
            loss: LossConfig::default(),
            optimizer: Optimizer::Adam,
        }
    }

    fn all_train(c: &GraphCollection) -> Vec<bool> {
        vec![true; c.record_count()]
    }

    fn scalar(x: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.push("w", Tensor::scalar(x));
        p
    }

    #[test]
    fn averaging_arithmetic() {
        assert_eq!(fed_average(&[scalar(0.0), scalar(2.0)]).unwrap(), scalar(1.0));
        assert_eq!(fed_average(&[scalar(0.3)]).unwrap(), scalar(0.3));
        let a = fed_average(&[scalar(0.1), scalar(0.7), scalar(-2.0)]).unwrap();
        let b = fed_average(&[scalar(-2.0), scalar(0.1), scalar(0.7)]).unwrap();
        assert_eq!(a, b);
        assert_eq!(fed_average_weighted(&[scalar(0.0), scalar(4.0)], &[3.0, 1.0]).unwrap(), scalar(1.0));
        assert!(fed_average(&[]).is_err());
        let mut wide = ModelParams::new();
        wide.push("w", Tensor::zeros(&[2]));
        assert!(fed_average(&[scalar(1.0), wide]).is_err());
    }

    #[test]
    fn averaging_identical_params_is_identity() {
        let x = init_params(&small_spec().encoder, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(fed_average(&[x.clone(), x.clone(), x.clone()]).unwrap(), x);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let c = toy_collection();
        let data = client_data(&c, &all_train(&c), &[]).unwrap();
        let spec = TrainSpec {
            optimizer: Optimizer::Sgd,
            ..small_spec()
        };
        let init = init_params(&spec.encoder, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut st = ClientState::new("US", init.clone());
        local_epoch(&mut st, &data[1], &spec, 0.0).unwrap();
        assert_eq!(st.params, init);
    }

    #[test]
    fn loss_decreases_on_toy_graph() {
        let c = toy_collection();
        let data = client_data(&c, &all_train(&c), &["US".into()]).unwrap();
        let spec = TrainSpec {
            loss: LossConfig {
                lambda1: 0.0,
                lambda2: 0.0,
                ..Default::default()
            },
            optimizer: Optimizer::Sgd,
            ..small_spec()
        };
        let init = init_params(&spec.encoder, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut st = ClientState::new("US", init);
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let l = local_epoch(&mut st, &data[0], &spec, 0.05).unwrap().total;
            assert!(l <= prev + 1e-12, "{l} > {prev}");
            prev = l;
        }
    }

    #[test]
    fn single_client_federation_equals_centralized() {
        let c = toy_collection();
        let data = client_data(&c, &all_train(&c), &["US".into()]).unwrap();
        let spec = small_spec();
        let cfg = FederationConfig {
            rounds: 12,
            comm_frequency: 3,
            seed: 9,
            ..Default::default()
        };
        let fed = run_federation(&data, &c.supernodes, &spec, &cfg).unwrap();
        let central = train_centralized(&data[0], &spec, 12, cfg.lr, 9).unwrap();
        assert_eq!(fed.global, central);
    }

    #[test]
    fn one_aggregation_at_end_equals_independent_training_then_average() {
        let c = toy_collection();
        let data = client_data(&c, &all_train(&c), &[]).unwrap();
        let spec = small_spec();
        let cfg = FederationConfig {
            rounds: 8,
            comm_frequency: 8,
            seed: 2,
            ..Default::default()
        };
        let fed = run_federation(&data, &c.supernodes, &spec, &cfg).unwrap();
        let solo: Vec<ModelParams> = data.iter().map(|d| train_centralized(d, &spec, 8, cfg.lr, 2).unwrap()).collect();
        assert_eq!(fed.global, fed_average(&solo).unwrap());
        assert!(fed.clients.values().all(|p| *p == fed.global));
    }

    #[test]
    fn synced_moments_are_the_client_mean() {
        let mut a = ClientState::new("A", ModelParams::new());
        let mut b = ClientState::new("B", ModelParams::new());
        a.adam = AdamState { m: vec![vec![1.0, -2.0]], v: vec![vec![4.0, 0.0]], t: 3 };
        b.adam = AdamState { m: vec![vec![3.0, 2.0]], v: vec![vec![0.0, 8.0]], t: 3 };
        let mut clients = vec![a, b];
        sync_moments(&mut clients, &[1.0, 1.0]);
        for c in &clients {
            assert_eq!(c.adam.m, vec![vec![2.0, 0.0]]);
            assert_eq!(c.adam.v, vec![vec![2.0, 4.0]]);
        }
        sync_moments(&mut clients, &[1.0, 3.0]);
        assert_eq!(clients[1].adam.m, vec![vec![2.0, 0.0]]);
    }

    #[test]
    fn exchange_routes_mirror_vectors() {
        let c = toy_collection();
        let data = client_data(&c, &all_train(&c), &[]).unwrap();
        let spec = small_spec();
        let init = init_params(&spec.encoder, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut clients: Vec<ClientState> = data.iter().map(|d| ClientState::new(d.country.clone(), init.clone())).collect();
        exchange_supernodes(&mut clients, &data, &c.supernodes, &spec.encoder, Aggregation::Mean).unwrap();
        let (de, us) = (&clients[0], &clients[1]);
        assert_eq!(de.country, "DE");
        let Message::SupernodeEmbeddings { entries, .. } = supernode_message(&clients[0], &data[0], &spec.encoder, Aggregation::Mean).unwrap() else {
            unreachable!()
        };
        assert!(!entries.is_empty());
        for (idx, v) in entries {
            let m = c.supernodes.mirror_of(idx).unwrap();
            assert_eq!(us.foreign[&m], v);
        }
        assert_eq!(us.foreign.len(), de.foreign.len());
    }

    #[test]
    fn exchange_without_cross_border_is_noop() {
        let recs = vec![rec("US", "a", "US", "b", 5.0, 0), rec("DE", "c", "DE", "d", 5.0, 1)];
        let mut c = build_collection(&recs).unwrap();
        featurize(
            &mut c,
            &FeatureConfig {
                fixed_range: Some((0.0, 10.0)),
                ..Default::default()
            },
        )
        .unwrap();
        let data = client_data(&c, &all_train(&c), &[]).unwrap();
        let spec = small_spec();
        let init = init_params(&spec.encoder, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut clients: Vec<ClientState> = data.iter().map(|d| ClientState::new(d.country.clone(), init.clone())).collect();
        exchange_supernodes(&mut clients, &data, &c.supernodes, &spec.encoder, Aggregation::Mean).unwrap();
        assert!(clients.iter().all(|c| c.foreign.is_empty()));
    }

    #[test]
    fn message_enum_is_exhaustively_params_or_supernodes() {
        // Adding a variant breaks this match at compile time.
        fn kind(m: &Message) -> &'static str {
            match m {
                Message::Params { .. } => "params",
                Message::SupernodeEmbeddings { .. } => "supernodes",
            }
        }
        assert_eq!(kind(&Message::Params { from: "US".into(), params: scalar(0.0) }), "params");
        assert_eq!(kind(&Message::SupernodeEmbeddings { from: "US".into(), entries: vec![] }), "supernodes");
    }

    #[test]
    fn identical_clients_stay_identical_after_aggregation() {
        let c = toy_collection();
        let us = client_data(&c, &all_train(&c), &["US".into()]).unwrap().remove(0);
        let mut twin = us.clone();
        twin.country = "US2".into();
        twin.supernodes.clear();
        let mut orig = us.clone();
        orig.supernodes.clear();
        let cfg = FederationConfig {
            rounds: 4,
            comm_frequency: 2,
            eval_every: 1,
            ..Default::default()
        };
        let out = run_federation(&[orig, twin], &c.supernodes, &small_spec(), &cfg).unwrap();
        assert_eq!(out.clients["US"], out.clients["US2"]);
        assert_eq!(out.metrics.len(), 4);
        let mut buf = Vec::new();
        write_round_metrics(&mut buf, &out.metrics).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("round,client,loss,auroc,auprc,type1,type2\n"));
    }

    #[test]
    fn rejects_bad_frequency() {
        let cfg = FederationConfig {
            rounds: 2,
            comm_frequency: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(FederationConfig { comm_frequency: 0, ..Default::default() }.validate().is_err());
    }
}
