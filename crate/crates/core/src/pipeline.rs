//! Run configuration and the stage functions behind the command line: each
//! stage reads the previous stage's artifacts and writes its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ingest_csv, split_records, write_csv, SplitConfig, TransactionRecord};
use crate::error::{Error, Result};
use crate::features::{featurize, FeatureConfig};
use crate::federated::{client_data, run_federation, write_round_metrics, ClientData, FederationConfig, FederationOutcome, TrainSpec};
use crate::graph::{build_collection, GraphCollection};
use crate::labelprop::{refine_collection, PropagationConfig};
use crate::metrics::{evaluate, group_by_market, read_scores, write_scores, EvalReport, MarketScores, Overall, ScoreRow};
use crate::model::{predict_edges, EncoderConfig, LossConfig};
use crate::params::ModelParams;
use crate::policy::{decide, economic_eval, train_policy, write_decisions, write_economic, Decision, EconomicReport, Episode, Observation, PolicyConfig, RewardConfig};
use crate::ppr::{cluster_collection, ClusterSet, PprConfig, PprMode};
use crate::synth::{generate_dataset, pattern_records, sbm_generate, Dataset, DatasetSpec, PatternKind, SbmSample, SbmSpec, SyntheticPatternSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub features: FeatureConfig,
    pub split: SplitConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub federation: FederationConfig,
    pub ppr: PprConfig,
    pub ppr_mode: PprMode,
    pub propagation: PropagationConfig,
    pub reward: RewardConfig,
    pub policy: PolicyConfig,
    pub overall: Overall,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        self.federation.validate()?;
        self.ppr.validate()?;
        self.propagation.validate()?;
        self.reward.validate()?;
        self.policy.validate()
    }

    /// Replaces every module seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.federation.seed = seed;
        self.policy.seed = seed;
        if let SplitConfig::Random { seed: s, .. } = &mut self.split {
            *s = seed;
        }
        self
    }

    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec {
            encoder: self.encoder.clone(),
            loss: self.loss.clone(),
            optimizer: self.federation.optimizer,
        }
    }
}

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn transactions(&self) -> PathBuf {
        self.dir.join("transactions.csv")
    }
    pub fn groups(&self) -> PathBuf {
        self.dir.join("groups.csv")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }
    pub fn checkpoint(&self, market: &str) -> PathBuf {
        self.checkpoints().join(format!("{market}.ckpt"))
    }
    pub fn train_metrics(&self) -> PathBuf {
        self.dir.join("train_metrics.csv")
    }
    pub fn scores(&self) -> PathBuf {
        self.dir.join("scores.csv")
    }
    pub fn clusters(&self) -> PathBuf {
        self.dir.join("clusters.csv")
    }
    pub fn refined_scores(&self) -> PathBuf {
        self.dir.join("scores_refined.csv")
    }
    pub fn decisions(&self) -> PathBuf {
        self.dir.join("decisions.csv")
    }
    pub fn economic(&self) -> PathBuf {
        self.dir.join("economic.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.csv")
    }
    pub fn report_text(&self) -> PathBuf {
        self.dir.join("report.txt")
    }
}

/// Fails with the expected path when an upstream artifact is missing.
pub fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::InvalidInput(format!("missing upstream artifact {}", path.display())))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Featurized graphs plus the record-level training mask.
pub struct Prepared {
    pub collection: GraphCollection,
    pub train_mask: Vec<bool>,
}

pub fn prepare(records: &[TransactionRecord], config: &RunConfig) -> Result<Prepared> {
    let mut collection = build_collection(records)?;
    featurize(&mut collection, &config.features)?;
    let train_mask = split_records(&collection, config.split)?;
    Ok(Prepared { collection, train_mask })
}

pub fn load_records(art: &Artifacts) -> Result<Vec<TransactionRecord>> {
    ingest_csv(require(&art.transactions())?)
}

pub fn clients(prepared: &Prepared, config: &RunConfig) -> Result<Vec<ClientData>> {
    client_data(&prepared.collection, &prepared.train_mask, &config.federation.clients)
}

pub fn train_stage(art: &Artifacts, config: &RunConfig) -> Result<FederationOutcome> {
    let prepared = prepare(&load_records(art)?, config)?;
    let data = clients(&prepared, config)?;
    let outcome = run_federation(&data, &prepared.collection.supernodes, &config.train_spec(), &config.federation)?;
    for (market, params) in &outcome.clients {
        params.write_checkpoint(create(&art.checkpoint(market))?)?;
    }
    write_round_metrics(create(&art.train_metrics())?, &outcome.metrics)?;
    Ok(outcome)
}

/// Scores every edge of every market with that market's checkpoint.
pub fn score_markets(data: &[ClientData], params: &BTreeMap<String, ModelParams>, encoder: &EncoderConfig) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::new();
    for d in data {
        let p = params
            .get(&d.country)
            .ok_or_else(|| Error::InvalidInput(format!("no checkpoint for market {}", d.country)))?;
        for (e, s) in predict_edges(&d.input, p, encoder)?.into_iter().enumerate() {
            rows.push(ScoreRow::new(&d.country, e, s, d.input.labels[e] as u8, d.origin[e]));
        }
    }
    Ok(rows)
}

pub fn detect_stage(art: &Artifacts, config: &RunConfig) -> Result<Vec<ScoreRow>> {
    let prepared = prepare(&load_records(art)?, config)?;
    let data = clients(&prepared, config)?;
    let mut params = BTreeMap::new();
    for d in &data {
        let path = art.checkpoint(&d.country);
        params.insert(d.country.clone(), ModelParams::read_checkpoint(BufReader::new(File::open(require(&path)?)?))?);
    }
    let rows = score_markets(&data, &params, &config.encoder)?;
    write_scores(create(&art.scores())?, &rows)?;
    Ok(rows)
}

/// Score vectors per market, in local edge order.
pub fn scores_by_market(rows: &[ScoreRow], collection: &GraphCollection) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out: BTreeMap<String, Vec<Option<f64>>> = collection
        .graphs
        .iter()
        .map(|(c, g)| (c.clone(), vec![None; g.edge_count()]))
        .collect();
    for r in rows {
        let (market, idx) = r.location()?;
        let slot = out
            .get_mut(market)
            .and_then(|v| v.get_mut(idx))
            .ok_or_else(|| Error::InvalidInput(format!("score for unknown edge {}", r.edge_id)))?;
        *slot = Some(r.score);
    }
    out.into_iter()
        .filter(|(_, v)| v.iter().any(Option::is_some))
        .map(|(c, v)| {
            let full: Option<Vec<f64>> = v.into_iter().collect();
            full.map(|f| (c.clone(), f))
                .ok_or_else(|| Error::InvalidInput(format!("scores for market {c} are incomplete")))
        })
        .collect()
}

fn read_score_file(path: &Path) -> Result<Vec<ScoreRow>> {
    read_scores(BufReader::new(File::open(require(path)?)?))
}

/// Restricts a collection to the markets present in `scores`.
fn scored_collection(collection: &GraphCollection, scores: &BTreeMap<String, Vec<f64>>) -> GraphCollection {
    let mut c = collection.clone();
    c.graphs.retain(|m, _| scores.contains_key(m));
    c
}

pub fn ppr_stage(art: &Artifacts, config: &RunConfig) -> Result<ClusterSet> {
    let prepared = prepare(&load_records(art)?, config)?;
    let scores = scores_by_market(&read_score_file(&art.scores())?, &prepared.collection)?;
    let set = cluster_collection(&scored_collection(&prepared.collection, &scores), &scores, &config.ppr, config.ppr_mode)?;
    set.write(create(&art.clusters())?)?;
    Ok(set)
}

pub fn propagate_stage(art: &Artifacts, config: &RunConfig) -> Result<Vec<ScoreRow>> {
    let prepared = prepare(&load_records(art)?, config)?;
    let base = read_score_file(&art.scores())?;
    let scores = scores_by_market(&base, &prepared.collection)?;
    let clusters = ClusterSet::read(BufReader::new(File::open(require(&art.clusters())?)?))?;
    let refined = refine_collection(&scored_collection(&prepared.collection, &scores), &scores, &clusters, &config.propagation)?;
    let rows = replace_scores(&base, &refined)?;
    write_scores(create(&art.refined_scores())?, &rows)?;
    Ok(rows)
}

/// Copies `rows` with scores taken from per-market vectors.
pub fn replace_scores(rows: &[ScoreRow], scores: &BTreeMap<String, Vec<f64>>) -> Result<Vec<ScoreRow>> {
    rows.iter()
        .map(|r| {
            let (m, i) = r.location()?;
            let s = scores
                .get(m)
                .and_then(|v| v.get(i))
                .ok_or_else(|| Error::InvalidInput(format!("no refined score for {}", r.edge_id)))?;
            Ok(ScoreRow { score: s.clamp(0.0, 1.0), ..r.clone() })
        })
        .collect()
}

/// One episode per market per day of activity.
pub fn market_episodes(rows: &[ScoreRow], collection: &GraphCollection) -> Result<BTreeMap<String, Vec<Episode>>> {
    let mut by_day: BTreeMap<String, BTreeMap<i64, Episode>> = BTreeMap::new();
    for r in rows {
        let (m, i) = r.location()?;
        let g = collection
            .graph(m)
            .ok_or_else(|| Error::InvalidInput(format!("unknown market {m}")))?;
        let day = g.edge_timestamps[i].div_euclid(86_400);
        by_day.entry(m.to_string()).or_default().entry(day).or_default().push(Observation {
            score: r.score,
            label: r.label,
            amount: g.edge_amounts[i],
        });
    }
    Ok(by_day.into_iter().map(|(m, d)| (m, d.into_values().collect())).collect())
}

pub struct DecisionOutcome {
    pub thresholds: BTreeMap<String, f64>,
    pub decisions: Vec<Decision>,
    pub economic: Vec<EconomicReport>,
}

/// Learns per-market thresholds (or applies `fixed` uniformly), then decides
/// every edge and evaluates the economics per market and pooled.
pub fn decide_rows(rows: &[ScoreRow], collection: &GraphCollection, reward: &RewardConfig, policy: &PolicyConfig, fixed: Option<f64>) -> Result<DecisionOutcome> {
    let episodes = market_episodes(rows, collection)?;
    let thresholds: BTreeMap<String, f64> = match fixed {
        Some(t) => {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig(format!("fixed threshold {t} outside [0, 1]")));
            }
            episodes.keys().map(|m| (m.clone(), t)).collect()
        }
        None => {
            let learned = train_policy(&episodes, reward, policy)?;
            learned.institutions.into_iter().map(|(m, p)| (m, p.tau)).collect()
        }
    };
    let mut decisions = Vec::with_capacity(rows.len());
    let mut per_market: BTreeMap<&str, (Vec<_>, Vec<u8>, Vec<f64>)> = BTreeMap::new();
    let mut pooled = (Vec::new(), Vec::new(), Vec::new());
    for r in rows {
        let (m, i) = r.location()?;
        let amount = collection.graph(m).map(|g| g.edge_amounts[i]).unwrap_or(0.0);
        let action = decide(r.score, thresholds[m], policy.monitor_band);
        let e = per_market.entry(m).or_default();
        e.0.push(action);
        e.1.push(r.label);
        e.2.push(amount);
        if r.origin {
            pooled.0.push(action);
            pooled.1.push(r.label);
            pooled.2.push(amount);
        }
        decisions.push(Decision {
            edge_id: r.edge_id.clone(),
            score: r.score,
            action,
            amount,
            label: r.label,
        });
    }
    let mut economic: Vec<EconomicReport> = per_market
        .iter()
        .map(|(m, (a, y, c))| economic_eval(m, Some(thresholds[*m]), a, y, c))
        .collect::<Result<_>>()?;
    economic.push(economic_eval("overall", fixed, &pooled.0, &pooled.1, &pooled.2)?);
    Ok(DecisionOutcome {
        thresholds,
        decisions,
        economic,
    })
}

pub fn decide_stage(art: &Artifacts, config: &RunConfig, fixed: Option<f64>) -> Result<DecisionOutcome> {
    let prepared = prepare(&load_records(art)?, config)?;
    let path = if art.refined_scores().exists() { art.refined_scores() } else { art.scores() };
    let rows = read_score_file(&path)?;
    let out = decide_rows(&rows, &prepared.collection, &config.reward, &config.policy, fixed)?;
    write_decisions(create(&art.decisions())?, &out.decisions)?;
    write_economic(create(&art.economic())?, &out.economic)?;
    Ok(out)
}

pub fn evaluate_rows(rows: &[ScoreRow], threshold: f64, overall: Overall) -> Result<EvalReport> {
    let markets: Vec<MarketScores> = group_by_market(rows)?;
    evaluate(&markets, threshold, overall)
}

/// Merges detection metrics (base and, when present, refined) and the
/// economic report into `report.csv` / `report.txt`.
pub fn report_stage(art: &Artifacts, config: &RunConfig) -> Result<String> {
    let threshold = config.federation.threshold;
    let collection = build_collection(&load_records(art)?)?;
    let train_mask = split_records(&collection, config.split)?;
    let mut stages = vec![("detect", read_score_file(&art.scores())?)];
    if art.refined_scores().exists() {
        stages.push(("propagate", read_score_file(&art.refined_scores())?));
    }
    let mut reports = Vec::new();
    for (stage, rows) in &stages {
        let held_out = held_out_rows(rows, &collection, &train_mask)?;
        if !held_out.is_empty() {
            reports.push((*stage, "held-out", evaluate_rows(&held_out, threshold, config.overall)?));
        }
        reports.push((*stage, "all", evaluate_rows(rows, threshold, config.overall)?));
    }
    let mut out = csv::Writer::from_writer(create(&art.report())?);
    out.write_record(["stage", "edges", "market", "auroc", "auprc", "type1", "type2", "positives", "negatives"])?;
    let f = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
    for (stage, edges, rep) in &reports {
        for r in rep.all_rows() {
            out.write_record([
                stage.to_string(),
                edges.to_string(),
                r.market.clone(),
                f(r.auroc),
                f(r.auprc),
                f(r.type1),
                f(r.type2),
                r.positives.to_string(),
                r.negatives.to_string(),
            ])?;
        }
    }
    out.flush()?;
    let mut text = String::new();
    for (stage, edges, rep) in &reports {
        let title = if *stage == "detect" { "detection" } else { "after label propagation" };
        let _ = writeln!(text, "{title} ({edges} edges)\n{}", rep.pretty());
    }
    if art.economic().exists() {
        let _ = writeln!(text, "economics\n{}", fs::read_to_string(art.economic())?);
    }
    fs::write(art.report_text(), &text)?;
    Ok(text)
}

/// Rows whose transaction was not a training record under `train_mask`.
fn held_out_rows(rows: &[ScoreRow], collection: &GraphCollection, train_mask: &[bool]) -> Result<Vec<ScoreRow>> {
    let mut out = Vec::new();
    for r in rows {
        let (market, e) = r.location()?;
        let g = collection
            .graphs
            .get(market)
            .ok_or_else(|| Error::InvalidInput(format!("scores for unknown market {market}")))?;
        let rec = *g
            .edge_records
            .get(e)
            .ok_or_else(|| Error::InvalidInput(format!("edge {} outside market {market}", r.edge_id)))?;
        if !train_mask[rec] {
            out.push(r.clone());
        }
    }
    Ok(out)
}

/// Pooled held-out metrics for scores restricted to each client's evaluation edges.
pub fn holdout_rows(data: &[ClientData], scores: &BTreeMap<String, Vec<f64>>) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::new();
    for d in data {
        let s = scores
            .get(&d.country)
            .ok_or_else(|| Error::InvalidInput(format!("no scores for market {}", d.country)))?;
        for &e in &d.eval_edges {
            rows.push(ScoreRow::new(&d.country, e, s[e], d.input.labels[e] as u8, d.origin[e]));
        }
    }
    Ok(rows)
}

fn write_groups(path: &Path, groups: &[Vec<crate::graph::AccountKey>], patterns: &[PatternKind]) -> Result<()> {
    let mut out = csv::Writer::from_writer(create(path)?);
    out.write_record(["group", "pattern", "account"])?;
    for (g, (accounts, p)) in groups.iter().zip(patterns).enumerate() {
        let p = pattern_name(p);
        for a in accounts {
            out.write_record([g.to_string(), p.clone(), a.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

fn pattern_name(p: &PatternKind) -> String {
    match p {
        PatternKind::FanOut => "fan-out",
        PatternKind::Loop => "loop",
        PatternKind::GatherScatter => "gather-scatter",
        PatternKind::Hybrid => "hybrid",
    }
    .to_string()
}

/// Synthetic multi-market dataset plus its ground-truth groups.
pub fn generate_stage(art: &Artifacts, config: &RunConfig) -> Result<Dataset> {
    let ds = generate_dataset(&config.dataset)?;
    write_csv(create(&art.transactions())?, &ds.records)?;
    write_groups(&art.groups(), &ds.groups, &ds.patterns)?;
    Ok(ds)
}

/// A single laundering pattern of `size` accounts in `countries`.
pub fn pattern_stage(art: &Artifacts, pattern: PatternKind, size: usize, countries: Vec<String>, seed: u64) -> Result<Vec<TransactionRecord>> {
    let spec = SyntheticPatternSpec {
        pattern,
        group_size: size,
        countries,
        amount_range: (100.0, 1000.0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (records, group) = pattern_records(&spec, &mut rng, "p", 0, &[])?;
    write_csv(create(&art.transactions())?, &records)?;
    write_groups(&art.groups(), &[group], &[pattern])?;
    Ok(records)
}

pub fn sbm_stage(art: &Artifacts, spec: &SbmSpec) -> Result<SbmSample> {
    let sample = sbm_generate(spec)?;
    sample.write_edges(create(&art.dir.join("sbm_edges.csv"))?)?;
    let planted: Vec<String> = sample.planted.iter().map(|v| v.to_string()).collect();
    fs::write(art.dir.join("sbm_planted.txt"), planted.join("\n") + "\n")?;
    Ok(sample)
}
