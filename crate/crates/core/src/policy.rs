//! Threshold policies per institution: reward model, bandit training over a
//! threshold grid, soft coordination, and economic evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Freeze,
    Monitor,
    NoIntervention,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Freeze => "freeze",
            Action::Monitor => "monitor",
            Action::NoIntervention => "none",
        })
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "freeze" => Ok(Action::Freeze),
            "monitor" => Ok(Action::Monitor),
            "none" | "no_intervention" | "nointervention" => Ok(Action::NoIntervention),
            _ => Err(Error::InvalidInput(format!("unknown action `{s}`"))),
        }
    }
}

/// Reward weights. Illicit outcomes scale with `ln(1 + amount)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Illicit edge frozen.
    pub a1: f64,
    /// Illicit edge monitored.
    pub a2: f64,
    /// Illicit edge missed (penalty).
    pub a3: f64,
    /// Legitimate edge frozen (penalty).
    pub a4: f64,
    /// Legitimate edge monitored (penalty).
    pub a5: f64,
    /// Legitimate edge left alone.
    pub a6: f64,
    /// Discount; inert because episodes are single-shot.
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            a1: 1.0,
            a2: 0.6,
            a3: 0.3,
            a4: 0.5,
            a5: 0.1,
            a6: 0.2,
            gamma: 0.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.a1, self.a2, self.a3, self.a4, self.a5, self.a6];
        if all.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidConfig("reward weights must be positive".into()));
        }
        if !(self.a1 > self.a2 && self.a2 > self.a3) {
            return Err(Error::InvalidConfig("reward weights need a1 > a2 > a3".into()));
        }
        if !(self.a4 >= self.a6 && self.a6 > self.a5) {
            return Err(Error::InvalidConfig("reward weights need a4 >= a6 > a5".into()));
        }
        Ok(())
    }
}

pub fn reward(label: u8, action: Action, amount: f64, config: &RewardConfig) -> f64 {
    let c = amount.max(0.0).ln_1p();
    match (label != 0, action) {
        (true, Action::Freeze) => config.a1 * c,
        (true, Action::Monitor) => config.a2 * c,
        (true, Action::NoIntervention) => -config.a3 * c,
        (false, Action::Freeze) => -config.a4,
        (false, Action::Monitor) => -config.a5,
        (false, Action::NoIntervention) => config.a6,
    }
}

/// Freeze at or above `tau`, monitor within `band` below it.
pub fn decide(score: f64, tau: f64, band: f64) -> Action {
    if score >= tau {
        Action::Freeze
    } else if score >= tau - band && band > 0.0 {
        Action::Monitor
    } else {
        Action::NoIntervention
    }
}

/// `n` points evenly spaced in logit between `lo` and `hi` (inclusive).
pub fn logit_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let (a, b) = (logit(lo), logit(hi));
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| {
            let z = a + (b - a) * i as f64 / (n - 1) as f64;
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub score: f64,
    pub label: u8,
    pub amount: f64,
}

pub type Episode = Vec<Observation>;

pub fn episode_reward(episode: &[Observation], tau: f64, band: f64, config: &RewardConfig) -> f64 {
    episode
        .iter()
        .map(|o| reward(o.label, decide(o.score, tau, band), o.amount, config))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoordinatorConfig {
    pub eta_g: f64,
    pub xi: f64,
    /// Weight of the coupling penalty in threshold selection; 0 disables it.
    pub lambda_c: f64,
    /// Institution weights; volume-proportional when absent.
    pub weights: Option<BTreeMap<String, f64>>,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            eta_g: 0.5,
            xi: 0.1,
            lambda_c: 0.0,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub grid_size: usize,
    pub grid_min: f64,
    pub grid_max: f64,
    pub epsilon: f64,
    pub monitor_band: f64,
    pub seed: u64,
    /// Passes over each institution's episode list.
    pub passes: usize,
    /// Soft coordination between rounds; independent institutions when absent.
    pub coordination: Option<CoordinatorConfig>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            grid_size: 25,
            grid_min: 0.05,
            grid_max: 0.95,
            epsilon: 0.1,
            monitor_band: 0.1,
            seed: 0,
            passes: 1,
            coordination: None,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || !(0.0 < self.grid_min && self.grid_min <= self.grid_max && self.grid_max < 1.0) {
            return Err(Error::InvalidConfig("threshold grid must lie in (0, 1) with at least one point".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) || !(self.monitor_band >= 0.0) || self.passes == 0 {
            return Err(Error::InvalidConfig("epsilon in [0, 1], monitor_band >= 0, passes >= 1".into()));
        }
        if let Some(c) = &self.coordination {
            if !(0.0..=1.0).contains(&c.eta_g) || c.xi < 0.0 || c.lambda_c < 0.0 {
                return Err(Error::InvalidConfig("eta_g in [0, 1], xi and lambda_c non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        logit_grid(self.grid_size, self.grid_min, self.grid_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstitutionPolicy {
    /// Running mean episode reward for every grid point.
    pub values: Vec<f64>,
    pub episodes: usize,
    pub tau: f64,
    /// Reward collected by the thresholds actually played.
    pub acted_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub grid: Vec<f64>,
    pub monitor_band: f64,
    pub institutions: BTreeMap<String, InstitutionPolicy>,
    pub weights: BTreeMap<String, f64>,
    /// Coupling diagnostic after the last coordination round.
    pub coupling_penalty: Option<f64>,
}

impl ThresholdPolicy {
    pub fn tau(&self, institution: &str) -> Option<f64> {
        self.institutions.get(institution).map(|p| p.tau)
    }
}

/// Index of the largest value; ties go to the lowest index (lowest threshold).
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn snap(grid: &[f64], x: f64) -> f64 {
    *grid
        .iter()
        .min_by(|a, b| (*a - x).abs().total_cmp(&(*b - x).abs()))
        .expect("grid non-empty")
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `Σ_b (τ_b − τ̄)² + ξ Σ_b KL(softmax(V_b) ‖ softmax(mean V))`.
pub fn coupling_penalty(policy: &ThresholdPolicy, xi: f64) -> f64 {
    let tau_bar: f64 = policy.institutions.iter().map(|(b, p)| policy.weights[b] * p.tau).sum();
    let k = policy.grid.len();
    let nb = policy.institutions.len() as f64;
    let mut mean = vec![0.0; k];
    for p in policy.institutions.values() {
        for (m, v) in mean.iter_mut().zip(&p.values) {
            *m += v / nb;
        }
    }
    let q = softmax(&mean);
    policy
        .institutions
        .values()
        .map(|p| {
            let pb = softmax(&p.values);
            let kl: f64 = pb.iter().zip(&q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum();
            (p.tau - tau_bar).powi(2) + xi * kl
        })
        .sum()
}

/// `τ_b ← τ_b + η_g(τ̄ − τ_b)`, snapped to the grid.
pub fn coordinate(policy: &mut ThresholdPolicy, eta_g: f64) -> Result<()> {
    let total: f64 = policy.weights.values().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("institution weights sum to {total}, expected 1")));
    }
    if !(0.0..=1.0).contains(&eta_g) {
        return Err(Error::InvalidConfig(format!("eta_g {eta_g} outside [0, 1]")));
    }
    let tau_bar: f64 = policy.institutions.iter().map(|(b, p)| policy.weights[b] * p.tau).sum();
    for p in policy.institutions.values_mut() {
        p.tau = snap(&policy.grid, coordinated(p.tau, tau_bar, eta_g));
    }
    Ok(())
}

/// The unsnapped coordination step.
pub fn coordinated(tau: f64, tau_bar: f64, eta_g: f64) -> f64 {
    tau + eta_g * (tau_bar - tau)
}

/// Full-information ε-greedy bandit per institution: after each episode every
/// grid point's running mean is updated (rewards are computable for all
/// thresholds once labels arrive), the played threshold is ε-greedy, and the
/// final threshold is the greedy argmax.
pub fn train_policy(episodes: &BTreeMap<String, Vec<Episode>>, reward_cfg: &RewardConfig, config: &PolicyConfig) -> Result<ThresholdPolicy> {
    reward_cfg.validate()?;
    config.validate()?;
    if episodes.is_empty() {
        return Err(Error::InvalidInput("no institutions to train".into()));
    }
    let grid = config.grid();
    let k = grid.len();
    let volume: BTreeMap<&String, f64> = episodes
        .iter()
        .map(|(b, e)| (b, e.iter().map(Vec::len).sum::<usize>() as f64))
        .collect();
    let weights: BTreeMap<String, f64> = match config.coordination.as_ref().and_then(|c| c.weights.clone()) {
        Some(w) => {
            if episodes.keys().any(|b| !w.contains_key(b)) {
                return Err(Error::InvalidConfig("coordinator weights missing an institution".into()));
            }
            w.into_iter().filter(|(b, _)| episodes.contains_key(b)).collect()
        }
        None => {
            let total: f64 = volume.values().sum();
            volume
                .iter()
                .map(|(b, v)| ((*b).clone(), if total > 0.0 { v / total } else { 1.0 / volume.len() as f64 }))
                .collect()
        }
    };
    let mut policy = ThresholdPolicy {
        grid: grid.clone(),
        monitor_band: config.monitor_band,
        institutions: episodes
            .keys()
            .map(|b| {
                (
                    b.clone(),
                    InstitutionPolicy {
                        values: vec![0.0; k],
                        episodes: 0,
                        tau: grid[k - 1],
                        acted_reward: 0.0,
                    },
                )
            })
            .collect(),
        weights,
        coupling_penalty: None,
    };
    let mut rngs: BTreeMap<&String, ChaCha8Rng> = episodes
        .keys()
        .enumerate()
        .map(|(i, b)| (b, ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(i as u64))))
        .collect();
    let rounds = episodes.values().map(Vec::len).max().unwrap_or(0) * config.passes;
    for round in 0..rounds {
        for (b, list) in episodes {
            if round >= list.len() * config.passes {
                continue;
            }
            let ep = &list[round % list.len()];
            if ep.is_empty() {
                log::warn!("skipping empty episode for {b}");
                continue;
            }
            let p = policy.institutions.get_mut(b).expect("institution present");
            let rng = rngs.get_mut(b).expect("rng present");
            let played = if rng.gen::<f64>() < config.epsilon {
                rng.gen_range(0..k)
            } else {
                argmax(&p.values)
            };
            let rewards: Vec<f64> = grid.iter().map(|&t| episode_reward(ep, t, config.monitor_band, reward_cfg)).collect();
            p.episodes += 1;
            let n = p.episodes as f64;
            for (v, r) in p.values.iter_mut().zip(&rewards) {
                *v += (r - *v) / n;
            }
            p.acted_reward += rewards[played];
        }
        if let Some(c) = &config.coordination {
            select_thresholds(&mut policy, c.lambda_c);
            coordinate(&mut policy, c.eta_g)?;
            policy.coupling_penalty = Some(coupling_penalty(&policy, c.xi));
        }
    }
    if config.coordination.is_none() {
        select_thresholds(&mut policy, 0.0);
    }
    Ok(policy)
}

/// Greedy threshold per institution, optionally penalized toward the current mean.
fn select_thresholds(policy: &mut ThresholdPolicy, lambda_c: f64) {
    let tau_bar: f64 = policy.institutions.iter().map(|(b, p)| policy.weights[b] * p.tau).sum();
    for p in policy.institutions.values_mut() {
        if p.episodes == 0 {
            continue;
        }
        let scored: Vec<f64> = policy
            .grid
            .iter()
            .zip(&p.values)
            .map(|(&t, &v)| v - lambda_c * (t - tau_bar).powi(2))
            .collect();
        p.tau = policy.grid[argmax(&scored)];
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub edge_id: String,
    pub score: f64,
    pub action: Action,
    pub amount: f64,
    pub label: u8,
}

pub fn write_decisions<W: Write>(w: W, decisions: &[Decision]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["edge_id", "score", "action", "amount", "label"])?;
    for d in decisions {
        out.write_record([d.edge_id.clone(), d.score.to_string(), d.action.to_string(), d.amount.to_string(), d.label.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_decisions<R: Read>(r: R) -> Result<Vec<Decision>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = |reason: &str| Error::BadRow {
            row: i + 2,
            reason: reason.to_string(),
        };
        if rec.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        out.push(Decision {
            edge_id: rec[0].to_string(),
            score: rec[1].parse().map_err(|_| bad("bad score"))?,
            action: rec[2].parse()?,
            amount: rec[3].parse().map_err(|_| bad("bad amount"))?,
            label: rec[4].parse().map_err(|_| bad("bad label"))?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconomicReport {
    pub market: String,
    pub threshold: Option<f64>,
    pub total_loss: f64,
    pub prevented_loss: f64,
    /// Prevented over total; 0 when there is no illicit volume.
    pub ratio: f64,
    /// Legitimate edges frozen.
    pub type1: f64,
    /// Illicit edges left without intervention.
    pub type2: f64,
    /// Legitimate edges monitored.
    pub monitored: f64,
}

pub fn economic_eval(market: &str, threshold: Option<f64>, actions: &[Action], labels: &[u8], amounts: &[f64]) -> Result<EconomicReport> {
    if actions.len() != labels.len() || labels.len() != amounts.len() {
        return Err(Error::InvalidInput("actions, labels, and amounts must align".into()));
    }
    let (mut total, mut prevented) = (0.0, 0.0);
    let (mut pos, mut neg, mut missed, mut frozen_legit, mut monitored_legit) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for ((&a, &y), &c) in actions.iter().zip(labels).zip(amounts) {
        if y != 0 {
            pos += 1;
            total += c;
            match a {
                Action::Freeze => prevented += c,
                Action::NoIntervention => missed += 1,
                Action::Monitor => {}
            }
        } else {
            neg += 1;
            match a {
                Action::Freeze => frozen_legit += 1,
                Action::Monitor => monitored_legit += 1,
                Action::NoIntervention => {}
            }
        }
    }
    let frac = |k: usize, n: usize| if n > 0 { k as f64 / n as f64 } else { 0.0 };
    Ok(EconomicReport {
        market: market.to_string(),
        threshold,
        total_loss: total,
        prevented_loss: prevented,
        ratio: if total > 0.0 { prevented / total } else { 0.0 },
        type1: frac(frozen_legit, neg),
        type2: frac(missed, pos),
        monitored: frac(monitored_legit, neg),
    })
}

pub fn write_economic<W: Write>(w: W, rows: &[EconomicReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Indices of the `⌊fraction·N⌋` edges to freeze: highest score first, then
/// larger amount, then lower index.
pub fn budget_select(scores: &[f64], amounts: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("budget fraction {fraction} outside (0, 1]")));
    }
    if scores.len() != amounts.len() {
        return Err(Error::InvalidInput("scores and amounts must align".into()));
    }
    let cap = (fraction * scores.len() as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(amounts[b].total_cmp(&amounts[a])).then(a.cmp(&b)));
    idx.truncate(cap);
    Ok(idx)
}
