//! Ranking and threshold metrics, per-market evaluation reports, and the
//! scores file shared by detection and propagation.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            left: vec![scores.len()],
            right: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    Ok(())
}

fn is_pos(y: f64) -> bool {
    y >= 0.5
}

/// Mann–Whitney AUROC with ties counted as one half.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check(scores, labels)?;
    let p = labels.iter().filter(|&&y| is_pos(y)).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric("auroc"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank of the tie block
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| is_pos(labels[k])).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// Average precision: Σ (R_k − R_{k−1})·P_k over distinct score thresholds.
pub fn auprc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check(scores, labels)?;
    let total_pos = labels.iter().filter(|&&y| is_pos(y)).count();
    if total_pos == 0 {
        return Err(Error::UndefinedMetric("auprc"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&k| is_pos(labels[k])).count();
        seen += j - i + 1;
        let recall = tp as f64 / total_pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// False-positive and false-negative rates; `None` when the class is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRates {
    pub type1: Option<f64>,
    pub type2: Option<f64>,
}

/// Scores `≥ threshold` are flagged.
pub fn error_rates(scores: &[f64], labels: &[f64], threshold: f64) -> Result<ErrorRates> {
    check(scores, labels)?;
    if threshold.is_nan() {
        return Err(Error::InvalidInput("NaN threshold".into()));
    }
    let (mut fp, mut tn, mut fn_, mut tp) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (is_pos(y), s >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let rate = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    Ok(ErrorRates {
        type1: rate(fp, tn),
        type2: rate(fn_, tp),
    })
}

/// One edge prediction as exchanged between pipeline stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub edge_id: String,
    pub score: f64,
    pub label: u8,
    /// Whether this copy of the edge lives in the sender's market; pooled
    /// metrics count only origin copies.
    pub origin: bool,
}

impl ScoreRow {
    pub fn new(country: &str, local_edge: usize, score: f64, label: u8, origin: bool) -> Self {
        Self {
            edge_id: edge_id(country, local_edge),
            score,
            label,
            origin,
        }
    }

    /// `(market, local edge index)` parsed from the id.
    pub fn location(&self) -> Result<(&str, usize)> {
        let (c, e) = self
            .edge_id
            .rsplit_once('#')
            .ok_or_else(|| Error::InvalidInput(format!("malformed edge id `{}`", self.edge_id)))?;
        let e = e
            .parse()
            .map_err(|_| Error::InvalidInput(format!("malformed edge id `{}`", self.edge_id)))?;
        Ok((c, e))
    }
}

pub fn edge_id(country: &str, local_edge: usize) -> String {
    format!("{country}#{local_edge}")
}

pub fn write_scores<W: Write>(w: W, rows: &[ScoreRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scores<R: Read>(r: R) -> Result<Vec<ScoreRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for (i, rec) in rd.deserialize().enumerate() {
        let row: ScoreRow = rec.map_err(|e| Error::BadRow {
            row: i + 2,
            reason: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&row.score) {
            return Err(Error::BadRow {
                row: i + 2,
                reason: format!("score {} outside [0, 1]", row.score),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Predictions grouped by market.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MarketScores {
    pub market: String,
    pub scores: Vec<f64>,
    pub labels: Vec<f64>,
    pub origin: Vec<bool>,
}

/// Splits score rows by the market prefix of their ids, preserving order.
pub fn group_by_market(rows: &[ScoreRow]) -> Result<Vec<MarketScores>> {
    let mut out: Vec<MarketScores> = Vec::new();
    for r in rows {
        let (c, _) = r.location()?;
        let slot = match out.iter().position(|m| m.market == c) {
            Some(i) => i,
            None => {
                out.push(MarketScores {
                    market: c.to_string(),
                    ..Default::default()
                });
                out.len() - 1
            }
        };
        let m = &mut out[slot];
        m.scores.push(r.score);
        m.labels.push(r.label as f64);
        m.origin.push(r.origin);
    }
    out.sort_by(|a, b| a.market.cmp(&b.market));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Overall {
    /// Metrics on the pooled origin-copy predictions.
    #[default]
    Pooled,
    /// Unweighted mean of the per-market rows.
    Macro,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub market: String,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub type1: Option<f64>,
    pub type2: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

impl ReportRow {
    fn compute(market: &str, scores: &[f64], labels: &[f64], threshold: f64) -> Result<Self> {
        let rates = error_rates(scores, labels, threshold)?;
        let positives = labels.iter().filter(|&&y| is_pos(y)).count();
        Ok(Self {
            market: market.to_string(),
            auroc: auroc(scores, labels).ok(),
            auprc: auprc(scores, labels).ok(),
            type1: rates.type1,
            type2: rates.type2,
            positives,
            negatives: labels.len() - positives,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub overall: ReportRow,
}

fn mean_of(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn evaluate(markets: &[MarketScores], threshold: f64, overall: Overall) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(markets.len());
    for m in markets {
        rows.push(ReportRow::compute(&m.market, &m.scores, &m.labels, threshold)?);
    }
    let overall = match overall {
        Overall::Pooled => {
            let (mut s, mut y) = (Vec::new(), Vec::new());
            for m in markets {
                for i in (0..m.scores.len()).filter(|&i| m.origin[i]) {
                    s.push(m.scores[i]);
                    y.push(m.labels[i]);
                }
            }
            ReportRow::compute("Overall", &s, &y, threshold)?
        }
        Overall::Macro => ReportRow {
            market: "Overall".into(),
            auroc: mean_of(rows.iter().map(|r| r.auroc)),
            auprc: mean_of(rows.iter().map(|r| r.auprc)),
            type1: mean_of(rows.iter().map(|r| r.type1)),
            type2: mean_of(rows.iter().map(|r| r.type2)),
            positives: rows.iter().map(|r| r.positives).sum(),
            negatives: rows.iter().map(|r| r.negatives).sum(),
        },
    };
    Ok(EvalReport { rows, overall })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn all_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().chain(std::iter::once(&self.overall))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["market", "auroc", "auprc", "type1", "type2", "positives", "negatives"])?;
        for r in self.all_rows() {
            out.write_record([
                r.market.clone(),
                cell(r.auroc),
                cell(r.auprc),
                cell(r.type1),
                cell(r.type2),
                r.positives.to_string(),
                r.negatives.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn pretty(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>8} {:>8} {:>7} {:>8}", "Market", "AUROC", "AUPRC", "Type I", "Type II", "pos", "neg");
        for r in self.all_rows() {
            let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>8} {:>8} {:>8} {:>7} {:>8}",
                r.market,
                f(r.auroc),
                f(r.auprc),
                f(r.type1),
                f(r.type2),
                r.positives,
                r.negatives
            );
        }
        s
    }
}
