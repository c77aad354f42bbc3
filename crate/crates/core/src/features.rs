//! Node and edge feature matrices derived from the raw transactions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{fit_specs, normalize, NormStrategy, NormalizationSpec};
use crate::error::Result;
use crate::graph::{GraphCollection, TransactionGraph};
use crate::synth::PAYMENT_TYPES;
use crate::tensor::Tensor;

/// Scaled log-degree in/out, mean scaled amount out/in, cross-border share.
pub const NODE_FEATURE_DIM: usize = 5;
/// Scaled amount, cross-border flag, payment one-hot (7 known + other).
pub const EDGE_FEATURE_DIM: usize = 2 + PAYMENT_TYPES.len() + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub normalization: NormStrategy,
    /// Shared constants for fixed-value normalization; sampled from
    /// `source_country` when absent.
    pub fixed_range: Option<(f64, f64)>,
    pub source_country: Option<String>,
    /// Apply `ln(1 + amount)` before scaling.
    pub log_amounts: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            normalization: NormStrategy::FixedValue,
            fixed_range: None,
            source_country: None,
            log_amounts: false,
        }
    }
}

impl FeatureConfig {
    fn transform(&self, x: f64) -> f64 {
        if self.log_amounts {
            x.ln_1p()
        } else {
            x
        }
    }
}

/// Fits amount scaling per country and writes `node_features`/`edge_features`
/// into every graph. Returns the specs used.
pub fn featurize(collection: &mut GraphCollection, config: &FeatureConfig) -> Result<BTreeMap<String, NormalizationSpec>> {
    let values: BTreeMap<String, Vec<f64>> = collection
        .graphs
        .iter()
        .map(|(c, g)| (c.clone(), g.edge_amounts.iter().map(|&a| config.transform(a)).collect()))
        .collect();
    let fixed = config
        .fixed_range
        .map(|(lo, hi)| (config.transform(lo), config.transform(hi)));
    let specs = fit_specs(&values, config.normalization, fixed, config.source_country.as_deref())?;
    for (c, g) in collection.graphs.iter_mut() {
        let scaled = normalize(&values[c], &specs[c])?;
        apply_features(g, &scaled)?;
    }
    Ok(specs)
}

fn payment_slot(p: &str) -> usize {
    PAYMENT_TYPES
        .iter()
        .position(|t| t.eq_ignore_ascii_case(p))
        .unwrap_or(PAYMENT_TYPES.len())
}

fn apply_features(g: &mut TransactionGraph, scaled_amounts: &[f64]) -> Result<()> {
    let m = g.edge_count();
    let n = g.node_count();
    let mut ef = vec![0.0; m * EDGE_FEATURE_DIM];
    for e in 0..m {
        let row = &mut ef[e * EDGE_FEATURE_DIM..(e + 1) * EDGE_FEATURE_DIM];
        row[0] = scaled_amounts[e];
        row[1] = if g.edge_cross_border[e] { 1.0 } else { 0.0 };
        row[2 + payment_slot(&g.edge_payment_types[e])] = 1.0;
    }
    let mut out_deg = vec![0.0; n];
    let mut in_deg = vec![0.0; n];
    let mut out_amt = vec![0.0; n];
    let mut in_amt = vec![0.0; n];
    let mut cross = vec![0.0; n];
    for (e, &(s, d)) in g.edges.iter().enumerate() {
        out_deg[s] += 1.0;
        in_deg[d] += 1.0;
        out_amt[s] += scaled_amounts[e];
        in_amt[d] += scaled_amounts[e];
        if g.edge_cross_border[e] {
            cross[s] += 1.0;
            cross[d] += 1.0;
        }
    }
    let mut nf = vec![0.0; n * NODE_FEATURE_DIM];
    for v in 0..n {
        let row = &mut nf[v * NODE_FEATURE_DIM..(v + 1) * NODE_FEATURE_DIM];
        row[0] = f64::ln_1p(out_deg[v]) / 4.0;
        row[1] = f64::ln_1p(in_deg[v]) / 4.0;
        row[2] = if out_deg[v] > 0.0 { out_amt[v] / out_deg[v] } else { 0.0 };
        row[3] = if in_deg[v] > 0.0 { in_amt[v] / in_deg[v] } else { 0.0 };
        let incident = out_deg[v] + in_deg[v];
        row[4] = if incident > 0.0 { cross[v] / incident } else { 0.0 };
    }
    g.edge_features = Tensor::matrix(m, EDGE_FEATURE_DIM, ef)?;
    g.node_features = Tensor::matrix(n, NODE_FEATURE_DIM, nf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TransactionRecord;
    use crate::graph::build_collection;

    fn rec(fb: &str, tb: &str, amount: f64, pt: &str) -> TransactionRecord {
        TransactionRecord {
            timestamp: 0,
            from_bank: fb.into(),
            from_account: "a".into(),
            to_bank: tb.into(),
            to_account: "b".into(),
            amount,
            payment_type: pt.into(),
            is_laundering: 0,
        }
    }

    #[test]
    fn shapes_and_one_hot() {
        let mut c = build_collection(&[rec("US", "US", 10.0, "Wire"), rec("US", "DE", 30.0, "Swift")]).unwrap();
        let cfg = FeatureConfig {
            fixed_range: Some((0.0, 100.0)),
            ..Default::default()
        };
        featurize(&mut c, &cfg).unwrap();
        let g = &c.graphs["US"];
        assert_eq!(g.edge_features.get(0, 0), 0.1);
        assert_eq!(g.edge_features.shape(), &[2, EDGE_FEATURE_DIM]);
        assert_eq!(g.node_features.shape(), &[g.node_count(), NODE_FEATURE_DIM]);
        assert_eq!(g.edge_features.get(0, 2 + 6), 1.0);
        assert_eq!(g.edge_features.get(1, EDGE_FEATURE_DIM - 1), 1.0);
        assert_eq!(g.edge_features.get(1, 1), 1.0);
    }

    #[test]
    fn fixed_value_scaling_is_identical_across_countries() {
        let mut c = build_collection(&[rec("US", "US", 50.0, "ACH"), rec("DE", "DE", 50.0, "ACH"), rec("DE", "DE", 5e6, "ACH")]).unwrap();
        let cfg = FeatureConfig {
            fixed_range: Some((0.01, 8_046_315_118.0)),
            ..Default::default()
        };
        featurize(&mut c, &cfg).unwrap();
        assert_eq!(c.graphs["US"].edge_features.get(0, 0), c.graphs["DE"].edge_features.get(0, 0));
    }

    #[test]
    fn country_level_scaling_diverges() {
        let mut c = build_collection(&[
            rec("US", "US", 50.0, "ACH"),
            rec("US", "US", 100.0, "ACH"),
            rec("DE", "DE", 50.0, "ACH"),
            rec("DE", "DE", 5000.0, "ACH"),
        ])
        .unwrap();
        let cfg = FeatureConfig {
            normalization: NormStrategy::CountryLevel,
            ..Default::default()
        };
        featurize(&mut c, &cfg).unwrap();
        assert_eq!(c.graphs["US"].edge_features.get(1, 0), 1.0);
        assert!(c.graphs["DE"].edge_features.get(1, 0) == 1.0 && c.graphs["DE"].edge_features.get(0, 0) == 0.0);
    }
}
