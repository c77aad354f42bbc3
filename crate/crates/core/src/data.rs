//! Transaction records, CSV ingestion, amount normalization and train/test splits.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AccountKey, GraphCollection};

pub const CSV_COLUMNS: [&str; 8] = [
    "timestamp",
    "from_bank",
    "from_account",
    "to_bank",
    "to_account",
    "amount",
    "payment_type",
    "is_laundering",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub timestamp: i64,
    pub from_bank: String,
    pub from_account: String,
    pub to_bank: String,
    pub to_account: String,
    pub amount: f64,
    pub payment_type: String,
    pub is_laundering: u8,
}

impl TransactionRecord {
    pub fn from_key(&self) -> AccountKey {
        AccountKey::new(&self.from_bank, &self.from_account)
    }

    pub fn to_key(&self) -> AccountKey {
        AccountKey::new(&self.to_bank, &self.to_account)
    }

    pub fn is_cross_border(&self) -> bool {
        self.from_bank != self.to_bank
    }

    pub(crate) fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("from_bank", &self.from_bank),
            ("from_account", &self.from_account),
            ("to_bank", &self.to_bank),
            ("to_account", &self.to_account),
        ] {
            if v.trim().is_empty() {
                return Err(format!("missing field `{name}`"));
            }
        }
        if !self.amount.is_finite() || self.amount < 0.0 {
            return Err(format!("amount must be finite and >= 0, got {}", self.amount));
        }
        if self.is_laundering > 1 {
            return Err(format!("is_laundering must be 0 or 1, got {}", self.is_laundering));
        }
        Ok(())
    }
}

/// Reads a transaction CSV. Columns are matched by header name; extra columns are ignored.
pub fn ingest_csv(path: impl AsRef<Path>) -> Result<Vec<TransactionRecord>> {
    let file = std::fs::File::open(path)?;
    read_csv(file)
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<TransactionRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut pos = [0usize; 8];
    for (slot, col) in pos.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| Error::MissingColumn(col.to_string()))?;
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        // header is row 1
        let row_no = i + 2;
        let row = row.map_err(|e| Error::BadRow {
            row: row_no,
            reason: e.to_string(),
        })?;
        let field = |k: usize| row.get(pos[k]).unwrap_or("");
        let bad = |reason: String| Error::BadRow { row: row_no, reason };
        let timestamp = field(0)
            .parse::<i64>()
            .map_err(|e| bad(format!("timestamp: {e}")))?;
        let amount = field(5)
            .parse::<f64>()
            .map_err(|e| bad(format!("amount: {e}")))?;
        let is_laundering = field(7)
            .parse::<u8>()
            .map_err(|e| bad(format!("is_laundering: {e}")))?;
        let rec = TransactionRecord {
            timestamp,
            from_bank: field(1).to_string(),
            from_account: field(2).to_string(),
            to_bank: field(3).to_string(),
            to_account: field(4).to_string(),
            amount,
            payment_type: field(6).to_string(),
            is_laundering,
        };
        rec.validate().map_err(bad)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_csv<W: Write>(writer: W, records: &[TransactionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.write_record([
            r.timestamp.to_string(),
            r.from_bank.clone(),
            r.from_account.clone(),
            r.to_bank.clone(),
            r.to_account.clone(),
            format!("{}", r.amount),
            r.payment_type.clone(),
            r.is_laundering.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Ground-truth group file: one `bank:account` per line.
pub fn write_group<W: Write>(mut writer: W, group: &[AccountKey]) -> Result<()> {
    for key in group {
        writeln!(writer, "{key}")?;
    }
    Ok(())
}

pub fn read_group<R: Read>(mut reader: R) -> Result<Vec<AccountKey>> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split_once(':')
                .map(|(b, a)| AccountKey::new(b, a))
                .ok_or_else(|| Error::BadRow {
                    row: i + 1,
                    reason: format!("expected bank:account, got `{l}`"),
                })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormStrategy {
    /// Each country scales with its own min/max.
    CountryLevel,
    /// Every country scales with the pooled min/max.
    GlobalLevel,
    /// Every country scales with one shared constant pair.
    #[default]
    FixedValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub strategy: NormStrategy,
    pub min: f64,
    pub max: f64,
    pub source_country: Option<String>,
}

impl NormalizationSpec {
    pub fn new(strategy: NormStrategy, min: f64, max: f64) -> Result<Self> {
        let spec = Self {
            strategy,
            min,
            max,
            source_country: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max > self.min) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "normalization needs max > min, got min={} max={}",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Min–max scaling `(x − min)/(max − min)`, clamped into `[0, 1]`.
pub fn normalize(values: &[f64], spec: &NormalizationSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let span = spec.max - spec.min;
    Ok(values
        .iter()
        .map(|&x| ((x - spec.min) / span).clamp(0.0, 1.0))
        .collect())
}

fn min_max(values: impl IntoIterator<Item = f64>) -> Option<(f64, f64)> {
    values.into_iter().fold(None, |acc, x| match acc {
        None => Some((x, x)),
        Some((lo, hi)) => Some((lo.min(x), hi.max(x))),
    })
}

/// Widens a degenerate range so a constant column still normalizes.
fn widen(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

/// One normalization spec per country for the given per-country values.
///
/// `fixed` supplies the constant pair for [`NormStrategy::FixedValue`]; when it is
/// `None` the pair is taken from the `source_country` subset (or the first country).
pub fn fit_specs(
    values: &BTreeMap<String, Vec<f64>>,
    strategy: NormStrategy,
    fixed: Option<(f64, f64)>,
    source_country: Option<&str>,
) -> Result<BTreeMap<String, NormalizationSpec>> {
    let mut out = BTreeMap::new();
    let build = |lo: f64, hi: f64, src: Option<String>| -> Result<NormalizationSpec> {
        let (lo, hi) = widen(lo, hi);
        let mut s = NormalizationSpec::new(strategy, lo, hi)?;
        s.source_country = src;
        Ok(s)
    };
    match strategy {
        NormStrategy::CountryLevel => {
            for (c, v) in values {
                let (lo, hi) = min_max(v.iter().copied()).unwrap_or((0.0, 1.0));
                out.insert(c.clone(), build(lo, hi, Some(c.clone()))?);
            }
        }
        NormStrategy::GlobalLevel => {
            let (lo, hi) = min_max(values.values().flatten().copied()).unwrap_or((0.0, 1.0));
            for c in values.keys() {
                out.insert(c.clone(), build(lo, hi, None)?);
            }
        }
        NormStrategy::FixedValue => {
            let (lo, hi, src) = match fixed {
                Some((lo, hi)) => (lo, hi, source_country.map(str::to_string)),
                None => {
                    let src = source_country
                        .map(str::to_string)
                        .or_else(|| values.keys().next().cloned())
                        .ok_or_else(|| Error::InvalidConfig("no source country for fixed-value normalization".into()))?;
                    let v = values
                        .get(&src)
                        .ok_or_else(|| Error::InvalidConfig(format!("unknown source country `{src}`")))?;
                    let (lo, hi) = min_max(v.iter().copied()).unwrap_or((0.0, 1.0));
                    (lo, hi, Some(src))
                }
            };
            if !(hi > lo) {
                return Err(Error::InvalidConfig(format!(
                    "fixed-value normalization needs max > min, got min={lo} max={hi}"
                )));
            }
            for c in values.keys() {
                out.insert(c.clone(), build(lo, hi, src.clone())?);
            }
        }
    }
    Ok(out)
}

/// How labelled training edges are chosen. Decided per record, so both copies of a
/// cross-border transfer land on the same side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitConfig {
    /// Each record is a training record with probability `train_fraction`.
    Random { train_fraction: f64, seed: u64 },
    /// The earliest `train_fraction` of records (by timestamp, then record index) train.
    Chronological { train_fraction: f64 },
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig::Random {
            train_fraction: 0.05,
            seed: 0,
        }
    }
}

/// Training membership per record index of the collection.
pub fn split_records(collection: &GraphCollection, split: SplitConfig) -> Result<Vec<bool>> {
    let n = collection.record_count();
    let mut ts: HashMap<usize, i64> = HashMap::with_capacity(n);
    for g in collection.graphs.values() {
        for (&r, &t) in g.edge_records.iter().zip(&g.edge_timestamps) {
            ts.insert(r, t);
        }
    }
    match split {
        SplitConfig::Random { train_fraction, seed } => {
            check_fraction(train_fraction)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..n).map(|_| rng.gen::<f64>() < train_fraction).collect())
        }
        SplitConfig::Chronological { train_fraction } => {
            check_fraction(train_fraction)?;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&r| (ts.get(&r).copied().unwrap_or(i64::MAX), r));
            let cut = (train_fraction * n as f64).floor() as usize;
            let mut mask = vec![false; n];
            for &r in &order[..cut] {
                mask[r] = true;
            }
            Ok(mask)
        }
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::InvalidConfig(format!("train_fraction {f} outside [0, 1]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "timestamp,from_bank,from_account,to_bank,to_account,amount,payment_type,is_laundering\n";

    #[test]
    fn header_only_is_empty() {
        assert!(read_csv(HEADER.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn one_row_round_trips_fields() {
        let text = format!("{HEADER}100,US,a1,DE,b2,12.5,Wire,1\n");
        let recs = read_csv(text.as_bytes()).unwrap();
        assert_eq!(
            recs,
            vec![TransactionRecord {
                timestamp: 100,
                from_bank: "US".into(),
                from_account: "a1".into(),
                to_bank: "DE".into(),
                to_account: "b2".into(),
                amount: 12.5,
                payment_type: "Wire".into(),
                is_laundering: 1,
            }]
        );
        let mut buf = Vec::new();
        write_csv(&mut buf, &recs).unwrap();
        assert_eq!(read_csv(&buf[..]).unwrap(), recs);
    }

    #[test]
    fn negative_amount_names_row_two() {
        let text = format!("{HEADER}100,US,a1,US,b2,-5,Wire,0\n");
        match read_csv(text.as_bytes()).unwrap_err() {
            Error::BadRow { row, .. } => assert_eq!(row, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let text = "timestamp,from_bank,from_account,to_bank,to_account,payment_type,is_laundering\n";
        match read_csv(text.as_bytes()).unwrap_err() {
            Error::MissingColumn(c) => assert_eq!(c, "amount"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn extra_columns_are_ignored() {
        let text = "Currency,timestamp,from_bank,from_account,to_bank,to_account,amount,payment_type,is_laundering,Receiving Amount\n\
                    USD,1,US,a,US,b,3,ACH,0,3\n";
        let recs = read_csv(text.as_bytes()).unwrap();
        assert_eq!(recs[0].amount, 3.0);
    }

    #[test]
    fn normalize_boundaries_and_midpoint() {
        let spec = NormalizationSpec::new(NormStrategy::FixedValue, 0.0, 10.0).unwrap();
        assert_eq!(normalize(&[0.0, 10.0, 5.0], &spec).unwrap(), vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize(&[-3.0, 11.0], &spec).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn degenerate_spec_rejected() {
        assert!(NormalizationSpec::new(NormStrategy::FixedValue, 1.0, 1.0).is_err());
        let bad = NormalizationSpec {
            strategy: NormStrategy::GlobalLevel,
            min: 2.0,
            max: 2.0,
            source_country: None,
        };
        assert!(normalize(&[1.0], &bad).is_err());
    }

    #[test]
    fn fixed_value_constants_shared_across_countries() {
        let mut values = BTreeMap::new();
        values.insert("US".to_string(), vec![0.01, 2_134_359_601.0]);
        values.insert("DE".to_string(), vec![0.01, 8_046_315_118.0]);
        let specs = fit_specs(&values, NormStrategy::FixedValue, Some((0.01, 8_046_315_118.0)), None).unwrap();
        assert_eq!(specs["US"].min, specs["DE"].min);
        assert_eq!(specs["US"].max, specs["DE"].max);
        assert_eq!(specs["US"].max, 8_046_315_118.0);
        let x = [1_000_000.0];
        assert_eq!(normalize(&x, &specs["US"]).unwrap(), normalize(&x, &specs["DE"]).unwrap());
    }

    #[test]
    fn country_and_global_differ_only_when_ranges_differ() {
        let mut same = BTreeMap::new();
        same.insert("A".to_string(), vec![0.0, 5.0, 10.0]);
        same.insert("B".to_string(), vec![0.0, 2.0, 10.0]);
        let c = fit_specs(&same, NormStrategy::CountryLevel, None, None).unwrap();
        let g = fit_specs(&same, NormStrategy::GlobalLevel, None, None).unwrap();
        for k in ["A", "B"] {
            assert_eq!((c[k].min, c[k].max), (g[k].min, g[k].max));
        }
        let mut shifted = same.clone();
        shifted.insert("B".to_string(), vec![0.0, 2.0, 1000.0]);
        let c = fit_specs(&shifted, NormStrategy::CountryLevel, None, None).unwrap();
        let g = fit_specs(&shifted, NormStrategy::GlobalLevel, None, None).unwrap();
        assert_ne!(c["A"].max, g["A"].max);
    }

    #[test]
    fn fixed_value_from_source_subset() {
        let mut values = BTreeMap::new();
        values.insert("A".to_string(), vec![1.0, 3.0]);
        values.insert("B".to_string(), vec![0.0, 100.0]);
        let specs = fit_specs(&values, NormStrategy::FixedValue, None, Some("A")).unwrap();
        assert_eq!((specs["B"].min, specs["B"].max), (1.0, 3.0));
        assert_eq!(specs["B"].source_country.as_deref(), Some("A"));
    }

    #[test]
    fn group_file_round_trip() {
        let g = vec![AccountKey::new("US", "x1"), AccountKey::new("DE", "y:2")];
        let mut buf = Vec::new();
        write_group(&mut buf, &g).unwrap();
        assert_eq!(read_group(&buf[..]).unwrap(), g);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_idempotent_on_unit_range(xs in prop::collection::vec(0.0f64..=1.0, 1..40)) {
                let spec = NormalizationSpec::new(NormStrategy::FixedValue, 0.0, 1.0).unwrap();
                let once = normalize(&xs, &spec).unwrap();
                prop_assert_eq!(normalize(&once, &spec).unwrap(), once);
            }

            #[test]
            fn normalize_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0) {
                let spec = NormalizationSpec::new(NormStrategy::FixedValue, -10.0, 20.0).unwrap();
                let out = normalize(&[a, b], &spec).unwrap();
                if a <= b { prop_assert!(out[0] <= out[1]); } else { prop_assert!(out[0] >= out[1]); }
            }
        }
    }
}
