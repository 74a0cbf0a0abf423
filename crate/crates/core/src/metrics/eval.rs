use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Overlap buckets in percent, `[lo, hi)`.
pub const OVERLAP_BUCKETS: [(&str, f64, f64); 4] = [
    ("0-10", 0.0, 10.0),
    ("10-30", 10.0, 30.0),
    ("30-60", 30.0, 60.0),
    ("60+", 60.0, f64::INFINITY),
];

/// One evaluated scene pair. Metrics that were not computed are empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub pair: String,
    pub overlap: f64,
    pub hits_1: Option<f64>,
    pub hits_3: Option<f64>,
    pub hits_5: Option<f64>,
    pub mrr: Option<f64>,
    pub f1: Option<f64>,
    pub k_tilde: Option<f64>,
    pub mu: Option<f64>,
    pub overlap_pred: Option<bool>,
    pub overlap_true: Option<bool>,
    pub rre_deg: Option<f64>,
    pub rte: Option<f64>,
    pub rmse: Option<f64>,
    pub registered: Option<bool>,
    pub inlier_ratio: Option<f64>,
    pub feature_match: Option<bool>,
    pub scc: Option<f64>,
    pub chamfer: Option<f64>,
}

pub fn bucket_of(overlap_fraction: f64) -> &'static str {
    let pct = overlap_fraction * 100.0;
    OVERLAP_BUCKETS
        .iter()
        .find(|(_, lo, hi)| pct >= *lo && pct < *hi)
        .map_or("60+", |b| b.0)
}

pub fn write_csv(rows: &[EvalRow], path: &Path) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    crate::scenegraph::io::write_atomic(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub count: usize,
    /// Mean of every numeric column and rate of every flag column, over
    /// the rows where it is present.
    pub means: BTreeMap<String, f64>,
}

/// Per-bucket aggregates plus an `all` entry.
pub fn summarize(rows: &[EvalRow]) -> BTreeMap<String, BucketSummary> {
    let mut acc: BTreeMap<String, (usize, BTreeMap<String, (f64, usize)>)> = BTreeMap::new();
    for r in rows {
        let fields = match serde_json::to_value(r) {
            Ok(serde_json::Value::Object(m)) => m,
            _ => continue,
        };
        for key in ["all", bucket_of(r.overlap)] {
            let entry = acc.entry(key.to_string()).or_default();
            entry.0 += 1;
            for (name, v) in &fields {
                let x = match v {
                    serde_json::Value::Number(n) => n.as_f64(),
                    serde_json::Value::Bool(b) => Some(f64::from(u8::from(*b))),
                    _ => None,
                };
                if let Some(x) = x {
                    let slot = entry.1.entry(name.clone()).or_default();
                    slot.0 += x;
                    slot.1 += 1;
                }
            }
        }
    }
    acc.into_iter()
        .map(|(k, (count, sums))| {
            let means = sums.into_iter().map(|(n, (s, c))| (n, s / c as f64)).collect();
            (k, BucketSummary { count, means })
        })
        .collect()
}
