//! Summary statistics over result records. Medians and quantiles are taken
//! on the dB scale, so the median of `[1e-2, 1e-4]` is -30 dB.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use xlmimo::model::to_db;

use crate::run::ResultRecord;
use crate::spec::{Algorithm, SchemeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    /// Median of the dB values.
    Median,
    /// Arithmetic mean of the linear NMSE.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub sweep_axis: String,
    pub sweep_value: f64,
    pub scheme: SchemeKind,
    pub algorithm: Algorithm,
    pub label: String,
    /// Records that produced an NMSE.
    pub count: usize,
    /// Records that failed.
    pub failed: usize,
    pub nmse: f64,
    pub nmse_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub sweep_value: f64,
    pub scheme: SchemeKind,
    pub algorithm: Algorithm,
    pub label: String,
    pub nmse_db: f64,
    pub probability: f64,
}

/// Linear-interpolation quantile of ascending `sorted`, `q` in [0, 1].
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Median of `values` in dB, NaN-free input expected.
pub fn median_db(values: &[f64]) -> Option<f64> {
    quantile_db(values, 0.5)
}

/// `q`-quantile of linear `values`, returned in dB.
pub fn quantile_db(values: &[f64], q: f64) -> Option<f64> {
    let mut db: Vec<f64> = values.iter().map(|&v| to_db(v)).collect();
    db.sort_by(f64::total_cmp);
    quantile(&db, q)
}

type Key = (u64, SchemeKind, Algorithm);

/// Records grouped by (sweep value, scheme, algorithm) in order of first
/// appearance.
fn groups(records: &[ResultRecord]) -> Vec<(Key, Vec<&ResultRecord>)> {
    let mut index: HashMap<Key, usize> = HashMap::new();
    let mut out: Vec<(Key, Vec<&ResultRecord>)> = Vec::new();
    for r in records {
        let key = (r.sweep_value.to_bits(), r.scheme, r.algorithm);
        let i = *index.entry(key).or_insert_with(|| {
            out.push((key, Vec::new()));
            out.len() - 1
        });
        out[i].1.push(r);
    }
    out
}

/// One row per (sweep value, scheme, algorithm) with at least one NMSE.
pub fn aggregate(records: &[ResultRecord], statistic: Statistic) -> Vec<AggregateRow> {
    groups(records)
        .into_iter()
        .filter_map(|(_, rs)| {
            let vals: Vec<f64> = rs.iter().filter_map(|r| r.nmse).collect();
            let (nmse, nmse_db) = match statistic {
                Statistic::Median => {
                    let db = median_db(&vals)?;
                    (10f64.powf(db / 10.0), db)
                }
                Statistic::Mean => {
                    if vals.is_empty() {
                        return None;
                    }
                    let m = vals.iter().sum::<f64>() / vals.len() as f64;
                    (m, to_db(m))
                }
            };
            let first = rs[0];
            Some(AggregateRow {
                sweep_axis: first.sweep_axis.clone(),
                sweep_value: first.sweep_value,
                scheme: first.scheme,
                algorithm: first.algorithm,
                label: first.label.clone(),
                count: vals.len(),
                failed: rs.len() - vals.len(),
                nmse,
                nmse_db,
            })
        })
        .collect()
}

/// Empirical CDF of the NMSE per (sweep value, scheme, algorithm): the
/// `i`-th smallest of `n` values sits at probability `i / n`.
pub fn empirical_cdf(records: &[ResultRecord]) -> Vec<CdfPoint> {
    let mut out = Vec::new();
    for (_, rs) in groups(records) {
        let mut db: Vec<f64> = rs.iter().filter_map(|r| r.nmse).map(to_db).collect();
        db.sort_by(f64::total_cmp);
        let n = db.len() as f64;
        for (i, v) in db.into_iter().enumerate() {
            out.push(CdfPoint {
                sweep_value: rs[0].sweep_value,
                scheme: rs[0].scheme,
                algorithm: rs[0].algorithm,
                label: rs[0].label.clone(),
                nmse_db: v,
                probability: (i + 1) as f64 / n,
            });
        }
    }
    out
}

/// Per-iteration dB median of the NMSE traces, returned on the linear scale.
/// Only iterations reached by every trace are included.
pub fn median_trace(records: &[&ResultRecord]) -> Vec<f64> {
    let traces: Vec<&Vec<f64>> = records
        .iter()
        .map(|r| &r.nmse_trace)
        .filter(|t| !t.is_empty())
        .collect();
    let len = traces.iter().map(|t| t.len()).min().unwrap_or(0);
    (0..len)
        .filter_map(|i| {
            let col: Vec<f64> = traces.iter().map(|t| t[i]).collect();
            median_db(&col).map(|db| 10f64.powf(db / 10.0))
        })
        .collect()
}
