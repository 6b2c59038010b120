//! CSV writers. Every table carries a schema column so readers can reject
//! files written by an incompatible version. Wall time is left out of the
//! results table, which keeps reruns byte-identical.

use std::io::Write;

use serde::Serialize;

use crate::aggregate::{AggregateRow, CdfPoint};
use crate::run::ResultRecord;
use crate::BenchError;

pub const RESULTS_SCHEMA: &str = "xlmimo-results/1";
pub const AGGREGATE_SCHEMA: &str = "xlmimo-aggregate/1";
pub const CDF_SCHEMA: &str = "xlmimo-cdf/1";
pub const TRACE_SCHEMA: &str = "xlmimo-trace/1";

#[derive(Serialize)]
struct ResultRow<'a> {
    schema: &'static str,
    sweep_axis: &'a str,
    sweep_value: f64,
    seed: u64,
    scheme: &'a str,
    algorithm: &'a str,
    label: &'a str,
    pilot_ratio: Option<f64>,
    nmse: Option<f64>,
    nmse_db: Option<f64>,
    iterations: Option<usize>,
    clamps: usize,
    error: Option<&'a str>,
}

#[derive(Serialize)]
struct AggregateCsvRow<'a> {
    schema: &'static str,
    sweep_axis: &'a str,
    sweep_value: f64,
    scheme: &'a str,
    algorithm: &'a str,
    label: &'a str,
    count: usize,
    failed: usize,
    nmse: f64,
    nmse_db: f64,
}

#[derive(Serialize)]
struct CdfCsvRow<'a> {
    schema: &'static str,
    sweep_value: f64,
    scheme: &'a str,
    algorithm: &'a str,
    label: &'a str,
    nmse_db: f64,
    probability: f64,
}

#[derive(Serialize)]
struct TraceRow {
    schema: &'static str,
    step: usize,
    objective: f64,
}

pub fn write_results<W: Write>(records: &[ResultRecord], w: W) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(ResultRow {
            schema: RESULTS_SCHEMA,
            sweep_axis: &r.sweep_axis,
            sweep_value: r.sweep_value,
            seed: r.seed,
            scheme: r.scheme.name(),
            algorithm: r.algorithm.name(),
            label: &r.label,
            pilot_ratio: r.pilot_ratio,
            nmse: r.nmse,
            nmse_db: r.nmse.map(xlmimo::model::to_db),
            iterations: r.iterations,
            clamps: r.clamps,
            error: r.error.as_deref(),
        })?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_aggregate<W: Write>(rows: &[AggregateRow], w: W) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(AggregateCsvRow {
            schema: AGGREGATE_SCHEMA,
            sweep_axis: &r.sweep_axis,
            sweep_value: r.sweep_value,
            scheme: r.scheme.name(),
            algorithm: r.algorithm.name(),
            label: &r.label,
            count: r.count,
            failed: r.failed,
            nmse: r.nmse,
            nmse_db: r.nmse_db,
        })?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_cdf<W: Write>(points: &[CdfPoint], w: W) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    for p in points {
        out.serialize(CdfCsvRow {
            schema: CDF_SCHEMA,
            sweep_value: p.sweep_value,
            scheme: p.scheme.name(),
            algorithm: p.algorithm.name(),
            label: &p.label,
            nmse_db: p.nmse_db,
            probability: p.probability,
        })?;
    }
    out.flush()?;
    Ok(())
}

/// Objective trace of the pattern optimizer, one row per step.
pub fn write_trace<W: Write>(trace: &[f64], w: W) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    for (step, &objective) in trace.iter().enumerate() {
        out.serialize(TraceRow {
            schema: TRACE_SCHEMA,
            step,
            objective,
        })?;
    }
    out.flush()?;
    Ok(())
}

/// Results table as bytes.
pub fn results_csv(records: &[ResultRecord]) -> Result<Vec<u8>, BenchError> {
    let mut buf = Vec::new();
    write_results(records, &mut buf)?;
    Ok(buf)
}
