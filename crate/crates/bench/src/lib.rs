//! Experiment harness for the xlmimo estimators: sweep descriptions,
//! parallel Monte Carlo runs, dB-domain aggregation and CSV output.

pub mod aggregate;
pub mod output;
pub mod run;
pub mod spec;

pub use aggregate::{aggregate, empirical_cdf, median_trace, AggregateRow, CdfPoint, Statistic};
pub use run::{run_experiment, ResultRecord};
pub use spec::{Algorithm, ExperimentSpec, SchemeKind, Sweep};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error(transparent)]
    Core(#[from] xlmimo::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
