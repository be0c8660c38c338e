//! Experiment drivers producing the tabular data behind the error plots.

pub mod quantbench;
pub mod sweep;

pub use quantbench::{
    quant_error_bench, quantile_summary, records_csv, BufferKind, QuantBenchRecord, QuantScheme,
    QuantileSummary,
};
pub use sweep::{
    dominance_violations, exhaustive_sweep, sweep, BucketKey, SweepBucket, SweepDomain,
    SweepResult, SweepScheme, SweepSummary,
};
