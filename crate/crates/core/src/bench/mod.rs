//! Latency benchmark: many session clients driving the pipeline at once.

pub mod harness;
pub mod stats;

pub use harness::{
    check, collect_overheads, run_bench, run_once, scaling_ratio, BenchConfig, BenchError, RunOutcome, MAX_SCALING_RATIO,
};
pub use stats::{arithmetic_mean, harmonic_mean, percentile, performance_rate, BenchStats, MsgCount, StatsError, CSV_HEADER};
