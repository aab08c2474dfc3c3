//! Post-processing of simulation logs: latency percentiles, objective
//! attainment, GPU cost and the max-throughput search.
//!
//! Percentiles use the nearest-rank rule over an exact sort. Requests that
//! arrive during the warm-up (the first 10% of the horizon by default) are
//! left out of latency percentiles.

mod capacity;
mod cost;
mod latency;
pub mod quantile;
mod report;

pub use capacity::{max_throughput, steady_state_p99, Probe, ThroughputOptions, ThroughputResult};
pub use cost::{cost_summary, CostSummary, WindowGpus};
pub use latency::{
    overall_attainment, slo_attainment, summarize_latency, LatencySummary, MetricSummary, Percentiles,
    SummaryOptions, WindowAttainment,
};
pub use report::{instance_seconds, series, write_series_csv, write_summary_json, RunSummary, SeriesRow};
