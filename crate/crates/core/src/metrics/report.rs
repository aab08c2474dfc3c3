use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::MetricsLog;
use crate::error::Result;
use crate::model::SloSpec;
use crate::policies::InstanceKind;

use super::cost::cost_summary;
use super::latency::{overall_attainment, slo_attainment, summarize_latency, window_count, LatencySummary, SummaryOptions};
use super::quantile::percentile;

/// Everything `summary.json` reports for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub horizon_ms: f64,
    pub arrived: usize,
    pub completed: usize,
    pub in_flight: usize,
    pub latency: LatencySummary,
    /// Steady-state share of arrivals meeting both objectives.
    pub attainment: f64,
    /// Lowest non-empty per-window attainment.
    pub min_window_attainment: f64,
    pub empty_windows: usize,
    pub gpu_seconds: f64,
    pub peak_gpus: u32,
    pub scaling_events: usize,
    pub truncated_scaling_events: usize,
}

impl RunSummary {
    pub fn new(seed: u64, log: &MetricsLog, slo: &SloSpec, opts: &SummaryOptions, window_ms: f64) -> Self {
        let windows = slo_attainment(log, slo, window_ms);
        let cost = cost_summary(log, window_ms);
        RunSummary {
            seed,
            horizon_ms: log.horizon_ms,
            arrived: log.arrived,
            completed: log.completed,
            in_flight: log.in_flight,
            latency: summarize_latency(log, opts),
            attainment: overall_attainment(log, slo, opts),
            min_window_attainment: windows
                .iter()
                .filter(|w| !w.empty)
                .map(|w| w.attainment)
                .fold(1.0, f64::min),
            empty_windows: windows.iter().filter(|w| w.empty).count(),
            gpu_seconds: cost.gpu_seconds,
            peak_gpus: cost.peak_gpus,
            scaling_events: log.scaling.len(),
            truncated_scaling_events: log.scaling.iter().filter(|s| s.truncated).count(),
        }
    }
}

/// One row of `series.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub window_start_s: f64,
    pub window_end_s: f64,
    pub requests: usize,
    pub attainment: f64,
    pub empty: bool,
    /// P99 TTFT of requests that arrived in the window.
    pub ttft_p99_ms: Option<f64>,
    pub avg_gpus: f64,
    pub peak_gpus: u32,
    pub image_instances: u32,
    pub text_instances: u32,
    pub prefill_instances: u32,
    pub decode_instances: u32,
}

pub fn series(log: &MetricsLog, slo: &SloSpec, window_ms: f64) -> Vec<SeriesRow> {
    let att = slo_attainment(log, slo, window_ms);
    let cost = cost_summary(log, window_ms);
    let n = window_count(log.end_ms, window_ms);
    let mut ttfts: Vec<Vec<f64>> = vec![Vec::new(); n];
    for r in &log.requests {
        if let Some(t) = r.ttft_ms() {
            ttfts[((r.arrival_ms / window_ms) as usize).min(n - 1)].push(t);
        }
    }
    att.iter()
        .zip(&cost.timeline)
        .zip(&ttfts)
        .map(|((a, c), t)| {
            let at_end = log
                .allocation
                .iter()
                .take_while(|p| p.time_ms < c.end_ms)
                .last()
                .map(|p| p.instances.clone())
                .unwrap_or_default();
            let count = |k: InstanceKind| at_end.get(&k).copied().unwrap_or(0);
            SeriesRow {
                window_start_s: a.start_ms / 1000.0,
                window_end_s: a.end_ms / 1000.0,
                requests: a.requests,
                attainment: a.attainment,
                empty: a.empty,
                ttft_p99_ms: percentile(t, 0.99),
                avg_gpus: c.avg_gpus,
                peak_gpus: c.peak_gpus,
                image_instances: count(InstanceKind::Image),
                text_instances: count(InstanceKind::Text),
                prefill_instances: count(InstanceKind::Prefill),
                decode_instances: count(InstanceKind::Decode),
            }
        })
        .collect()
}

pub fn write_series_csv(path: &Path, rows: &[SeriesRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Instance-seconds per kind over the run.
pub fn instance_seconds(log: &MetricsLog) -> BTreeMap<InstanceKind, f64> {
    let mut out = BTreeMap::new();
    for (i, p) in log.allocation.iter().enumerate() {
        let end = log.allocation.get(i + 1).map_or(log.end_ms, |q| q.time_ms).min(log.end_ms);
        for (&k, &n) in &p.instances {
            *out.entry(k).or_insert(0.0) += f64::from(n) * (end - p.time_ms).max(0.0) / 1000.0;
        }
    }
    out
}
