use serde::{Deserialize, Serialize};

use crate::engine::{MetricsLog, RequestRecord};
use crate::model::{Modality, SloSpec};

use super::quantile::nearest_rank;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryOptions {
    /// Leading share of the horizon whose arrivals are left out.
    pub warmup_fraction: f64,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        SummaryOptions { warmup_fraction: 0.1 }
    }
}

impl SummaryOptions {
    pub fn steady(&self, log: &MetricsLog, r: &RequestRecord) -> bool {
        r.arrival_ms >= self.warmup_fraction * log.horizon_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Option<Percentiles> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Percentiles {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: nearest_rank(&v, 0.5)?,
            p90: nearest_rank(&v, 0.9)?,
            p99: nearest_rank(&v, 0.99)?,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub all: Option<Percentiles>,
    pub text_only: Option<Percentiles>,
    pub image_text: Option<Percentiles>,
}

impl MetricSummary {
    fn of(records: &[&RequestRecord], value: impl Fn(&RequestRecord) -> Option<f64>) -> MetricSummary {
        let pick = |m: Option<Modality>| -> Vec<f64> {
            records
                .iter()
                .filter(|r| m.is_none_or(|m| r.modality == m))
                .filter_map(|r| value(r))
                .collect()
        };
        MetricSummary {
            all: Percentiles::of(&pick(None)),
            text_only: Percentiles::of(&pick(Some(Modality::TextOnly))),
            image_text: Percentiles::of(&pick(Some(Modality::ImageText))),
        }
    }

    pub fn get(&self, m: Modality) -> Option<Percentiles> {
        match m {
            Modality::TextOnly => self.text_only,
            Modality::ImageText => self.image_text,
        }
    }
}

/// TTFT and TBT percentiles over completed steady-state requests. TBT is
/// each request's mean gap between output tokens.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    /// No request completed after the warm-up.
    pub empty: bool,
    pub completed: usize,
    pub in_flight: usize,
    pub warmup_excluded: usize,
    pub ttft: MetricSummary,
    pub tbt: MetricSummary,
}

pub fn summarize_latency(log: &MetricsLog, opts: &SummaryOptions) -> LatencySummary {
    let steady: Vec<&RequestRecord> = log.requests.iter().filter(|r| opts.steady(log, r)).collect();
    let done: Vec<&RequestRecord> = steady.iter().copied().filter(|r| r.completed()).collect();
    LatencySummary {
        empty: done.is_empty(),
        completed: done.len(),
        in_flight: steady.len() - done.len(),
        warmup_excluded: log.requests.len() - steady.len(),
        ttft: MetricSummary::of(&done, RequestRecord::ttft_ms),
        tbt: MetricSummary::of(&done, RequestRecord::tbt_mean_ms),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowAttainment {
    pub start_ms: f64,
    pub end_ms: f64,
    /// Completed requests that arrived in the window.
    pub requests: usize,
    pub attainment: f64,
    /// No completed request arrived in the window; attainment is 1 by
    /// convention.
    pub empty: bool,
}

/// Per-window share of completed requests meeting both objectives, by
/// arrival window over `[0, end_ms)`.
pub fn slo_attainment(log: &MetricsLog, slo: &SloSpec, window_ms: f64) -> Vec<WindowAttainment> {
    let n = window_count(log.end_ms, window_ms);
    let mut met = vec![0usize; n];
    let mut total = vec![0usize; n];
    for r in log.requests.iter().filter(|r| r.completed()) {
        let w = ((r.arrival_ms / window_ms) as usize).min(n - 1);
        total[w] += 1;
        met[w] += usize::from(r.meets_slo(slo));
    }
    (0..n)
        .map(|w| WindowAttainment {
            start_ms: w as f64 * window_ms,
            end_ms: ((w + 1) as f64 * window_ms).min(log.end_ms.max(window_ms)),
            requests: total[w],
            attainment: if total[w] == 0 { 1.0 } else { met[w] as f64 / total[w] as f64 },
            empty: total[w] == 0,
        })
        .collect()
}

/// Share of steady-state arrivals that completed within both objectives;
/// requests still in flight count as misses.
pub fn overall_attainment(log: &MetricsLog, slo: &SloSpec, opts: &SummaryOptions) -> f64 {
    let steady: Vec<&RequestRecord> = log.requests.iter().filter(|r| opts.steady(log, r)).collect();
    if steady.is_empty() {
        return 1.0;
    }
    steady.iter().filter(|r| r.meets_slo(slo)).count() as f64 / steady.len() as f64
}

pub(crate) fn window_count(end_ms: f64, window_ms: f64) -> usize {
    ((end_ms / window_ms).ceil() as usize).max(1)
}
