use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Modality, SloSpec};
use crate::policies::InstanceKind;

/// Timestamps of one encode shard.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShardRecord {
    pub instance: u32,
    pub images: u32,
    pub tiles: u32,
    pub preprocess_start_ms: Option<f64>,
    pub preprocess_end_ms: Option<f64>,
    pub encode_start_ms: Option<f64>,
    pub encode_end_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival_ms: f64,
    pub modality: Modality,
    pub service_id: String,
    pub text_tokens: u64,
    pub image_tokens: u64,
    pub images: u32,
    pub output_tokens: u32,
    pub shards: Vec<ShardRecord>,
    /// When the prefill instance finished pulling image tokens.
    pub transfer_end_ms: Option<f64>,
    pub prefill_instance: Option<u32>,
    pub prefill_start_ms: Option<f64>,
    /// First token.
    pub prefill_end_ms: Option<f64>,
    pub decode_instance: Option<u32>,
    pub completion_ms: Option<f64>,
    /// Gaps between consecutive output tokens, run-length encoded.
    pub tbt_gaps: Vec<(f64, u32)>,
}

impl RequestRecord {
    pub fn ttft_ms(&self) -> Option<f64> {
        self.prefill_end_ms.map(|t| t - self.arrival_ms)
    }

    pub fn completed(&self) -> bool {
        self.completion_ms.is_some()
    }

    pub fn preprocess_start_ms(&self) -> Option<f64> {
        min_of(self.shards.iter().map(|s| s.preprocess_start_ms))
    }

    pub fn preprocess_end_ms(&self) -> Option<f64> {
        max_of(self.shards.iter().map(|s| s.preprocess_end_ms))
    }

    pub fn encode_start_ms(&self) -> Option<f64> {
        min_of(self.shards.iter().map(|s| s.encode_start_ms))
    }

    pub fn encode_end_ms(&self) -> Option<f64> {
        max_of(self.shards.iter().map(|s| s.encode_end_ms))
    }

    /// Mean time between output tokens; `None` for single-token outputs.
    pub fn tbt_mean_ms(&self) -> Option<f64> {
        let (sum, n) = self
            .tbt_gaps
            .iter()
            .fold((0.0, 0u64), |(s, n), &(g, c)| (s + g * f64::from(c), n + u64::from(c)));
        (n > 0).then(|| sum / n as f64)
    }

    /// Nearest-rank P99 of this request's token gaps.
    pub fn tbt_p99_ms(&self) -> Option<f64> {
        let mut runs = self.tbt_gaps.clone();
        runs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n: u64 = runs.iter().map(|r| u64::from(r.1)).sum();
        if n == 0 {
            return None;
        }
        let rank = ((0.99 * n as f64).ceil() as u64).clamp(1, n);
        let mut seen = 0;
        for (g, c) in runs {
            seen += u64::from(c);
            if seen >= rank {
                return Some(g);
            }
        }
        None
    }

    /// Completed and within both objectives. The TBT check uses the mean gap.
    pub fn meets_slo(&self, slo: &SloSpec) -> bool {
        let Some(ttft) = self.ttft_ms() else { return false };
        self.completed()
            && ttft <= slo.ttft_slo_ms(self.modality)
            && self.tbt_mean_ms().is_none_or(|t| t <= slo.tbt_slo_ms())
    }
}

fn min_of(it: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    it.flatten().reduce(f64::min)
}

fn max_of(it: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    it.flatten().reduce(f64::max)
}

/// Allocation from `time_ms` until the next point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPoint {
    pub time_ms: f64,
    pub gpus: u32,
    /// Instances holding GPUs (starting, active or draining) per kind.
    pub instances: BTreeMap<InstanceKind, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub time_ms: f64,
    pub targets: BTreeMap<InstanceKind, u32>,
    pub bumped: Option<InstanceKind>,
    /// The decision was cut to fit the inventory or could not be placed.
    pub truncated: bool,
    pub unplaced: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub horizon_ms: f64,
    pub end_ms: f64,
    /// One record per arrived request, in arrival order.
    pub requests: Vec<RequestRecord>,
    pub allocation: Vec<AllocationPoint>,
    pub scaling: Vec<ScalingRecord>,
    pub gpu_seconds: f64,
    pub inventory_gpus: u32,
    pub arrived: usize,
    pub completed: usize,
    pub in_flight: usize,
    pub events: u64,
}

impl MetricsLog {
    /// GPU count in force at `t`.
    pub fn gpus_at(&self, t: f64) -> u32 {
        match self.allocation.partition_point(|p| p.time_ms <= t) {
            0 => 0,
            i => self.allocation[i - 1].gpus,
        }
    }

    /// Per-request CSV: id, arrival, TTFT, TBT and stage timestamps.
    pub fn write_requests_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "request_id",
            "arrival",
            "modality",
            "images",
            "text_tokens",
            "image_tokens",
            "output_tokens",
            "ttft",
            "tbt_mean",
            "tbt_p99",
            "preprocess_start",
            "preprocess_end",
            "encode_start",
            "encode_end",
            "transfer_end",
            "prefill_start",
            "prefill_end",
            "completion",
        ])?;
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.requests {
            out.write_record([
                r.id.to_string(),
                format!("{:.6}", r.arrival_ms),
                r.modality.as_str().to_string(),
                r.images.to_string(),
                r.text_tokens.to_string(),
                r.image_tokens.to_string(),
                r.output_tokens.to_string(),
                f(r.ttft_ms()),
                f(r.tbt_mean_ms()),
                f(r.tbt_p99_ms()),
                f(r.preprocess_start_ms()),
                f(r.preprocess_end_ms()),
                f(r.encode_start_ms()),
                f(r.encode_end_ms()),
                f(r.transfer_end_ms),
                f(r.prefill_start_ms),
                f(r.prefill_end_ms),
                f(r.completion_ms),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}
