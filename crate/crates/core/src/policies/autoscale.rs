use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Architecture, StageKind};
use crate::workload::WorkloadSummary;

use super::sizing::PoolCapacity;
use super::{InstanceKind, Topology};

/// Offered load over one autoscaling window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadWindow {
    pub window_ms: f64,
    pub image_token_rate: f64,
    pub text_token_rate: f64,
    pub total_token_rate: f64,
    /// Predicted monolithic GPU work, ms per second.
    pub work_rate: f64,
    pub output_token_rate: f64,
    pub slo_attainment: f64,
    /// Mean queueing delay per stage over the window.
    pub queue_delay_ms: BTreeMap<StageKind, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoscaleParams {
    pub attainment_threshold: f64,
    /// A pool shrinks only while its load stays below this share of its
    /// current capacity.
    pub scale_down_fraction: f64,
    pub scale_down_windows: u32,
}

impl Default for AutoscaleParams {
    fn default() -> Self {
        AutoscaleParams {
            attainment_threshold: 0.99,
            scale_down_fraction: 0.7,
            scale_down_windows: 2,
        }
    }
}

/// Instance counts per kind.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCounts(pub BTreeMap<InstanceKind, u32>);

impl PoolCounts {
    pub fn get(&self, kind: InstanceKind) -> u32 {
        self.0.get(&kind).copied().unwrap_or(0)
    }

    pub fn set(&mut self, kind: InstanceKind, n: u32) {
        self.0.insert(kind, n);
    }

    pub fn gpus(&self, tps: &BTreeMap<InstanceKind, u32>) -> u32 {
        self.0
            .iter()
            .map(|(k, n)| n * tps.get(k).copied().unwrap_or(1))
            .sum()
    }
}

impl<const N: usize> From<[(InstanceKind, u32); N]> for PoolCounts {
    fn from(v: [(InstanceKind, u32); N]) -> Self {
        PoolCounts(v.into_iter().collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalingDecision {
    pub targets: PoolCounts,
    pub tp_choices: BTreeMap<InstanceKind, u32>,
    pub max_batch: BTreeMap<InstanceKind, u32>,
    /// Targets were cut to fit the GPU inventory.
    pub clamped: bool,
    /// Pool that received an extra replica for missed objectives.
    pub bumped: Option<InstanceKind>,
}

/// Consecutive low-load windows per pool.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScaleGuard {
    low_streak: BTreeMap<InstanceKind, u32>,
}

fn load_and_capacity(
    kind: InstanceKind,
    w: &LoadWindow,
    caps: &PoolCapacity,
    topology: Topology,
    arch: Architecture,
) -> (f64, f64) {
    match kind {
        InstanceKind::Image => (w.image_token_rate, caps.image_tokens_per_sec),
        InstanceKind::Decode => (w.output_token_rate, caps.decode_tokens_per_sec),
        InstanceKind::Text | InstanceKind::Prefill if !topology.has_image_pool() => {
            (w.work_rate, caps.monolith_work_per_sec)
        }
        InstanceKind::Text | InstanceKind::Prefill => {
            let ml = match arch {
                Architecture::CroAttn => w.text_token_rate,
                Architecture::DecOnly => w.total_token_rate,
            };
            (ml, caps.prefill_tokens_per_sec)
        }
    }
}

fn replicas(ml: f64, mc: f64, ceiling: u32) -> u32 {
    if ml <= 0.0 {
        return 1;
    }
    if !(mc > 0.0) {
        return ceiling.max(1);
    }
    ((ml / mc).ceil() as u32).clamp(1, ceiling.max(1))
}

fn stage_pool(stage: StageKind, topology: Topology) -> Option<InstanceKind> {
    match stage {
        StageKind::Preprocess | StageKind::Encode if topology.has_image_pool() => Some(InstanceKind::Image),
        StageKind::Preprocess | StageKind::Encode | StageKind::Prefill => Some(topology.prefill_kind()),
        StageKind::Decode if topology.is_pd() => Some(InstanceKind::Decode),
        StageKind::Decode => Some(InstanceKind::Text),
        StageKind::Transfer => None,
    }
}

/// Token-aware pool sizing: `max(1, ceil(ML / MC))` per pool, one extra
/// replica for the pool with the longest queues when attainment is low,
/// hysteresis on the way down, and a clamp to the GPU inventory.
#[allow(clippy::too_many_arguments)]
pub fn autoscale(
    window: &LoadWindow,
    caps: &PoolCapacity,
    topology: Topology,
    arch: Architecture,
    current: &PoolCounts,
    tps: &BTreeMap<InstanceKind, u32>,
    inventory_gpus: u32,
    params: &AutoscaleParams,
    guard: &mut ScaleGuard,
) -> ScalingDecision {
    let mut targets = PoolCounts::default();
    for &kind in topology.kinds() {
        let (ml, mc) = load_and_capacity(kind, window, caps, topology, arch);
        let tp = tps.get(&kind).copied().unwrap_or(1).max(1);
        let raw = replicas(ml, mc, inventory_gpus / tp);
        let cur = current.get(kind);
        let streak = guard.low_streak.entry(kind).or_insert(0);
        let target = if raw >= cur {
            *streak = 0;
            raw
        } else if ml < params.scale_down_fraction * f64::from(cur) * mc {
            *streak += 1;
            if *streak >= params.scale_down_windows {
                *streak = 0;
                raw
            } else {
                cur
            }
        } else {
            *streak = 0;
            cur
        };
        targets.set(kind, target);
    }

    let mut bumped = None;
    if window.slo_attainment < params.attainment_threshold {
        let worst = window
            .queue_delay_ms
            .iter()
            .filter_map(|(s, d)| stage_pool(*s, topology).map(|k| (k, *d)))
            .filter(|(k, _)| topology.kinds().contains(k))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((kind, _)) = worst {
            let n = targets.get(kind).max(current.get(kind)) + 1;
            targets.set(kind, n);
            guard.low_streak.insert(kind, 0);
            bumped = Some(kind);
        }
    }

    let clamped = clamp_to_inventory(&mut targets, tps, inventory_gpus);
    ScalingDecision {
        targets,
        tp_choices: tps.clone(),
        max_batch: BTreeMap::new(),
        clamped,
        bumped,
    }
}

/// Shrinks the pool using the most GPUs until the targets fit. Pools never
/// drop below one instance.
fn clamp_to_inventory(targets: &mut PoolCounts, tps: &BTreeMap<InstanceKind, u32>, inventory: u32) -> bool {
    let mut clamped = false;
    while targets.gpus(tps) > inventory {
        let victim = targets
            .0
            .iter()
            .filter(|(_, n)| **n > 1)
            .max_by_key(|(k, n)| (**n * tps.get(k).copied().unwrap_or(1), std::cmp::Reverse(**k)))
            .map(|(k, _)| *k);
        match victim {
            Some(k) => {
                let n = targets.get(k);
                targets.set(k, n - 1);
                clamped = true;
            }
            None => return true,
        }
    }
    clamped
}

/// Initial pool sizes from workload history: `N_i = ceil(image QPS x encode
/// seconds)`, `N_t = ceil(N_i / images per request)`. Without history the
/// configured overprovisioned counts are used.
pub fn initial_sizing(
    summary: Option<&WorkloadSummary>,
    median_encode_latency_s: f64,
    overprovision: &PoolCounts,
) -> PoolCounts {
    match summary {
        Some(s) if !s.empty => {
            let n_i = ((s.median_image_qps * median_encode_latency_s).ceil() as u32).max(1);
            let per_request = s.images_per_image_request.median.max(1.0);
            let n_t = ((f64::from(n_i) / per_request).ceil() as u32).max(1);
            PoolCounts::from([(InstanceKind::Image, n_i), (InstanceKind::Text, n_t)])
        }
        _ => overprovision.clone(),
    }
}
