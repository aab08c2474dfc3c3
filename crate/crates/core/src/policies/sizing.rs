use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Modality, SloSpec, StageKind};
use crate::profiles::{capacity_for_job, max_capacity, wait_multiplier, CapacityOptions, LatencyProfile, ReferenceJob};

use super::{InstanceKind, Topology};

pub const MAX_DECODE_BATCH: u32 = 256;
pub const MAX_PREFILL_BATCH: u32 = 64;

/// Latency budget of each pool, carved out of the TTFT objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageShares {
    /// Preprocess plus encode budget on Image instances.
    pub encode_ms: f64,
    pub prefill_ms: f64,
    /// Whole-request budget on a monolithic instance.
    pub monolith_ms: f64,
}

/// Splits the image-text TTFT objective in proportion to the isolated
/// reference breakdown; prefill is further held to the text-only objective.
pub fn stage_slo_shares(profile: &LatencyProfile, slo: &SloSpec) -> Result<StageShares> {
    let tp = profile.reference.tp;
    let tiles = profile.reference_tiles();
    let pre = profile.preprocess_latency(tiles, profile.reference.cpu_cores)?;
    let enc = profile.encode_latency(tiles, tp)?;
    let pf = profile.prefill_latency(
        u64::from(profile.reference.text_tokens),
        profile.reference_image_tokens(),
        tp,
    )?;
    let total = pre + enc + pf;
    let image_slo = slo.ttft_slo_ms(Modality::ImageText);
    let text_slo = slo.ttft_slo_ms(Modality::TextOnly);
    Ok(StageShares {
        encode_ms: image_slo * (pre + enc) / total,
        prefill_ms: (image_slo * pf / total).min(text_slo),
        monolith_ms: image_slo,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShardingChoice {
    pub tp: u32,
    /// Capacity at the chosen degree, tokens/sec.
    pub tokens_per_sec: f64,
    /// False when no degree meets the stage budget; `tp` is then the largest.
    pub feasible: bool,
}

/// Picks the TP degree with the highest capacity per GPU among those whose
/// single-request latency fits the stage budget. Ties go to the smaller TP.
pub fn select_sharding(
    kind: InstanceKind,
    profile: &LatencyProfile,
    slo: &SloSpec,
    opts: &CapacityOptions,
) -> Result<ShardingChoice> {
    let shares = stage_slo_shares(profile, slo)?;
    let (stage, share, candidates): (StageKind, f64, Vec<u32>) = match kind {
        InstanceKind::Image => (
            StageKind::Encode,
            shares.encode_ms,
            profile.model.supported_tp_encoder.iter().copied().collect(),
        ),
        InstanceKind::Text | InstanceKind::Prefill => (
            StageKind::Prefill,
            shares.prefill_ms,
            text_tps(profile, StageKind::Prefill),
        ),
        InstanceKind::Decode => return select_decode_sharding(profile, slo),
    };
    let mut best: Option<(f64, u32, f64)> = None;
    for &tp in &candidates {
        let cap = max_capacity(profile, stage, tp, share, opts)?;
        if !cap.feasible {
            continue;
        }
        let per_gpu = cap.tokens_per_sec / f64::from(tp);
        if best.is_none_or(|(b, _, _)| per_gpu > b) {
            best = Some((per_gpu, tp, cap.tokens_per_sec));
        }
    }
    Ok(match best {
        Some((_, tp, tokens_per_sec)) => ShardingChoice {
            tp,
            tokens_per_sec,
            feasible: true,
        },
        None => ShardingChoice {
            tp: candidates.iter().copied().max().unwrap_or(1),
            tokens_per_sec: 0.0,
            feasible: false,
        },
    })
}

fn text_tps(profile: &LatencyProfile, stage: StageKind) -> Vec<u32> {
    let profiled = profile.profiled_tps(stage);
    let (lo, hi) = (profiled.first().copied().unwrap_or(0), profiled.last().copied().unwrap_or(0));
    profile
        .model
        .supported_tp_text
        .iter()
        .copied()
        .filter(|tp| (lo..=hi).contains(tp))
        .collect()
}

fn select_decode_sharding(profile: &LatencyProfile, slo: &SloSpec) -> Result<ShardingChoice> {
    let mut best: Option<(f64, u32, f64)> = None;
    let candidates = text_tps(profile, StageKind::Decode);
    for &tp in &candidates {
        if profile.tbt_latency(1, tp, MAX_DECODE_BATCH)? > slo.tbt_slo_ms() {
            continue;
        }
        let b = select_max_batch(InstanceKind::Decode, tp, profile, slo)?;
        let tokens_per_sec = f64::from(b) * 1000.0 / profile.tbt_latency(b, tp, MAX_DECODE_BATCH)?;
        let per_gpu = tokens_per_sec / f64::from(tp);
        if best.is_none_or(|(p, _, _)| per_gpu > p) {
            best = Some((per_gpu, tp, tokens_per_sec));
        }
    }
    Ok(match best {
        Some((_, tp, tokens_per_sec)) => ShardingChoice {
            tp,
            tokens_per_sec,
            feasible: true,
        },
        None => ShardingChoice {
            tp: candidates.iter().copied().max().unwrap_or(1),
            tokens_per_sec: 0.0,
            feasible: false,
        },
    })
}

/// Largest batch whose latency stays within the stage budget. Image
/// instances do not batch.
pub fn select_max_batch(kind: InstanceKind, tp: u32, profile: &LatencyProfile, slo: &SloSpec) -> Result<u32> {
    match kind {
        InstanceKind::Image => Ok(1),
        InstanceKind::Text | InstanceKind::Prefill => {
            let share = stage_slo_shares(profile, slo)?.prefill_ms;
            let text = u64::from(profile.reference.text_tokens);
            let fixed = profile.prefill_fixed_ms(tp)?;
            let work = profile.prefill_work_ms(text, 0, tp)?;
            let fits = ((share - fixed) / work).floor();
            Ok((fits.max(1.0) as u32).min(MAX_PREFILL_BATCH))
        }
        InstanceKind::Decode => {
            let limit = slo.tbt_slo_ms();
            let mut best = 1;
            for b in 1..=MAX_DECODE_BATCH {
                if profile.tbt_latency(b, tp, MAX_DECODE_BATCH)? <= limit {
                    best = b;
                }
            }
            Ok(best)
        }
    }
}

/// Per-instance capacities used by the autoscaler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolCapacity {
    /// Image tokens/sec one Image instance sustains.
    pub image_tokens_per_sec: f64,
    /// Prefill tokens/sec one Text or Prefill instance sustains, counted in
    /// the architecture's load metric.
    pub prefill_tokens_per_sec: f64,
    /// GPU work (ms per second) one monolithic instance sustains.
    pub monolith_work_per_sec: f64,
    /// Output tokens/sec one decode lane sustains at its max batch.
    pub decode_tokens_per_sec: f64,
}

pub fn pool_capacities(
    profile: &LatencyProfile,
    slo: &SloSpec,
    topology: Topology,
    tp_image: u32,
    tp_text: u32,
    decode_max_batch: u32,
    opts: &CapacityOptions,
) -> Result<PoolCapacity> {
    let shares = stage_slo_shares(profile, slo)?;
    let image_tokens_per_sec = if topology.has_image_pool() {
        max_capacity(profile, StageKind::Encode, tp_image, shares.encode_ms, opts)?.tokens_per_sec
    } else {
        0.0
    };
    let prefill_tokens_per_sec =
        max_capacity(profile, StageKind::Prefill, tp_text, shares.prefill_ms, opts)?.tokens_per_sec;
    let tiles = profile.reference_tiles();
    let service_ms = profile.encode_latency(tiles, tp_text)?
        + profile.prefill_latency(
            u64::from(profile.reference.text_tokens),
            profile.reference_image_tokens(),
            tp_text,
        )?;
    // One unit of work per millisecond of service: capacity is rho_max * 1000.
    let job = ReferenceJob {
        tokens: service_ms,
        service_ms,
    };
    let monolith_work_per_sec =
        capacity_for_job(job, shares.monolith_ms, wait_multiplier(opts.wait_quantile)).tokens_per_sec;
    let b = decode_max_batch.max(1);
    let decode_tokens_per_sec = f64::from(b) * 1000.0 / profile.tbt_latency(b, tp_text, b)?;
    Ok(PoolCapacity {
        image_tokens_per_sec,
        prefill_tokens_per_sec,
        monolith_work_per_sec,
        decode_tokens_per_sec,
    })
}
