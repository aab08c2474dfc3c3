//! Maximum sustainable token rate per stage.
//!
//! A stage instance is treated as an M/D/1 queue serving the profile's
//! reference job. The predicted latency is the deterministic service time plus
//! a multiple of the mean M/D/1 wait, `rho * S / (2 * (1 - rho))`. The multiple
//! turns the mean wait into an approximate tail: with an exponential wait tail
//! the `q` quantile sits near `-ln(1 - q)` means.

use serde::{Deserialize, Serialize};

use super::LatencyProfile;
use crate::error::{Error, Result};
use crate::model::{Architecture, StageKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityOptions {
    /// Wait quantile the latency check targets; `0` uses the mean wait.
    pub wait_quantile: f64,
}

impl Default for CapacityOptions {
    fn default() -> Self {
        CapacityOptions { wait_quantile: 0.99 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capacity {
    pub tokens_per_sec: f64,
    pub feasible: bool,
}

/// One unit of work used to express a stage's capacity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceJob {
    /// Tokens the job counts toward the stage's load metric.
    pub tokens: f64,
    pub service_ms: f64,
}

pub fn wait_multiplier(wait_quantile: f64) -> f64 {
    if wait_quantile <= 0.0 {
        1.0
    } else {
        (-(1.0 - wait_quantile.min(0.999_999)).ln()).max(1.0)
    }
}

/// Reference job of `stage` at `tp`. Prefill of CroAttn models is measured in
/// text tokens; every other stage in the tokens it actually processes.
pub fn reference_job(profile: &LatencyProfile, stage: StageKind, tp: u32) -> Result<ReferenceJob> {
    let text = u64::from(profile.reference.text_tokens);
    let image = profile.reference_image_tokens();
    let tiles = profile.reference_tiles();
    match stage {
        StageKind::Encode => Ok(ReferenceJob {
            tokens: image as f64,
            service_ms: profile.encode_latency(tiles, tp)?,
        }),
        StageKind::Prefill => {
            let tokens = match profile.architecture() {
                Architecture::DecOnly => (text + image) as f64,
                Architecture::CroAttn => text as f64,
            };
            Ok(ReferenceJob {
                tokens,
                service_ms: profile.prefill_latency(text, image, tp)?,
            })
        }
        StageKind::Preprocess => Ok(ReferenceJob {
            tokens: image as f64,
            service_ms: profile.preprocess_latency(tiles, profile.reference.cpu_cores)?,
        }),
        StageKind::Decode | StageKind::Transfer => Err(Error::Domain(format!(
            "no token-rate capacity model for {stage:?}"
        ))),
    }
}

/// Predicted latency of a deterministic server with `service_ms` per job at
/// `jobs_per_ms` arrivals; infinite at or beyond saturation.
pub fn predicted_latency_ms(service_ms: f64, jobs_per_ms: f64, wait_mult: f64) -> f64 {
    let rho = jobs_per_ms * service_ms;
    if rho >= 1.0 {
        return f64::INFINITY;
    }
    service_ms + wait_mult * rho * service_ms / (2.0 * (1.0 - rho))
}

/// Largest token rate (tokens/sec) whose predicted latency stays within
/// `slo_share_ms`. Returns zero and `feasible = false` when even an idle
/// instance misses the share.
pub fn max_capacity(
    profile: &LatencyProfile,
    stage: StageKind,
    tp: u32,
    slo_share_ms: f64,
    opts: &CapacityOptions,
) -> Result<Capacity> {
    if !(slo_share_ms > 0.0) {
        return Err(Error::Domain("slo_share must be > 0".into()));
    }
    let job = reference_job(profile, stage, tp)?;
    Ok(capacity_for_job(job, slo_share_ms, wait_multiplier(opts.wait_quantile)))
}

pub(crate) fn capacity_for_job(job: ReferenceJob, slo_share_ms: f64, wait_mult: f64) -> Capacity {
    let s = job.service_ms;
    if !(s > 0.0) || slo_share_ms < s {
        return Capacity {
            tokens_per_sec: 0.0,
            feasible: false,
        };
    }
    // S + m * rho * S / (2 (1 - rho)) <= L  <=>  rho <= 2a / (1 + 2a), a = (L/S - 1) / m
    let a = (slo_share_ms / s - 1.0) / wait_mult;
    let rho = 2.0 * a / (1.0 + 2.0 * a);
    Capacity {
        tokens_per_sec: rho / s * job.tokens * 1000.0,
        feasible: true,
    }
}
