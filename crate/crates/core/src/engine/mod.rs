//! Deterministic discrete-event simulation of a serving cluster.
//!
//! Each instance has three lanes that run independently: a CPU lane that
//! preprocesses images one item at a time on the instance's share of server
//! cores, a GPU lane that runs batches of encode or prefill items, and a
//! decode lane with continuous batching. Decode steps do not contend with
//! the GPU lane.
//!
//! Equal-time events are ordered by kind (instance ready, preprocess done,
//! GPU batch done, transfer done, KV transfer done, decode step, arrival,
//! autoscale tick), then request id, then insertion order.

mod events;
mod log;
mod shard;
mod sim;
mod transfer;

#[cfg(test)]
mod tests;

pub use log::{AllocationPoint, MetricsLog, RequestRecord, ScalingRecord, ShardRecord};
pub use shard::{encode_shard, Shard};
pub use sim::{InstanceInfo, InstanceState, Simulation};
pub use transfer::{transfer_tokens, TransferMedium, LOCAL_TRANSFER_MS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Request, SloSpec};
use crate::policies::{AutoscaleParams, InstanceKind, PolicySet};
use crate::profiles::LatencyProfile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub servers: u32,
    #[serde(default = "default_gpus")]
    pub gpus_per_server: u32,
    #[serde(default = "default_cores")]
    pub cpu_cores_per_server: u32,
}

fn default_gpus() -> u32 {
    8
}

fn default_cores() -> u32 {
    64
}

impl ClusterSpec {
    pub fn new(servers: u32) -> Self {
        ClusterSpec {
            servers,
            gpus_per_server: default_gpus(),
            cpu_cores_per_server: default_cores(),
        }
    }

    pub fn inventory(&self) -> u32 {
        self.servers * self.gpus_per_server
    }

    /// CPU cores an instance of `tp` GPUs gets for preprocessing.
    pub fn cores_for(&self, tp: u32) -> u32 {
        (self.cpu_cores_per_server * tp / self.gpus_per_server.max(1)).max(1)
    }
}

/// `count` instances of one kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: InstanceKind,
    pub count: u32,
    pub tp: u32,
    /// GPU-lane batch limit; derived from the SLO when absent.
    #[serde(default)]
    pub max_batch: Option<u32>,
    /// Decode batch limit; derived from the TBT objective when absent.
    #[serde(default)]
    pub decode_max_batch: Option<u32>,
}

impl PoolSpec {
    pub fn new(kind: InstanceKind, count: u32, tp: u32) -> Self {
        PoolSpec {
            kind,
            count,
            tp,
            max_batch: None,
            decode_max_batch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub cluster: ClusterSpec,
    pub pools: Vec<PoolSpec>,
    pub slo: SloSpec,
    /// Arrivals at or after the horizon are dropped.
    pub horizon_ms: f64,
    /// Extra time after the horizon to finish in-flight work.
    #[serde(default)]
    pub drain_ms: f64,
    #[serde(default)]
    pub transfer: TransferMedium,
    #[serde(default = "default_start_delay")]
    pub start_delay_ms: f64,
    #[serde(default = "default_autoscale_period")]
    pub autoscale_period_ms: f64,
    #[serde(default)]
    pub autoscale: AutoscaleParams,
    /// Wait after which SLO-priority scheduling serves an item in arrival
    /// order. Defaults to half the TTFT objective of the item's modality.
    #[serde(default)]
    pub aging_ms: Option<f64>,
    #[serde(default = "default_fanout")]
    pub max_fanout: u32,
    /// Check state invariants after every event.
    #[serde(default)]
    pub check_invariants: bool,
}

fn default_start_delay() -> f64 {
    60_000.0
}

fn default_autoscale_period() -> f64 {
    300_000.0
}

fn default_fanout() -> u32 {
    8
}

impl SimConfig {
    pub fn new(cluster: ClusterSpec, pools: Vec<PoolSpec>, slo: SloSpec, horizon_ms: f64) -> Self {
        SimConfig {
            cluster,
            pools,
            slo,
            horizon_ms,
            drain_ms: 0.0,
            transfer: TransferMedium::Rdma,
            start_delay_ms: default_start_delay(),
            autoscale_period_ms: default_autoscale_period(),
            autoscale: AutoscaleParams::default(),
            aging_ms: None,
            max_fanout: default_fanout(),
            check_invariants: false,
        }
    }

    pub fn validate(&self, policies: &PolicySet) -> Result<()> {
        self.slo.validate()?;
        policies.validate()?;
        let c = &self.cluster;
        if c.servers == 0 || c.gpus_per_server == 0 || c.cpu_cores_per_server == 0 {
            return Err(Error::Config("cluster: servers, gpus_per_server and cpu_cores_per_server must be > 0".into()));
        }
        if !(self.horizon_ms > 0.0 && self.horizon_ms.is_finite()) {
            return Err(Error::Config("horizon_ms must be a positive finite number".into()));
        }
        if !(self.drain_ms >= 0.0 && self.start_delay_ms >= 0.0 && self.autoscale_period_ms > 0.0) {
            return Err(Error::Config("drain_ms and start_delay_ms must be >= 0, autoscale_period_ms > 0".into()));
        }
        let topo = policies.topology;
        for p in &self.pools {
            if !topo.kinds().contains(&p.kind) {
                return Err(Error::Config(format!(
                    "pools: {} instances are not part of the {topo:?} topology",
                    p.kind.as_str()
                )));
            }
            if p.tp == 0 || p.tp > c.gpus_per_server {
                return Err(Error::Config(format!(
                    "pools: {} tp {} must be between 1 and gpus_per_server",
                    p.kind.as_str(),
                    p.tp
                )));
            }
            if p.max_batch == Some(0) || p.decode_max_batch == Some(0) {
                return Err(Error::Config("pools: batch limits must be > 0".into()));
            }
        }
        for &kind in topo.kinds() {
            let n = self.pools.iter().filter(|p| p.kind == kind).count();
            if n != 1 {
                return Err(Error::Config(format!(
                    "pools: {topo:?} needs exactly one {} pool, found {n}",
                    kind.as_str()
                )));
            }
            let p = self.pools.iter().find(|p| p.kind == kind).unwrap();
            if p.count == 0 {
                return Err(Error::Config(format!("pools: {} pool needs at least one instance", kind.as_str())));
            }
        }
        Ok(())
    }

    pub fn pool(&self, kind: InstanceKind) -> Option<&PoolSpec> {
        self.pools.iter().find(|p| p.kind == kind)
    }
}

/// Runs one simulation to the horizon (plus drain time) and returns its log.
pub fn run(
    config: &SimConfig,
    workload: impl IntoIterator<Item = Request>,
    policies: &PolicySet,
    profile: &LatencyProfile,
    seed: u64,
) -> Result<MetricsLog> {
    Simulation::new(config, policies, profile, seed)?.run(workload)
}
