//! Routing, scheduling, autoscaling, sizing and placement policies.
//!
//! Every policy is a pure function of a state snapshot; the engine owns all
//! mutable state and calls into this module from its event loop.

mod autoscale;
mod placement;
mod routing;
mod scheduling;
mod sizing;

pub use autoscale::{
    autoscale, initial_sizing, AutoscaleParams, LoadWindow, PoolCounts, ScaleGuard,
    ScalingDecision,
};
pub use placement::{place, place_incremental, PlacementOutcome, ServerSlots};
pub use routing::{least_loaded, route_image, route_text, PoolLoad, RouteCursor};
pub use scheduling::{priority_key, schedule_next, QueuedItem};
pub use sizing::{
    pool_capacities, select_max_batch, select_sharding, stage_slo_shares, PoolCapacity, ShardingChoice,
    StageShares, MAX_DECODE_BATCH,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InstanceKind {
    Image,
    Text,
    Prefill,
    Decode,
}

impl InstanceKind {
    pub const ALL: [InstanceKind; 4] = [
        InstanceKind::Image,
        InstanceKind::Text,
        InstanceKind::Prefill,
        InstanceKind::Decode,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InstanceKind::Image => "image",
            InstanceKind::Text => "text",
            InstanceKind::Prefill => "prefill",
            InstanceKind::Decode => "decode",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Router {
    #[default]
    RoundRobin,
    LeastPendingModalityAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Scheduler {
    #[default]
    #[serde(alias = "Fifo")]
    FIFO,
    SLOPriority,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Autoscaler {
    #[default]
    None,
    TokenAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Placement {
    Spread,
    #[default]
    ColocatePreferred,
}

/// How stages map onto instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Topology {
    /// Every stage of a request runs on one Text instance.
    Monolith,
    /// Image instances preprocess and encode; Text instances prefill and decode.
    #[default]
    Decoupled,
    /// Decoupled image pool; separate Prefill and Decode pools.
    DecoupledPD,
    /// Prefill instances also preprocess and encode; separate Decode pool.
    MonolithPD,
}

impl Topology {
    pub fn has_image_pool(self) -> bool {
        matches!(self, Topology::Decoupled | Topology::DecoupledPD)
    }

    pub fn is_pd(self) -> bool {
        matches!(self, Topology::DecoupledPD | Topology::MonolithPD)
    }

    /// Kind of instance that runs prefill.
    pub fn prefill_kind(self) -> InstanceKind {
        if self.is_pd() {
            InstanceKind::Prefill
        } else {
            InstanceKind::Text
        }
    }

    /// Kinds this topology deploys.
    pub fn kinds(self) -> &'static [InstanceKind] {
        match self {
            Topology::Monolith => &[InstanceKind::Text],
            Topology::Decoupled => &[InstanceKind::Image, InstanceKind::Text],
            Topology::DecoupledPD => &[InstanceKind::Image, InstanceKind::Prefill, InstanceKind::Decode],
            Topology::MonolithPD => &[InstanceKind::Prefill, InstanceKind::Decode],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PolicySet {
    #[serde(default)]
    pub router: Router,
    #[serde(default)]
    pub scheduler: Scheduler,
    #[serde(default)]
    pub autoscaler: Autoscaler,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub topology: Topology,
}

impl PolicySet {
    pub fn validate(&self) -> Result<()> {
        if !self.topology.has_image_pool() && self.router == Router::LeastPendingModalityAware {
            return Err(Error::Config(format!(
                "policies: {:?} topology colocates every stage, so router LeastPendingModalityAware does not apply",
                self.topology
            )));
        }
        Ok(())
    }

    pub fn monolith() -> Self {
        PolicySet {
            topology: Topology::Monolith,
            ..Default::default()
        }
    }

    /// Decoupled pools with FIFO scheduling and round-robin routing.
    pub fn decoupled() -> Self {
        PolicySet::default()
    }

    pub fn decoupled_sched() -> Self {
        PolicySet {
            scheduler: Scheduler::SLOPriority,
            ..Default::default()
        }
    }

    /// Decoupled pools with SLO-priority scheduling and modality-aware routing.
    pub fn full() -> Self {
        PolicySet {
            router: Router::LeastPendingModalityAware,
            scheduler: Scheduler::SLOPriority,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monolith_rejects_modality_aware_routing() {
        let p = PolicySet {
            router: Router::LeastPendingModalityAware,
            ..PolicySet::monolith()
        };
        assert!(p.validate().is_err());
        assert!(PolicySet::full().validate().is_ok());
        assert!(PolicySet::monolith().validate().is_ok());
    }

    #[test]
    fn policy_json_names() {
        let p: PolicySet = serde_json::from_str(
            r#"{"router":"LeastPendingModalityAware","scheduler":"SLOPriority","autoscaler":"TokenAware","placement":"Spread","topology":"DecoupledPD"}"#,
        )
        .unwrap();
        assert_eq!(p.topology, Topology::DecoupledPD);
        assert_eq!(p.scheduler, Scheduler::SLOPriority);
    }
}
