//! Discrete-event simulation of multimodal model serving clusters.
//!
//! Requests carrying text and images flow through preprocessing, image
//! encoding, prefill and decode on simulated GPU instances, either all on one
//! instance (monolithic) or split across separate image and text pools.
//!
//! Runnable examples live in `examples/`:
//!
//! ```bash
//! cargo run --example image_tokens
//! cargo run --example calibrate_profiles
//! cargo run --example mixed_modality
//! cargo run --example generate_workload
//! cargo run --example static_comparison -- llama3.2-11b 3.5
//! cargo run --example ablation
//! cargo run --example autoscaling
//! cargo run --example pd_disaggregation
//! cargo run --example capacity_search
//! cargo run --example transfer_media
//! cargo run --example instance_ratio_sweep
//! ```
//!
//! Several of them read the sample configs in `configs/`, which the
//! `lmmsim` binary accepts as well.

pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod policies;
pub mod profiles;
pub mod workload;

pub use error::{Error, Result};
