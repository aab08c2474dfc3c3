//! One simulated day with token-aware autoscaling, decoupled and monolithic,
//! reporting GPU-seconds, attainment and the hourly pool sizes.

use std::path::Path;

use lmmsim::engine::PoolSpec;
use lmmsim::experiment::Experiment;
use lmmsim::metrics::series;
use lmmsim::policies::{InstanceKind, Topology};

fn main() -> lmmsim::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let dec = Experiment::load(&dir.join("autoscale_day.json"))?;
    let mut config = dec.config.clone();
    config.policies.topology = Topology::Monolith;
    config.policies.router = Default::default();
    config.pools = vec![PoolSpec::new(InstanceKind::Text, 4, 4)];
    let mono = Experiment::new(config, &dir)?;

    let mut cost = Vec::new();
    for (name, e) in [("decoupled", &dec), ("monolith", &mono)] {
        let log = e.run_seed(1, 1.0)?;
        let s = e.summarize(1, &log);
        println!(
            "{name}: {} requests, {:.0} GPU-s, attainment {:.4}, peak {} GPUs, {} scaling events",
            s.arrived, s.gpu_seconds, s.attainment, s.peak_gpus, s.scaling_events
        );
        println!("  hour  reqs  attain  gpus  image  text");
        for row in series(&log, &e.slo, 3_600_000.0).iter().step_by(2) {
            println!(
                "  {:>4} {:>5} {:>7.3} {:>5.1} {:>6} {:>5}",
                (row.window_start_s / 3600.0) as u32,
                row.requests,
                row.attainment,
                row.avg_gpus,
                row.image_instances,
                row.text_instances
            );
        }
        cost.push(s.gpu_seconds);
    }
    println!("decoupled saves {:.1}% GPU-seconds", 100.0 * (1.0 - cost[0] / cost[1]));
    Ok(())
}
