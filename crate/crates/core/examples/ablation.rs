//! Adds the pieces of the decoupled design one at a time: separate pools,
//! then SLO-aware scheduling, then modality-aware routing.

use std::path::Path;

use lmmsim::experiment::{Aggregate, Experiment};
use lmmsim::policies::{PolicySet, Router, Scheduler, Topology};

fn main() -> lmmsim::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let model = std::env::args().nth(1).unwrap_or_else(|| "llama3.2-11b".into());
    let mono = Experiment::load(&dir.join("monolith.json"))?;
    let dec = Experiment::load(&dir.join("decoupled.json"))?;

    let steps = [
        ("monolith", &mono, PolicySet::monolith()),
        ("decoupled", &dec, PolicySet { topology: Topology::Decoupled, ..PolicySet::monolith() }),
        ("+sched", &dec, PolicySet { scheduler: Scheduler::SLOPriority, ..PolicySet::decoupled() }),
        ("+routing", &dec, PolicySet { scheduler: Scheduler::SLOPriority, router: Router::LeastPendingModalityAware, ..PolicySet::decoupled() }),
    ];
    let mut prev: Option<f64> = None;
    for (name, base, policies) in steps {
        let mut config = base.config.clone();
        config.policies = policies;
        config.model = lmmsim::experiment::ModelSource::Preset(model.clone());
        let e = Experiment::new(config, &dir)?;
        let sums: Vec<_> = e.run_all()?.iter().map(|(s, l)| e.summarize(*s, l)).collect();
        let a = Aggregate::of(&sums);
        let delta = prev.map(|p| format!("{:+.0}%", 100.0 * (a.ttft_p99_ms / p - 1.0))).unwrap_or_default();
        println!("{name:<10} p99 ttft {:>8.0} ms {delta:>6}   mean {:>6.0} ms", a.ttft_p99_ms, a.ttft_mean_ms);
        prev = Some(a.ttft_p99_ms);
    }
    Ok(())
}
