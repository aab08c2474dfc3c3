//! Prefill/decode disaggregation with and without separate image encoders,
//! using the same decode pool.

use std::path::Path;

use lmmsim::engine::PoolSpec;
use lmmsim::experiment::{Aggregate, Experiment};
use lmmsim::policies::{InstanceKind, PolicySet, Topology};

fn main() -> lmmsim::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let dec = Experiment::load(&dir.join("decoupled_pd.json"))?;
    let mut config = dec.config.clone();
    config.policies = PolicySet { topology: Topology::MonolithPD, ..PolicySet::monolith() };
    config.pools = vec![PoolSpec::new(InstanceKind::Prefill, 6, 4), PoolSpec::new(InstanceKind::Decode, 2, 4)];
    let mono = Experiment::new(config, &dir)?;

    for (name, e) in [("prefill/decode", &mono), ("image/prefill/decode", &dec)] {
        let sums: Vec<_> = e.run_all()?.iter().map(|(s, l)| e.summarize(*s, l)).collect();
        let a = Aggregate::of(&sums);
        println!(
            "{name:<22} mean ttft {:>6.0} ms  p99 {:>7.0} ms  p99 tbt {:>5.1} ms",
            a.ttft_mean_ms, a.ttft_p99_ms, a.tbt_p99_ms
        );
    }
    Ok(())
}
