//! Image-token hand-off latency over RDMA and TCP, and what it does to a
//! decoupled deployment end to end.

use std::path::Path;

use lmmsim::engine::TransferMedium;
use lmmsim::experiment::{Aggregate, Experiment};
use lmmsim::metrics::quantile::percentile;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lmmsim::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in [TransferMedium::Rdma, TransferMedium::Tcp] {
        let xs: Vec<f64> = (0..10_000).map(|_| m.sample_ms(&mut rng)).collect();
        println!(
            "{m:?}: p50 {:.1} ms, p99 {:.1} ms",
            percentile(&xs, 0.5).unwrap(),
            percentile(&xs, 0.99).unwrap()
        );
    }

    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let base = Experiment::load(&dir.join("decoupled.json"))?;
    for m in [TransferMedium::Rdma, TransferMedium::Tcp] {
        let mut c = base.config.clone();
        c.transfer = m;
        let e = Experiment::new(c, &dir)?;
        let sums: Vec<_> = e.run_all()?.iter().map(|(s, l)| e.summarize(*s, l)).collect();
        let a = Aggregate::of(&sums);
        println!("decoupled over {m:?}: mean ttft {:.0} ms, p99 {:.0} ms", a.ttft_mean_ms, a.ttft_p99_ms);
    }
    Ok(())
}
