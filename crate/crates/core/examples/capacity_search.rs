//! Highest request rate meeting the P99 objectives, by bisection over a
//! load multiplier. Prints every probe.

use std::path::Path;

use lmmsim::experiment::{Experiment, SweepAxis};

fn main() -> lmmsim::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let config = std::env::args().nth(1).unwrap_or_else(|| "decoupled.json".into());
    let mut e = Experiment::load(&dir.join(config))?;
    // no bursts: capacity is measured on a steady stream
    e.config.workload.generator.as_mut().unwrap().burst_episodes.clear();
    e.config.horizon_ms = 300_000.0;

    for factor in ["5", "8"] {
        let r = e.with_axis(SweepAxis::SloFactor, factor)?.capacity()?;
        println!("slo x{factor}");
        for p in &r.probes {
            println!(
                "  {:>7.3} req/s  text {:>7.0}  image {:>8.0}  tbt {:>5.1}  {}",
                p.rate,
                p.ttft_p99_text_ms,
                p.ttft_p99_image_ms,
                p.tbt_p99_ms,
                if p.pass { "pass" } else { "miss" }
            );
        }
        println!("  max rate {:.2} req/s", r.rate);
    }
    Ok(())
}
