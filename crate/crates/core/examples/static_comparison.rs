//! Monolithic vs decoupled deployment of the same 32 GPUs under one bursty
//! workload. Pass a model name and a request rate to change the defaults:
//!
//! ```text
//! cargo run --example static_comparison -- llama3.2-11b 3.5
//! ```

use std::path::Path;

use lmmsim::experiment::{Aggregate, Experiment, ExperimentConfig, ModelSource};

fn load(name: &str, model: &str, rate: f64) -> lmmsim::Result<Experiment> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let path = dir.join(name);
    let mut c: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    c.model = ModelSource::Preset(model.into());
    c.workload.generator.as_mut().unwrap().base_rate = rate;
    Experiment::new(c, &dir)
}

fn aggregate(e: &Experiment) -> lmmsim::Result<Aggregate> {
    let runs = e.run_all()?;
    let sums: Vec<_> = runs.iter().map(|(s, l)| e.summarize(*s, l)).collect();
    Ok(Aggregate::of(&sums))
}

fn main() -> lmmsim::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = args.next().unwrap_or_else(|| "llama3.2-11b".into());
    let rate: f64 = args.next().map(|s| s.parse().expect("rate")).unwrap_or(3.5);

    let mono = aggregate(&load("monolith.json", &model, rate)?)?;
    let dec = aggregate(&load("decoupled.json", &model, rate)?)?;
    println!("{model} at {rate} req/s, 3 seeds");
    for (name, a) in [("monolith", &mono), ("decoupled", &dec)] {
        println!(
            "  {name:<10} mean {:>7.0} ms  p99 {:>7.0} ms (text {:>6.0}, image {:>7.0})  attainment {:.3}",
            a.ttft_mean_ms, a.ttft_p99_ms, a.ttft_p99_text_ms, a.ttft_p99_image_ms, a.attainment
        );
    }
    println!(
        "  decoupled change: mean {:+.0}%, p99 {:+.0}%",
        100.0 * (dec.ttft_mean_ms / mono.ttft_mean_ms - 1.0),
        100.0 * (dec.ttft_p99_ms / mono.ttft_p99_ms - 1.0)
    );
    Ok(())
}
