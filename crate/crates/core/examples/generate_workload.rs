//! Generates a bursty synthetic workload, prints its summary, writes it as a
//! trace CSV and loads it back.

use lmmsim::model::ModelSpec;
use lmmsim::workload::{generate, load_trace, summarize, write_trace, BurstEpisode, GeneratorConfig};

fn main() -> lmmsim::Result<()> {
    let model = ModelSpec::preset("internvl-26b").unwrap();
    let horizon = 3_600_000.0;
    let cfg = GeneratorConfig {
        base_rate: 3.0,
        burst_episodes: vec![BurstEpisode {
            start_ms: 1_200_000.0,
            duration_ms: 600_000.0,
            rate_multiplier: 3.0,
            image_multiplier: 2.0,
            image_only: true,
        }],
        seed: 42,
        ..Default::default()
    };
    let requests: Vec<_> = generate(&cfg, &model, horizon)?.collect();
    let s = summarize(&requests);
    println!("{} requests, {} with images over {:.0} s", s.requests, s.image_requests, s.span_s);
    println!("prompt tokens {:?}", s.prompt_tokens);
    println!("images/request {:?}", s.images_per_image_request);
    println!("image qps mean {:.2}, median window {:.2}, peak window {:.2}", s.image_qps, s.median_image_qps, s.peak_image_qps);

    let dir = std::env::temp_dir().join("lmmsim-trace");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("bursty.csv");
    write_trace(&path, &requests)?;
    let back = load_trace(&path, &model)?;
    println!("wrote {} and read back {} requests", path.display(), back.requests.len());
    Ok(())
}
