//! Image:text instance ratios crossed with the share of requests that carry
//! images. Writes one CSV per image share.

use std::path::Path;

use lmmsim::experiment::{write_sweep_csv, Experiment, SweepAxis};

fn main() -> lmmsim::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let base = Experiment::load(&dir.join("decoupled.json"))?;
    // 32 GPUs: Image instances take 1 GPU each, Text instances 4
    let ratios: Vec<String> = ["4:7", "8:6", "12:5", "16:4", "20:3"].iter().map(|s| s.to_string()).collect();
    let out = std::env::temp_dir().join("lmmsim-ratio");
    std::fs::create_dir_all(&out)?;

    print!("{:>8}", "images");
    for r in &ratios {
        print!("{r:>10}");
    }
    println!("   (p99 ttft, s)");
    for frac in ["0.1", "0.3", "0.5", "0.7", "0.9"] {
        let e = base.with_axis(SweepAxis::ImageFraction, frac)?;
        let rows = e.sweep(SweepAxis::InstanceRatio, &ratios)?;
        print!("{frac:>8}");
        for r in &rows {
            print!("{:>10.1}", r.result.ttft_p99_ms / 1000.0);
        }
        println!();
        write_sweep_csv(&out.join(format!("images-{frac}.csv")), &rows)?;
    }
    println!("csv files in {}", out.display());
    Ok(())
}
