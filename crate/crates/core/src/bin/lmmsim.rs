use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lmmsim::experiment::{calibrate_profile, exit_code, write_sweep_csv, Experiment, SweepAxis};
use lmmsim::metrics::write_summary_json;
use lmmsim::Result;

#[derive(Parser)]
#[command(name = "lmmsim", version, about = "Multimodal serving cluster simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; override the config's `seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every seed and write per-seed logs plus summary.json.
    Simulate(Common),
    /// Search the highest arrival rate that meets the latency objectives.
    Capacity(Common),
    /// One run per value of a config field; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Fit a latency profile and write profiles/<model>.json.
    Calibrate {
        #[arg(long)]
        model: String,
        /// Targets JSON; the model's shipped targets when absent.
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn load(c: &Common) -> Result<(Experiment, PathBuf)> {
    let mut e = Experiment::load(&c.config)?;
    if let Some(s) = &c.seeds {
        e.config.seeds = s.clone();
    }
    let out = c
        .out
        .clone()
        .or_else(|| e.config.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((e, out))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Simulate(c) => {
            let (e, out) = load(&c)?;
            let r = e.simulate(&out)?;
            let a = &r.aggregate;
            println!(
                "seeds={} completed={}/{} ttft_mean={:.1}ms ttft_p99={:.1}ms attainment={:.4} gpu_s={:.0}",
                a.seeds, a.completed, a.arrived, a.ttft_mean_ms, a.ttft_p99_ms, a.attainment, a.gpu_seconds
            );
            println!("wrote {}", out.join("summary.json").display());
        }
        Cmd::Capacity(c) => {
            let (e, out) = load(&c)?;
            let r = e.capacity()?;
            for p in &r.probes {
                println!(
                    "probe x{:.4} rate={:.3}/s ttft_p99 text={:.1} image={:.1} tbt_p99={:.1} {}",
                    p.multiplier,
                    p.rate,
                    p.ttft_p99_text_ms,
                    p.ttft_p99_image_ms,
                    p.tbt_p99_ms,
                    if p.pass { "pass" } else { "fail" }
                );
            }
            if !r.feasible {
                eprintln!("warning: objectives missed even at the lowest probed load");
            }
            if r.capped {
                eprintln!("warning: highest probed load still passed; rate is a lower bound");
            }
            println!("rate={:.4} req/s", r.rate);
            std::fs::create_dir_all(&out)?;
            write_summary_json(&out.join("capacity.json"), &r)?;
        }
        Cmd::Sweep { common, axis, values } => {
            let axis = SweepAxis::parse(&axis)?;
            let (e, out) = load(&common)?;
            let rows = e.sweep(axis, &values)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("sweep.csv");
            write_sweep_csv(&path, &rows)?;
            for r in &rows {
                println!(
                    "{}={} ttft_mean={:.1}ms ttft_p99={:.1}ms attainment={:.4}",
                    r.axis, r.value, r.result.ttft_mean_ms, r.result.ttft_p99_ms, r.result.attainment
                );
            }
            println!("wrote {}", path.display());
        }
        Cmd::Calibrate { model, targets, out, force } => {
            let r = calibrate_profile(targets.as_deref(), &model, &out, force)?;
            let verb = if r.reused { "reused cached" } else { "wrote" };
            println!("{verb} {}", r.path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

