//! Reproducible experiments driven by a JSON config file.
//!
//! Relative paths inside a config resolve against the config's directory,
//! so a config plus the files it names is everything a run depends on.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{self, ClusterSpec, MetricsLog, PoolSpec, SimConfig, TransferMedium};
use crate::error::{Error, Result};
use crate::metrics::{
    max_throughput, series, write_series_csv, write_summary_json, RunSummary, SummaryOptions, ThroughputOptions,
    ThroughputResult,
};
use crate::model::{ModelSpec, Request, SloSpec};
use crate::policies::{AutoscaleParams, InstanceKind, PolicySet};
use crate::profiles::{calibrate, preset_targets, CalibrationTargets, LatencyProfile};
use crate::workload::{generate, load_trace, GeneratorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Preset(String),
    File { path: PathBuf },
}

/// Objectives given outright, or scaled from isolated runs of the profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SloConfig {
    Explicit(SloSpec),
    Baseline {
        slo_factor: f64,
        /// TP of the monolithic reference instance; the profile's reference TP by default.
        #[serde(default)]
        tp: Option<u32>,
        /// Cores for isolated preprocessing; the profile's reference cores by default.
        #[serde(default)]
        cpu_cores: Option<u32>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    /// Multiplies the arrival rate. Traces are replayed time-compressed.
    #[serde(default = "one")]
    pub load_scale: f64,
}

fn one() -> f64 {
    1.0
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_window() -> f64 {
    60_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    /// Profile JSON; preset models are calibrated from their shipped targets when absent.
    #[serde(default)]
    pub profile: Option<PathBuf>,
    #[serde(default)]
    pub policies: PolicySet,
    pub cluster: ClusterSpec,
    pub pools: Vec<PoolSpec>,
    pub workload: WorkloadConfig,
    pub slo: SloConfig,
    pub horizon_ms: f64,
    #[serde(default)]
    pub drain_ms: f64,
    #[serde(default)]
    pub transfer: TransferMedium,
    #[serde(default)]
    pub start_delay_ms: Option<f64>,
    #[serde(default)]
    pub autoscale_period_ms: Option<f64>,
    #[serde(default)]
    pub autoscale: AutoscaleParams,
    #[serde(default)]
    pub aging_ms: Option<f64>,
    #[serde(default)]
    pub max_fanout: Option<u32>,
    #[serde(default)]
    pub check_invariants: bool,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Width of the attainment and cost windows.
    #[serde(default = "default_window")]
    pub window_ms: f64,
    #[serde(default)]
    pub summary: SummaryOptions,
    #[serde(default)]
    pub capacity: ThroughputOptions,
}

/// A loaded, validated experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: ModelSpec,
    pub profile: LatencyProfile,
    pub slo: SloSpec,
    trace: Option<Vec<Request>>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn require(field: &str, path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingFile {
            field: field.into(),
            path,
        })
    }
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(require("--config", path.to_path_buf())?)?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Experiment::new(config, base)
    }

    /// Builds an experiment; relative paths resolve against `base`.
    pub fn new(mut config: ExperimentConfig, base: &Path) -> Result<Self> {
        let model = match &config.model {
            ModelSource::Preset(name) => {
                ModelSpec::preset(name).ok_or_else(|| Error::Config(format!("model: unknown preset `{name}`")))?
            }
            ModelSource::File { path } => {
                let path = require("model.path", resolve(base, path))?;
                ModelSpec::load_all(&path)?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Config("model.path: file holds no model".into()))?
            }
        };
        let profile = match &config.profile {
            Some(p) => {
                let path = require("profile", resolve(base, p))?;
                config.profile = Some(path.clone());
                LatencyProfile::load(&path)?
            }
            None => {
                let targets = preset_targets(&model.name).ok_or_else(|| {
                    Error::Config(format!("profile: required for non-preset model `{}`", model.name))
                })?;
                calibrate(&targets)?
            }
        };
        if profile.model.name != model.name {
            return Err(Error::Config(format!(
                "profile: built for `{}`, config model is `{}`",
                profile.model.name, model.name
            )));
        }

        let w = &mut config.workload;
        let trace = match (&w.trace, &w.generator) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config("workload: set exactly one of `trace` and `generator`".into()));
            }
            (Some(t), None) => {
                let path = require("workload.trace", resolve(base, t))?;
                w.trace = Some(path.clone());
                Some(load_trace(&path, &model)?.requests)
            }
            (None, Some(g)) => {
                g.validate()?;
                None
            }
        };
        if !(w.load_scale > 0.0 && w.load_scale.is_finite()) {
            return Err(Error::Config("workload.load_scale must be > 0".into()));
        }

        let slo = match config.slo {
            SloConfig::Explicit(s) => s,
            SloConfig::Baseline { slo_factor, tp, cpu_cores } => profile.baseline_slo(
                tp.unwrap_or(profile.reference.tp),
                cpu_cores.unwrap_or(profile.reference.cpu_cores),
                slo_factor,
            )?,
        };
        if config.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        if !(config.window_ms > 0.0) {
            return Err(Error::Config("window_ms must be > 0".into()));
        }
        let exp = Experiment {
            config,
            model,
            profile,
            slo,
            trace,
        };
        exp.sim_config().validate(&exp.config.policies)?;
        Ok(exp)
    }

    pub fn sim_config(&self) -> SimConfig {
        let c = &self.config;
        let mut s = SimConfig::new(c.cluster, c.pools.clone(), self.slo, c.horizon_ms);
        s.drain_ms = c.drain_ms;
        s.transfer = c.transfer;
        s.start_delay_ms = c.start_delay_ms.unwrap_or(s.start_delay_ms);
        s.autoscale_period_ms = c.autoscale_period_ms.unwrap_or(s.autoscale_period_ms);
        s.autoscale = c.autoscale;
        s.aging_ms = c.aging_ms;
        s.max_fanout = c.max_fanout.unwrap_or(s.max_fanout);
        s.check_invariants = c.check_invariants;
        s
    }

    /// Requests for one seed with the arrival rate scaled by `scale` on top
    /// of the configured load scale.
    pub fn workload(&self, seed: u64, scale: f64) -> Result<Vec<Request>> {
        let scale = scale * self.config.workload.load_scale;
        let horizon = self.config.horizon_ms;
        match (&self.trace, &self.config.workload.generator) {
            (Some(reqs), _) => Ok(reqs
                .iter()
                .map(|r| Request {
                    arrival_ms: r.arrival_ms / scale,
                    ..r.clone()
                })
                .take_while(|r| r.arrival_ms < horizon)
                .collect()),
            (None, Some(g)) => {
                let g = GeneratorConfig {
                    base_rate: g.base_rate * scale,
                    seed,
                    ..g.clone()
                };
                Ok(generate(&g, &self.model, horizon)?.collect())
            }
            (None, None) => unreachable!("validated at load"),
        }
    }

    pub fn run_seed(&self, seed: u64, scale: f64) -> Result<MetricsLog> {
        let w = self.workload(seed, scale)?;
        engine::run(&self.sim_config(), w, &self.config.policies, &self.profile, seed)
    }

    pub fn seeds(&self) -> &[u64] {
        &self.config.seeds
    }

    /// Runs every seed in parallel.
    pub fn run_all(&self) -> Result<Vec<(u64, MetricsLog)>> {
        self.config
            .seeds
            .par_iter()
            .map(|&s| self.run_seed(s, 1.0).map(|log| (s, log)))
            .collect()
    }

    pub fn summarize(&self, seed: u64, log: &MetricsLog) -> RunSummary {
        RunSummary::new(seed, log, &self.slo, &self.config.summary, self.config.window_ms)
    }

    /// Runs every seed and writes per-seed logs plus `summary.json` under `out`.
    pub fn simulate(&self, out: &Path) -> Result<SimulateReport> {
        let runs = self.run_all()?;
        fs::create_dir_all(out)?;
        let mut summaries = Vec::new();
        for (seed, log) in &runs {
            let dir = out.join(format!("seed-{seed}"));
            fs::create_dir_all(&dir)?;
            let mut f = std::io::BufWriter::new(fs::File::create(dir.join("requests.csv"))?);
            log.write_requests_csv(&mut f)?;
            write_series_csv(&dir.join("series.csv"), &series(log, &self.slo, self.config.window_ms))?;
            let s = self.summarize(*seed, log);
            write_summary_json(&dir.join("summary.json"), &s)?;
            summaries.push(s);
        }
        let report = SimulateReport {
            slo: self.slo,
            aggregate: Aggregate::of(&summaries),
            runs: summaries,
        };
        write_summary_json(&out.join("summary.json"), &report)?;
        Ok(report)
    }

    /// Mean arrival rate of the configured workload, requests/sec, over the
    /// first seed.
    pub fn base_rate(&self) -> Result<f64> {
        let n = self.workload(self.config.seeds[0], 1.0)?.len();
        Ok(n as f64 / (self.config.horizon_ms / 1000.0))
    }

    /// Highest arrival rate meeting the objectives at the configured percentile.
    pub fn capacity(&self) -> Result<ThroughputResult> {
        let base = self.base_rate()?;
        if base == 0.0 {
            return Err(Error::Config("workload: no arrivals within the horizon".into()));
        }
        let seeds = if self.config.seeds.len() >= 3 {
            self.config.seeds.clone()
        } else {
            default_seeds()
        };
        let mut opts = self.config.capacity;
        opts.summary = self.config.summary;
        max_throughput(base, &seeds, &self.slo, &opts, |m, s| self.run_seed(s, m))
    }

    /// Copy of this experiment with one sweep axis set to `value`.
    pub fn with_axis(&self, axis: SweepAxis, value: &str) -> Result<Experiment> {
        let bad = || Error::Config(format!("sweep: `{value}` is not a valid {} value", axis.as_str()));
        let num = || value.trim().parse::<f64>().map_err(|_| bad());
        let mut e = self.clone();
        match axis {
            SweepAxis::InstanceRatio => {
                let (i, t) = value.split_once(':').ok_or_else(bad)?;
                let i: u32 = i.trim().parse().map_err(|_| bad())?;
                let t: u32 = t.trim().parse().map_err(|_| bad())?;
                let text_kind = e.config.policies.topology.prefill_kind();
                for p in &mut e.config.pools {
                    if p.kind == InstanceKind::Image {
                        p.count = i;
                    } else if p.kind == text_kind {
                        p.count = t;
                    }
                }
                if !e.config.policies.topology.has_image_pool() {
                    return Err(Error::Config("sweep: instance_ratio needs a topology with an image pool".into()));
                }
            }
            SweepAxis::ImageFraction => {
                let f = num()?;
                let g = e.config.workload.generator.as_mut().ok_or_else(|| {
                    Error::Config("sweep: image_fraction needs a generator workload".into())
                })?;
                g.image_request_fraction = f;
                g.validate()?;
            }
            SweepAxis::SloFactor => {
                e.slo = e.slo.with_factor(num()?);
                e.slo.validate()?;
            }
            SweepAxis::LoadScale => {
                let s = num()?;
                if !(s > 0.0) {
                    return Err(bad());
                }
                e.config.workload.load_scale = s;
            }
            SweepAxis::Servers => {
                e.config.cluster.servers = value.trim().parse().map_err(|_| bad())?;
            }
        }
        e.sim_config().validate(&e.config.policies)?;
        Ok(e)
    }

    /// One row per value, all seeds of all values run in parallel.
    pub fn sweep(&self, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepRow>> {
        let exps = values
            .iter()
            .map(|v| self.with_axis(axis, v))
            .collect::<Result<Vec<_>>>()?;
        exps.par_iter()
            .zip(values)
            .map(|(e, v)| {
                let runs = e.run_all()?;
                let sums: Vec<RunSummary> = runs.iter().map(|(s, l)| e.summarize(*s, l)).collect();
                Ok(SweepRow::new(axis, v, &Aggregate::of(&sums)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    InstanceRatio,
    ImageFraction,
    SloFactor,
    LoadScale,
    Servers,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::InstanceRatio,
        SweepAxis::ImageFraction,
        SweepAxis::SloFactor,
        SweepAxis::LoadScale,
        SweepAxis::Servers,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::InstanceRatio => "instance_ratio",
            SweepAxis::ImageFraction => "image_fraction",
            SweepAxis::SloFactor => "slo_factor",
            SweepAxis::LoadScale => "load_scale",
            SweepAxis::Servers => "servers",
        }
    }

    pub fn parse(s: &str) -> Result<SweepAxis> {
        SweepAxis::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = SweepAxis::ALL.iter().map(|a| a.as_str()).collect();
            Error::Config(format!("sweep: unknown axis `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Seed-level results folded into one row: means of means, worst tails.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: usize,
    pub arrived: usize,
    pub completed: usize,
    pub in_flight: usize,
    pub ttft_mean_ms: f64,
    pub ttft_p99_ms: f64,
    pub ttft_p99_text_ms: f64,
    pub ttft_p99_image_ms: f64,
    pub tbt_p99_ms: f64,
    pub attainment: f64,
    pub min_attainment: f64,
    pub gpu_seconds: f64,
}

impl Aggregate {
    pub fn of(runs: &[RunSummary]) -> Aggregate {
        let n = runs.len().max(1) as f64;
        let worst = |f: &dyn Fn(&RunSummary) -> Option<f64>| runs.iter().filter_map(f).fold(0.0, f64::max);
        Aggregate {
            seeds: runs.len(),
            arrived: runs.iter().map(|r| r.arrived).sum(),
            completed: runs.iter().map(|r| r.completed).sum(),
            in_flight: runs.iter().map(|r| r.in_flight).sum(),
            ttft_mean_ms: runs
                .iter()
                .filter_map(|r| r.latency.ttft.all.map(|p| p.mean))
                .sum::<f64>()
                / n,
            ttft_p99_ms: worst(&|r| r.latency.ttft.all.map(|p| p.p99)),
            ttft_p99_text_ms: worst(&|r| r.latency.ttft.text_only.map(|p| p.p99)),
            ttft_p99_image_ms: worst(&|r| r.latency.ttft.image_text.map(|p| p.p99)),
            tbt_p99_ms: worst(&|r| r.latency.tbt.all.map(|p| p.p99)),
            attainment: runs.iter().map(|r| r.attainment).sum::<f64>() / n,
            min_attainment: runs.iter().map(|r| r.attainment).fold(1.0, f64::min),
            gpu_seconds: runs.iter().map(|r| r.gpu_seconds).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub slo: SloSpec,
    pub aggregate: Aggregate,
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    #[serde(flatten)]
    pub result: Aggregate,
}

impl SweepRow {
    fn new(axis: SweepAxis, value: &str, result: &Aggregate) -> Self {
        SweepRow {
            axis: axis.as_str().into(),
            value: value.into(),
            result: result.clone(),
        }
    }
}

/// Column names of an `Aggregate` as the csv crate writes them.
fn aggregate_header() -> Result<Vec<String>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(Aggregate::default())?;
    let buf = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let mut r = csv::Reader::from_reader(buf.as_slice());
    Ok(r.headers()?.iter().map(String::from).collect())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    // the csv crate cannot serialize flattened structs, so rows go out as tuples
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    let mut header = vec!["axis".to_string(), "value".to_string()];
    header.extend(aggregate_header()?);
    w.write_record(&header)?;
    for r in rows {
        w.serialize((&r.axis, &r.value, &r.result))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrateOutcome {
    pub path: PathBuf,
    pub reused: bool,
    pub profile: LatencyProfile,
}

/// Calibrates `model` from `targets` (the preset's shipped targets when
/// absent) and writes `<out>/profiles/<model>.json`. An existing file is
/// reused unless `force` is set.
pub fn calibrate_profile(targets: Option<&Path>, model: &str, out: &Path, force: bool) -> Result<CalibrateOutcome> {
    let path = out.join("profiles").join(format!("{model}.json"));
    if path.exists() && !force {
        let profile = LatencyProfile::load(&path)?;
        if profile.model.name == model {
            return Ok(CalibrateOutcome {
                path,
                reused: true,
                profile,
            });
        }
    }
    let targets: CalibrationTargets = match targets {
        Some(t) => {
            let t = require("--targets", t.to_path_buf())?;
            serde_json::from_str(&fs::read_to_string(&t)?)
                .map_err(|e| Error::Config(format!("{}: {e}", t.display())))?
        }
        None => preset_targets(model)
            .ok_or_else(|| Error::Config(format!("--model: no shipped targets for `{model}`; pass --targets")))?,
    };
    if targets.model.name() != model {
        return Err(Error::Config(format!(
            "--model: targets are for `{}`, not `{model}`",
            targets.model.name()
        )));
    }
    let profile = calibrate(&targets)?;
    profile.save(&path)?;
    let back = LatencyProfile::load(&path)?;
    if back != profile {
        return Err(Error::Calibration(format!("{} does not round-trip", path.display())));
    }
    Ok(CalibrateOutcome {
        path,
        reused: false,
        profile,
    })
}

/// Exit status for an error: 2 when the inputs are at fault, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::MissingFile { .. }
        | Error::UnsupportedTp { .. }
        | Error::Calibration(_)
        | Error::Trace { .. }
        | Error::Json(_) => 2,
        _ => 1,
    }
}
