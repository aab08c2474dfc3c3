use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::MetricsLog;
use crate::error::{Error, Result};
use crate::model::{Modality, SloSpec};

use super::latency::SummaryOptions;
use super::quantile::percentile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputOptions {
    /// Stop when the bracket is narrower than this share of its upper end.
    pub tolerance: f64,
    pub start_multiplier: f64,
    pub min_multiplier: f64,
    pub max_multiplier: f64,
    pub summary: SummaryOptions,
}

impl Default for ThroughputOptions {
    fn default() -> Self {
        ThroughputOptions {
            tolerance: 0.02,
            start_multiplier: 1.0,
            min_multiplier: 1.0 / 64.0,
            max_multiplier: 256.0,
            summary: SummaryOptions::default(),
        }
    }
}

/// One load level tried by the search, with the worst P99s across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub multiplier: f64,
    pub rate: f64,
    pub ttft_p99_text_ms: f64,
    pub ttft_p99_image_ms: f64,
    pub tbt_p99_ms: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputResult {
    /// Highest passing arrival rate, requests/sec; zero when infeasible.
    pub rate: f64,
    pub multiplier: f64,
    /// False when even the smallest multiplier misses the objectives.
    pub feasible: bool,
    /// True when the largest multiplier still passed, so the rate is a lower bound.
    pub capped: bool,
    pub probes: Vec<Probe>,
}

/// Steady-state P99 of text-only TTFT, image-text TTFT and per-request mean
/// TBT, at the objective's percentile. Requests that never finished count as
/// infinitely late; a class with no requests reports zero.
pub fn steady_state_p99(log: &MetricsLog, slo: &SloSpec, opts: &SummaryOptions) -> (f64, f64, f64) {
    let q = slo.percentile;
    let steady: Vec<_> = log.requests.iter().filter(|r| opts.steady(log, r)).collect();
    let ttft = |m: Modality| {
        let v: Vec<f64> = steady
            .iter()
            .filter(|r| r.modality == m)
            .map(|r| if r.completed() { r.ttft_ms().unwrap() } else { f64::INFINITY })
            .collect();
        percentile(&v, q).unwrap_or(0.0)
    };
    let tbt: Vec<f64> = steady
        .iter()
        .filter_map(|r| if r.completed() { r.tbt_mean_ms() } else { Some(f64::INFINITY) })
        .collect();
    (
        ttft(Modality::TextOnly),
        ttft(Modality::ImageText),
        percentile(&tbt, q).unwrap_or(0.0),
    )
}

/// Largest arrival-rate multiplier whose steady-state P99 TTFT and TBT meet
/// the objectives on every seed. Doubles or halves from the start
/// multiplier to bracket the answer, then bisects to `tolerance`.
///
/// `probe(multiplier, seed)` runs one simulation at `multiplier` times
/// `base_rate`.
pub fn max_throughput<F>(
    base_rate: f64,
    seeds: &[u64],
    slo: &SloSpec,
    opts: &ThroughputOptions,
    probe: F,
) -> Result<ThroughputResult>
where
    F: Fn(f64, u64) -> Result<MetricsLog> + Sync,
{
    if seeds.len() < 3 {
        return Err(Error::Config(format!("max_throughput needs at least 3 seeds, got {}", seeds.len())));
    }
    if !(opts.tolerance > 0.0 && opts.min_multiplier > 0.0 && opts.min_multiplier <= opts.start_multiplier)
        || opts.start_multiplier > opts.max_multiplier
    {
        return Err(Error::Config(
            "max_throughput: need tolerance > 0 and 0 < min <= start <= max multiplier".into(),
        ));
    }
    let mut probes = Vec::new();
    let mut check = |m: f64| -> Result<bool> {
        let worst = seeds
            .par_iter()
            .map(|&s| probe(m, s).map(|log| steady_state_p99(&log, slo, &opts.summary)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold((0.0f64, 0.0f64, 0.0f64), |a, b| (a.0.max(b.0), a.1.max(b.1), a.2.max(b.2)));
        let pass = worst.0 <= slo.ttft_slo_ms(Modality::TextOnly)
            && worst.1 <= slo.ttft_slo_ms(Modality::ImageText)
            && worst.2 <= slo.tbt_slo_ms();
        probes.push(Probe {
            multiplier: m,
            rate: m * base_rate,
            ttft_p99_text_ms: worst.0,
            ttft_p99_image_ms: worst.1,
            tbt_p99_ms: worst.2,
            pass,
        });
        Ok(pass)
    };

    let mut m = opts.start_multiplier;
    let (mut lo, mut hi);
    if check(m)? {
        lo = m;
        loop {
            m *= 2.0;
            if m > opts.max_multiplier {
                return Ok(ThroughputResult {
                    rate: lo * base_rate,
                    multiplier: lo,
                    feasible: true,
                    capped: true,
                    probes,
                });
            }
            if check(m)? {
                lo = m;
            } else {
                hi = m;
                break;
            }
        }
    } else {
        hi = m;
        loop {
            m /= 2.0;
            if m < opts.min_multiplier {
                return Ok(ThroughputResult {
                    rate: 0.0,
                    multiplier: 0.0,
                    feasible: false,
                    capped: false,
                    probes,
                });
            }
            if check(m)? {
                lo = m;
                break;
            }
            hi = m;
        }
    }
    while (hi - lo) / hi > opts.tolerance {
        let mid = 0.5 * (lo + hi);
        if check(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(ThroughputResult {
        rate: lo * base_rate,
        multiplier: lo,
        feasible: true,
        capped: false,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::RequestRecord;
    use crate::model::PerModality;

    fn slo() -> SloSpec {
        SloSpec {
            ttft_base_ms: PerModality {
                text_only: 100.0,
                image_text: 100.0,
            },
            tbt_base_ms: 10.0,
            slo_factor: 1.0,
            percentile: 0.99,
        }
    }

    /// A log whose every request has TTFT `ttft`.
    fn flat(ttft: f64) -> MetricsLog {
        let r = RequestRecord {
            id: 0,
            arrival_ms: 50.0,
            modality: Modality::TextOnly,
            service_id: String::new(),
            text_tokens: 1,
            image_tokens: 0,
            images: 0,
            output_tokens: 1,
            shards: vec![],
            transfer_end_ms: None,
            prefill_instance: None,
            prefill_start_ms: None,
            prefill_end_ms: Some(50.0 + ttft),
            decode_instance: None,
            completion_ms: Some(50.0 + ttft),
            tbt_gaps: vec![],
        };
        MetricsLog {
            horizon_ms: 100.0,
            end_ms: 100.0,
            requests: vec![r],
            ..Default::default()
        }
    }

    #[test]
    fn finds_threshold_of_step_response() {
        // TTFT crosses the objective at multiplier 3.3
        let res = max_throughput(2.0, &[1, 2, 3], &slo(), &ThroughputOptions::default(), |m, _| {
            Ok(flat(if m <= 3.3 { 50.0 } else { 500.0 }))
        })
        .unwrap();
        assert!(res.feasible);
        assert!(res.multiplier <= 3.3 && res.multiplier >= 3.3 * 0.98, "{res:?}");
        assert!((res.rate - 2.0 * res.multiplier).abs() < 1e-12);
    }

    #[test]
    fn infeasible_returns_zero() {
        let res = max_throughput(1.0, &[1, 2, 3], &slo(), &ThroughputOptions::default(), |_, _| Ok(flat(1e6))).unwrap();
        assert!(!res.feasible);
        assert_eq!(res.rate, 0.0);
    }

    #[test]
    fn worst_seed_decides() {
        let res = max_throughput(1.0, &[1, 2, 3], &slo(), &ThroughputOptions::default(), |m, s| {
            let limit = if s == 2 { 1.5 } else { 10.0 };
            Ok(flat(if m <= limit { 50.0 } else { 500.0 }))
        })
        .unwrap();
        assert!(res.multiplier <= 1.5 && res.multiplier >= 1.47);
    }

    #[test]
    fn needs_three_seeds() {
        assert!(max_throughput(1.0, &[1, 2], &slo(), &ThroughputOptions::default(), |_, _| Ok(flat(1.0))).is_err());
    }

    #[test]
    fn unfinished_requests_count_as_misses() {
        let mut log = flat(10.0);
        log.requests[0].completion_ms = None;
        let (t, _, _) = steady_state_p99(&log, &slo(), &SummaryOptions::default());
        assert!(t.is_infinite());
    }
}
