use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::metrics::quantile::percentile;
use crate::model::Request;

/// Bucket width for rate series.
pub const DEFAULT_RATE_WINDOW_MS: f64 = 60_000.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub p95: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Spread {
        Spread {
            median: percentile(values, 0.5).unwrap_or(0.0),
            p95: percentile(values, 0.95).unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceSummary {
    pub requests: usize,
    pub image_requests: usize,
    pub images: u64,
    pub prompt_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSummary {
    /// Set when the stream had no requests; every other field is zero.
    pub empty: bool,
    pub requests: usize,
    pub image_requests: usize,
    pub span_s: f64,
    /// Text plus image tokens.
    pub prompt_tokens: Spread,
    pub images_per_request: Spread,
    /// Image counts over image-text requests only.
    pub images_per_image_request: Spread,
    pub tiles_per_image: Spread,
    /// Mean images per second over the span.
    pub image_qps: f64,
    /// Median of the per-window image rates.
    pub median_image_qps: f64,
    pub peak_image_qps: f64,
    /// Largest per-window ratio of image-text to text-only prompt token rate.
    pub peak_prompt_rate_ratio: f64,
    pub services: BTreeMap<String, ServiceSummary>,
}

pub fn summarize(requests: &[Request]) -> WorkloadSummary {
    summarize_with_window(requests, DEFAULT_RATE_WINDOW_MS)
}

pub fn summarize_with_window(requests: &[Request], window_ms: f64) -> WorkloadSummary {
    if requests.is_empty() {
        return WorkloadSummary {
            empty: true,
            ..Default::default()
        };
    }
    let first = requests.iter().map(|r| r.arrival_ms).fold(f64::INFINITY, f64::min);
    let last = requests.iter().map(|r| r.arrival_ms).fold(f64::NEG_INFINITY, f64::max);
    let span_ms = (last - first).max(window_ms.min(1000.0));
    let windows = ((span_ms / window_ms).ceil() as usize).max(1);

    let mut images_per_window = vec![0.0; windows];
    let mut image_prompt = vec![0.0; windows];
    let mut text_prompt = vec![0.0; windows];
    let mut services: BTreeMap<String, ServiceSummary> = BTreeMap::new();
    let mut prompts = Vec::with_capacity(requests.len());
    let mut counts = Vec::with_capacity(requests.len());
    let mut image_counts = Vec::new();
    let mut tiles = Vec::new();
    let mut total_images = 0u64;

    for r in requests {
        let w = (((r.arrival_ms - first) / window_ms) as usize).min(windows - 1);
        let n = r.images.len();
        let prompt = r.prompt_tokens();
        prompts.push(prompt as f64);
        counts.push(n as f64);
        total_images += n as u64;
        images_per_window[w] += n as f64;
        tiles.extend(r.images.iter().map(|i| f64::from(i.tiles)));
        if n > 0 {
            image_counts.push(n as f64);
            image_prompt[w] += prompt as f64;
        } else {
            text_prompt[w] += prompt as f64;
        }
        let s = services.entry(r.service_id.clone()).or_default();
        s.requests += 1;
        s.image_requests += usize::from(n > 0);
        s.images += n as u64;
        s.prompt_tokens += prompt;
    }

    let window_s = window_ms / 1000.0;
    let qps: Vec<f64> = images_per_window.iter().map(|c| c / window_s).collect();
    let peak_prompt_rate_ratio = image_prompt
        .iter()
        .zip(&text_prompt)
        .filter(|(_, &t)| t > 0.0)
        .map(|(i, t)| i / t)
        .fold(0.0, f64::max);

    WorkloadSummary {
        empty: false,
        requests: requests.len(),
        image_requests: image_counts.len(),
        span_s: span_ms / 1000.0,
        prompt_tokens: Spread::of(&prompts),
        images_per_request: Spread::of(&counts),
        images_per_image_request: Spread::of(&image_counts),
        tiles_per_image: Spread::of(&tiles),
        image_qps: total_images as f64 / (span_ms / 1000.0),
        median_image_qps: percentile(&qps, 0.5).unwrap_or(0.0),
        peak_image_qps: qps.iter().copied().fold(0.0, f64::max),
        peak_prompt_rate_ratio,
        services,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, RequestId};
    use crate::workload::{generate, BurstEpisode, GeneratorConfig};

    fn req(id: u64, t: f64, text: u32, images: usize) -> Request {
        let m = ModelSpec::preset("internvl-26b").unwrap();
        Request {
            id: RequestId(id),
            arrival_ms: t,
            text_tokens: text,
            images: vec![m.image(896, 896); images],
            output_tokens: 8,
            service_id: "s".into(),
        }
    }

    #[test]
    fn empty_stream_marker() {
        assert!(summarize(&[]).empty);
    }

    #[test]
    fn text_only_has_no_image_rate() {
        let reqs: Vec<Request> = (0..50).map(|i| req(i, i as f64 * 1000.0, 100, 0)).collect();
        let s = summarize(&reqs);
        assert_eq!(s.image_qps, 0.0);
        assert_eq!(s.median_image_qps, 0.0);
        assert_eq!(s.image_requests, 0);
    }

    #[test]
    fn identical_requests_give_their_values() {
        let reqs: Vec<Request> = (0..20).map(|i| req(i, i as f64 * 500.0, 100, 2)).collect();
        let s = summarize(&reqs);
        assert_eq!(s.prompt_tokens.median, 100.0 + 2.0 * 1280.0);
        assert_eq!(s.images_per_request.median, 2.0);
        assert_eq!(s.images_per_image_request.p95, 2.0);
        assert_eq!(s.services["s"].requests, 20);
    }

    #[test]
    fn image_bursts_raise_image_prompt_rate() {
        // A compressed week: a daily cycle for both streams plus image-only bursts
        // with more images per request.
        let model = ModelSpec::preset("internvl-26b").unwrap();
        let day = 86_400_000.0 / 24.0;
        let cfg = GeneratorConfig {
            base_rate: 4.0,
            image_request_fraction: 0.2,
            burst_episodes: (0..7)
                .map(|d| BurstEpisode {
                    start_ms: d as f64 * day + 0.5 * day,
                    duration_ms: 0.05 * day,
                    rate_multiplier: 2.0,
                    image_multiplier: 2.0,
                    image_only: true,
                })
                .collect(),
            seed: 1,
            ..Default::default()
        };
        let reqs: Vec<Request> = generate(&cfg, &model, 7.0 * day).unwrap().collect();
        let s = summarize(&reqs);
        let quiet: Vec<Request> = reqs
            .iter()
            .filter(|r| (r.arrival_ms % day) < 0.4 * day)
            .cloned()
            .collect();
        let q = summarize(&quiet);
        assert!(s.peak_prompt_rate_ratio > q.peak_prompt_rate_ratio);
        assert!(s.peak_image_qps > s.median_image_qps);
    }
}
