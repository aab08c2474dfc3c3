//! Synthetic request streams.
//!
//! Text-only and image-text requests arrive as two Poisson streams whose
//! rates are modulated by burst episodes and an optional daily cycle.
//! Arrivals are drawn by thinning against an upper bound of the rate, so the
//! process is exact for any piecewise-smooth rate function.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Request, RequestId};

pub const MAX_IMAGES_PER_REQUEST: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstEpisode {
    pub start_ms: f64,
    pub duration_ms: f64,
    pub rate_multiplier: f64,
    pub image_multiplier: f64,
    /// Only the image-text stream is multiplied.
    #[serde(default)]
    pub image_only: bool,
}

impl BurstEpisode {
    fn contains(&self, t: f64) -> bool {
        t >= self.start_ms && t < self.start_ms + self.duration_ms
    }
}

/// Sinusoidal rate modulation, `1 + amplitude * sin(2 pi (t + phase) / period)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diurnal {
    pub amplitude: f64,
    #[serde(default = "day_ms")]
    pub period_ms: f64,
    #[serde(default)]
    pub phase_ms: f64,
}

fn day_ms() -> f64 {
    86_400_000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weighted<T> {
    pub value: T,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ImageDimDist {
    /// Width log-normal around `median_px`; height is width times a
    /// log-normal aspect ratio.
    LogNormal {
        median_px: f64,
        sigma: f64,
        aspect_sigma: f64,
        min_px: u32,
        max_px: u32,
    },
    Empirical { dims: Vec<Weighted<(u32, u32)>> },
}

impl Default for ImageDimDist {
    fn default() -> Self {
        ImageDimDist::LogNormal {
            median_px: 500.0,
            sigma: 0.48,
            aspect_sigma: 0.15,
            min_px: 32,
            max_px: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum OutputLenDist {
    Fixed { tokens: u32 },
    LogNormal { median: f64, sigma: f64, max: u32 },
}

impl Default for OutputLenDist {
    fn default() -> Self {
        OutputLenDist::LogNormal {
            median: 128.0,
            sigma: 0.7,
            max: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceMix {
    pub id: String,
    pub weight: f64,
    /// Scales the images drawn for this service's requests.
    #[serde(default = "one")]
    pub image_multiplier: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Mean requests per second outside bursts.
    pub base_rate: f64,
    #[serde(default)]
    pub burst_episodes: Vec<BurstEpisode>,
    #[serde(default)]
    pub diurnal: Option<Diurnal>,
    #[serde(default = "text_alpha")]
    pub text_len_alpha: f64,
    #[serde(default = "image_alpha")]
    pub image_req_len_alpha: f64,
    #[serde(default = "len_min")]
    pub text_len_min: u32,
    #[serde(default = "len_max")]
    pub text_len_max: u32,
    #[serde(default = "default_images_per_request")]
    pub images_per_request: Vec<Weighted<u32>>,
    #[serde(default)]
    pub image_dim_dist: ImageDimDist,
    #[serde(default = "half")]
    pub image_request_fraction: f64,
    #[serde(default)]
    pub output_len_dist: OutputLenDist,
    #[serde(default)]
    pub services: Vec<ServiceMix>,
    #[serde(default)]
    pub seed: u64,
}

fn text_alpha() -> f64 {
    2.9
}
fn image_alpha() -> f64 {
    4.4
}
fn len_min() -> u32 {
    16
}
fn len_max() -> u32 {
    32_768
}
fn half() -> f64 {
    0.5
}

/// Heavy-tailed image counts: mostly single images, a long tail up to 16.
pub fn default_images_per_request() -> Vec<Weighted<u32>> {
    let raw: [(u32, f64); 16] = [
        (1, 0.51),
        (2, 0.16),
        (3, 0.08),
        (4, 0.06),
        (5, 0.04),
        (6, 0.03),
        (7, 0.02),
        (8, 0.02),
        (9, 0.015),
        (10, 0.015),
        (11, 0.01),
        (12, 0.01),
        (13, 0.01),
        (14, 0.01),
        (15, 0.005),
        (16, 0.005),
    ];
    raw.iter()
        .map(|&(value, weight)| Weighted { value, weight })
        .collect()
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_rate: 1.0,
            burst_episodes: Vec::new(),
            diurnal: None,
            text_len_alpha: text_alpha(),
            image_req_len_alpha: image_alpha(),
            text_len_min: len_min(),
            text_len_max: len_max(),
            images_per_request: default_images_per_request(),
            image_dim_dist: ImageDimDist::default(),
            image_request_fraction: half(),
            output_len_dist: OutputLenDist::default(),
            services: Vec::new(),
            seed: 0,
        }
    }
}

fn check_weights<T>(name: &str, items: &[Weighted<T>]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Config(format!("{name}: empty distribution")));
    }
    if items.iter().any(|w| !(w.weight >= 0.0)) {
        return Err(Error::Config(format!("{name}: negative weight")));
    }
    let sum: f64 = items.iter().map(|w| w.weight).sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("{name}: probabilities sum to {sum}, expected 1")));
    }
    Ok(())
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("workload.generator: {m}")));
        if !(self.base_rate > 0.0) {
            return bad("base_rate must be > 0");
        }
        if !(self.text_len_alpha > 1.0 && self.image_req_len_alpha > 1.0) {
            return bad("power-law exponents must be > 1");
        }
        if self.text_len_min < 1 || self.text_len_min > self.text_len_max {
            return bad("need 1 <= text_len_min <= text_len_max");
        }
        if !(0.0..=1.0).contains(&self.image_request_fraction) {
            return bad("image_request_fraction must be in [0, 1]");
        }
        check_weights("workload.generator.images_per_request", &self.images_per_request)?;
        if self.images_per_request.iter().any(|w| w.value > MAX_IMAGES_PER_REQUEST) {
            return bad("images_per_request values must be <= 16");
        }
        if let ImageDimDist::Empirical { dims } = &self.image_dim_dist {
            check_weights("workload.generator.image_dim_dist", dims)?;
            if dims.iter().any(|d| d.value.0 == 0 || d.value.1 == 0) {
                return bad("image dims must be positive");
            }
        }
        if let ImageDimDist::LogNormal { median_px, sigma, aspect_sigma, min_px, max_px } = self.image_dim_dist {
            if !(median_px > 0.0 && sigma >= 0.0 && aspect_sigma >= 0.0 && min_px >= 1 && min_px <= max_px) {
                return bad("invalid image_dim_dist parameters");
            }
        }
        match self.output_len_dist {
            OutputLenDist::Fixed { tokens } if tokens == 0 => return bad("output tokens must be >= 1"),
            OutputLenDist::LogNormal { median, sigma, max } if !(median >= 1.0 && sigma >= 0.0 && max >= 1) => {
                return bad("invalid output_len_dist parameters")
            }
            _ => {}
        }
        for b in &self.burst_episodes {
            if !(b.duration_ms > 0.0 && b.rate_multiplier > 0.0 && b.image_multiplier > 0.0 && b.start_ms >= 0.0) {
                return bad("burst episodes need start >= 0 and positive duration and multipliers");
            }
        }
        if let Some(d) = self.diurnal {
            if !(0.0..1.0).contains(&d.amplitude) || !(d.period_ms > 0.0) {
                return bad("diurnal amplitude must be in [0, 1) and period > 0");
            }
        }
        if !self.services.is_empty() {
            let sum: f64 = self.services.iter().map(|s| s.weight).sum();
            if self.services.iter().any(|s| !(s.weight >= 0.0) || !(s.image_multiplier > 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return bad("service weights must be >= 0 and sum to 1");
            }
        }
        Ok(())
    }

    fn diurnal_factor(&self, t: f64) -> f64 {
        match self.diurnal {
            Some(d) => 1.0 + d.amplitude * (std::f64::consts::TAU * (t + d.phase_ms) / d.period_ms).sin(),
            None => 1.0,
        }
    }

    /// Instantaneous (text-only, image-text) arrival rates in requests per ms.
    pub fn rates_at(&self, t: f64) -> (f64, f64) {
        let base = self.base_rate / 1000.0 * self.diurnal_factor(t);
        let mut text = base * (1.0 - self.image_request_fraction);
        let mut image = base * self.image_request_fraction;
        for b in self.burst_episodes.iter().filter(|b| b.contains(t)) {
            image *= b.rate_multiplier;
            if !b.image_only {
                text *= b.rate_multiplier;
            }
        }
        (text, image)
    }

    fn image_multiplier_at(&self, t: f64) -> f64 {
        self.burst_episodes
            .iter()
            .filter(|b| b.contains(t))
            .map(|b| b.image_multiplier)
            .product()
    }

    fn rate_bound(&self) -> f64 {
        let diurnal = self.diurnal.map_or(1.0, |d| 1.0 + d.amplitude);
        let bursts: f64 = self
            .burst_episodes
            .iter()
            .map(|b| b.rate_multiplier.max(1.0))
            .product();
        self.base_rate / 1000.0 * diurnal * bursts
    }
}

/// Inverse-CDF draw from a density proportional to `x^-alpha` on
/// `[xmin, xmax]`.
pub fn sample_power_law(u: f64, alpha: f64, xmin: f64, xmax: f64) -> f64 {
    let e = 1.0 - alpha;
    let ratio = (xmax / xmin).powf(e);
    xmin * (1.0 - u * (1.0 - ratio)).powf(1.0 / e)
}

fn pick<'a, T, R: Rng>(items: &'a [Weighted<T>], rng: &mut R) -> &'a T {
    let total: f64 = items.iter().map(|w| w.weight).sum();
    let mut u = rng.random::<f64>() * total;
    for w in items {
        if u < w.weight {
            return &w.value;
        }
        u -= w.weight;
    }
    &items.last().expect("validated non-empty").value
}

/// Lazily yields requests in arrival order up to the horizon.
pub struct Generator {
    config: GeneratorConfig,
    model: ModelSpec,
    horizon_ms: f64,
    rng: ChaCha8Rng,
    now: f64,
    next_id: u64,
    bound: f64,
}

impl Generator {
    pub fn new(config: GeneratorConfig, model: &ModelSpec, horizon_ms: f64) -> Result<Self> {
        config.validate()?;
        if !(horizon_ms > 0.0) {
            return Err(Error::Config("horizon_ms must be > 0".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = config.rate_bound();
        Ok(Generator {
            config,
            model: model.clone(),
            horizon_ms,
            rng,
            now: 0.0,
            next_id: 0,
            bound,
        })
    }

    fn text_len(&mut self, alpha: f64) -> u32 {
        let c = &self.config;
        let (lo, hi) = (f64::from(c.text_len_min), f64::from(c.text_len_max));
        let u: f64 = self.rng.random();
        let x = sample_power_law(u, alpha, lo, hi);
        (x.floor() as u32).clamp(c.text_len_min, c.text_len_max)
    }

    fn image_dims(&mut self) -> (u32, u32) {
        match &self.config.image_dim_dist {
            ImageDimDist::LogNormal {
                median_px,
                sigma,
                aspect_sigma,
                min_px,
                max_px,
            } => {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                let a: f64 = StandardNormal.sample(&mut self.rng);
                let w = median_px * (sigma * z).exp();
                let h = w * (aspect_sigma * a).exp();
                let clamp = |v: f64| (v.round() as u32).clamp(*min_px, *max_px);
                (clamp(w), clamp(h))
            }
            ImageDimDist::Empirical { dims } => *pick(dims, &mut self.rng),
        }
    }

    fn output_len(&mut self) -> u32 {
        match self.config.output_len_dist {
            OutputLenDist::Fixed { tokens } => tokens,
            OutputLenDist::LogNormal { median, sigma, max } => {
                let d = LogNormal::new(median.ln(), sigma).expect("validated");
                (d.sample(&mut self.rng).round() as u32).clamp(1, max)
            }
        }
    }

    fn build(&mut self, t: f64, with_images: bool) -> Request {
        let (service_id, service_mult) = if self.config.services.is_empty() {
            ("default".to_string(), 1.0)
        } else {
            let total: f64 = self.config.services.iter().map(|s| s.weight).sum();
            let mut u = self.rng.random::<f64>() * total;
            let mut chosen = self.config.services.last().expect("non-empty");
            for s in &self.config.services {
                if u < s.weight {
                    chosen = s;
                    break;
                }
                u -= s.weight;
            }
            (chosen.id.clone(), chosen.image_multiplier)
        };
        let mut images = Vec::new();
        let text_tokens;
        if with_images {
            text_tokens = self.text_len(self.config.image_req_len_alpha);
            let drawn = *pick(&self.config.images_per_request, &mut self.rng);
            let mult = self.config.image_multiplier_at(t) * service_mult;
            let count = ((f64::from(drawn) * mult).round() as u32).min(MAX_IMAGES_PER_REQUEST);
            for _ in 0..count {
                let (w, h) = self.image_dims();
                images.push(self.model.image(w, h));
            }
        } else {
            text_tokens = self.text_len(self.config.text_len_alpha);
        }
        let output_tokens = self.output_len();
        let id = RequestId(self.next_id);
        self.next_id += 1;
        Request {
            id,
            arrival_ms: t,
            text_tokens,
            images,
            output_tokens,
            service_id,
        }
    }
}

impl Iterator for Generator {
    type Item = Request;

    fn next(&mut self) -> Option<Request> {
        loop {
            let gap: f64 = Exp1.sample(&mut self.rng);
            self.now += gap / self.bound;
            if self.now >= self.horizon_ms {
                self.now = self.horizon_ms;
                return None;
            }
            let (text, image) = self.config.rates_at(self.now);
            let u: f64 = self.rng.random::<f64>() * self.bound;
            if u < text + image {
                let with_images = u >= text;
                return Some(self.build(self.now, with_images));
            }
        }
    }
}

pub fn generate(config: &GeneratorConfig, model: &ModelSpec, horizon_ms: f64) -> Result<Generator> {
    Generator::new(config.clone(), model, horizon_ms)
}

/// Maximum-likelihood exponent of a continuous power law above `xmin`.
pub fn fit_power_law_alpha(samples: &[f64], xmin: f64) -> f64 {
    let tail: Vec<f64> = samples.iter().copied().filter(|&x| x >= xmin).collect();
    let s: f64 = tail.iter().map(|x| (x / xmin).ln()).sum();
    1.0 + tail.len() as f64 / s
}
