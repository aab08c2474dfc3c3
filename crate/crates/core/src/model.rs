//! Domain types shared by every part of the simulator: model descriptions,
//! requests, stages and latency objectives.
//!
//! Images are reduced to token counts through a fixed tiling rule: the image
//! is covered by `ceil(w / edge) x ceil(h / edge)` tiles, optionally plus one
//! global thumbnail tile when more than one tile is produced, and the total is
//! capped at `max_tiles_per_image`. Every tile maps to `tokens_per_tile`
//! tokens.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the LLM backend consumes image tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    /// Image tokens are unrolled into the decoder sequence.
    DecOnly,
    /// Image tokens are attended only from dedicated cross-attention layers.
    CroAttn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub architecture: Architecture,
    pub tile_edge_px: u32,
    pub tokens_per_tile: u32,
    pub max_tiles_per_image: u32,
    /// Adds one global thumbnail tile whenever an image spans several tiles.
    #[serde(default)]
    pub thumbnail_tile: bool,
    pub encoder_params_b: f64,
    pub llm_params_b: f64,
    pub default_tp_text: u32,
    pub supported_tp_encoder: BTreeSet<u32>,
    #[serde(default = "default_text_tps")]
    pub supported_tp_text: BTreeSet<u32>,
}

fn default_text_tps() -> BTreeSet<u32> {
    [1, 2, 4, 8].into_iter().collect()
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tokens_per_tile < 1 || self.tile_edge_px < 1 || self.max_tiles_per_image < 1 {
            return Err(Error::Config(format!(
                "model {}: tile_edge_px, tokens_per_tile and max_tiles_per_image must be >= 1",
                self.name
            )));
        }
        if self.supported_tp_encoder.is_empty() || self.supported_tp_text.is_empty() {
            return Err(Error::Config(format!(
                "model {}: supported TP sets must not be empty",
                self.name
            )));
        }
        if self.supported_tp_encoder.contains(&0) || self.supported_tp_text.contains(&0) {
            return Err(Error::Config(format!("model {}: TP degree 0", self.name)));
        }
        if !self.supported_tp_text.contains(&self.default_tp_text) {
            return Err(Error::Config(format!(
                "model {}: default_tp_text {} not in supported_tp_text",
                self.name, self.default_tp_text
            )));
        }
        Ok(())
    }

    /// Number of tiles an image of the given size is cut into.
    pub fn tiles(&self, width_px: u32, height_px: u32) -> u32 {
        let edge = self.tile_edge_px.max(1);
        let cols = width_px.max(1).div_ceil(edge);
        let rows = height_px.max(1).div_ceil(edge);
        let grid = cols.saturating_mul(rows);
        let with_thumb = if self.thumbnail_tile && grid > 1 {
            grid.saturating_add(1)
        } else {
            grid
        };
        with_thumb.min(self.max_tiles_per_image)
    }

    pub fn image(&self, width_px: u32, height_px: u32) -> ImageSpec {
        let tiles = self.tiles(width_px, height_px);
        ImageSpec {
            width_px,
            height_px,
            tiles,
            image_tokens: tiles * self.tokens_per_tile,
        }
    }

    pub fn preset(name: &str) -> Option<ModelSpec> {
        presets().into_iter().find(|m| m.name.eq_ignore_ascii_case(name))
    }

    /// Loads one or more model specs from a JSON file holding either a single
    /// object or an array of objects.
    pub fn load_all(path: &Path) -> Result<Vec<ModelSpec>> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let specs: Vec<ModelSpec> = if value.is_array() {
            serde_json::from_value(value)?
        } else {
            vec![serde_json::from_value(value)?]
        };
        for s in &specs {
            s.validate()?;
        }
        Ok(specs)
    }
}

/// Image tokens produced for one `width x height` image.
pub fn image_tokens(width_px: u32, height_px: u32, model: &ModelSpec) -> u32 {
    model.tiles(width_px, height_px) * model.tokens_per_tile
}

fn tps(v: &[u32]) -> BTreeSet<u32> {
    v.iter().copied().collect()
}

/// The six reference models with their tiling parameters and default
/// tensor parallelism.
pub fn presets() -> Vec<ModelSpec> {
    vec![
        ModelSpec {
            name: "llama3.2-11b".into(),
            architecture: Architecture::CroAttn,
            tile_edge_px: 560,
            tokens_per_tile: 1601,
            max_tiles_per_image: 4,
            thumbnail_tile: false,
            encoder_params_b: 0.63,
            llm_params_b: 8.0,
            default_tp_text: 4,
            supported_tp_encoder: tps(&[1, 2, 4, 8]),
            supported_tp_text: tps(&[1, 2, 4, 8]),
        },
        ModelSpec {
            name: "llama3.2-90b".into(),
            architecture: Architecture::CroAttn,
            tile_edge_px: 560,
            tokens_per_tile: 1601,
            max_tiles_per_image: 4,
            thumbnail_tile: false,
            encoder_params_b: 0.63,
            llm_params_b: 70.0,
            default_tp_text: 8,
            supported_tp_encoder: tps(&[1, 2, 4, 8]),
            supported_tp_text: tps(&[4, 8]),
        },
        ModelSpec {
            name: "llava-ov-7b".into(),
            architecture: Architecture::DecOnly,
            tile_edge_px: 384,
            tokens_per_tile: 729,
            max_tiles_per_image: 10,
            thumbnail_tile: true,
            encoder_params_b: 0.4,
            llm_params_b: 7.0,
            default_tp_text: 4,
            supported_tp_encoder: tps(&[1, 2, 4, 8]),
            supported_tp_text: tps(&[1, 2, 4, 8]),
        },
        ModelSpec {
            name: "llava-ov-72b".into(),
            architecture: Architecture::DecOnly,
            tile_edge_px: 384,
            tokens_per_tile: 729,
            max_tiles_per_image: 10,
            thumbnail_tile: true,
            encoder_params_b: 0.4,
            llm_params_b: 72.0,
            default_tp_text: 8,
            supported_tp_encoder: tps(&[1, 2, 4, 8]),
            supported_tp_text: tps(&[4, 8]),
        },
        ModelSpec {
            name: "internvl-26b".into(),
            architecture: Architecture::DecOnly,
            tile_edge_px: 448,
            tokens_per_tile: 256,
            max_tiles_per_image: 5,
            thumbnail_tile: true,
            encoder_params_b: 6.0,
            llm_params_b: 20.0,
            default_tp_text: 8,
            supported_tp_encoder: tps(&[1, 2, 4, 8]),
            supported_tp_text: tps(&[1, 2, 4, 8]),
        },
        ModelSpec {
            name: "nvlm-d-72b".into(),
            architecture: Architecture::DecOnly,
            tile_edge_px: 448,
            tokens_per_tile: 256,
            max_tiles_per_image: 5,
            thumbnail_tile: true,
            encoder_params_b: 6.0,
            llm_params_b: 72.0,
            default_tp_text: 8,
            supported_tp_encoder: tps(&[4, 8]),
            supported_tp_text: tps(&[4, 8]),
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub width_px: u32,
    pub height_px: u32,
    pub tiles: u32,
    pub image_tokens: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which latency objective a request is held to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    TextOnly,
    ImageText,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::TextOnly => "text",
            Modality::ImageText => "image",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub arrival_ms: f64,
    pub text_tokens: u32,
    pub images: Vec<ImageSpec>,
    pub output_tokens: u32,
    pub service_id: String,
}

impl Request {
    pub fn validate(&self) -> Result<()> {
        if self.output_tokens < 1 {
            return Err(Error::Domain(format!("request {}: output_tokens must be >= 1", self.id)));
        }
        if !self.arrival_ms.is_finite() || self.arrival_ms < 0.0 {
            return Err(Error::Domain(format!("request {}: bad arrival time", self.id)));
        }
        if self.text_tokens == 0 && self.images.is_empty() {
            return Err(Error::Domain(format!("request {}: empty prompt", self.id)));
        }
        Ok(())
    }

    pub fn slo_class(&self) -> Modality {
        if self.images.is_empty() {
            Modality::TextOnly
        } else {
            Modality::ImageText
        }
    }

    pub fn image_tokens(&self) -> u64 {
        self.images.iter().map(|i| u64::from(i.image_tokens)).sum()
    }

    pub fn tiles(&self) -> u32 {
        self.images.iter().map(|i| i.tiles).sum()
    }

    pub fn prompt_tokens(&self) -> u64 {
        u64::from(self.text_tokens) + self.image_tokens()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenTotals {
    pub text: u64,
    pub image: u64,
    pub total: u64,
}

/// Text, image and total prompt tokens, with image tokens re-derived from
/// each image's pixel size under `model`.
pub fn request_totals(r: &Request, model: &ModelSpec) -> TokenTotals {
    let text = u64::from(r.text_tokens);
    let image: u64 = r
        .images
        .iter()
        .map(|i| u64::from(image_tokens(i.width_px, i.height_px, model)))
        .sum();
    TokenTotals {
        text,
        image,
        total: text + image,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerModality<T> {
    pub text_only: T,
    pub image_text: T,
}

impl<T: Copy> PerModality<T> {
    pub fn get(&self, m: Modality) -> T {
        match m {
            Modality::TextOnly => self.text_only,
            Modality::ImageText => self.image_text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloSpec {
    /// Isolated single-request TTFT on the monolithic deployment.
    pub ttft_base_ms: PerModality<f64>,
    pub tbt_base_ms: f64,
    pub slo_factor: f64,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
}

fn default_percentile() -> f64 {
    0.99
}

impl SloSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.slo_factor > 0.0) {
            return Err(Error::Config("slo.slo_factor must be > 0".into()));
        }
        if !(self.percentile > 0.0 && self.percentile <= 1.0) {
            return Err(Error::Config("slo.percentile must be in (0, 1]".into()));
        }
        if !(self.ttft_base_ms.text_only > 0.0
            && self.ttft_base_ms.image_text > 0.0
            && self.tbt_base_ms > 0.0)
        {
            return Err(Error::Config("slo base latencies must be > 0".into()));
        }
        Ok(())
    }

    pub fn ttft_slo_ms(&self, m: Modality) -> f64 {
        self.ttft_base_ms.get(m) * self.slo_factor
    }

    pub fn tbt_slo_ms(&self) -> f64 {
        self.tbt_base_ms * self.slo_factor
    }

    pub fn with_factor(mut self, slo_factor: f64) -> Self {
        self.slo_factor = slo_factor;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageKind {
    Preprocess,
    Encode,
    Prefill,
    Decode,
    Transfer,
}

impl StageKind {
    pub const ALL: [StageKind; 5] = [
        StageKind::Preprocess,
        StageKind::Encode,
        StageKind::Prefill,
        StageKind::Decode,
        StageKind::Transfer,
    ];
}

#[cfg(test)]
mod tests {
    use super::*;

    fn llama() -> ModelSpec {
        ModelSpec::preset("llama3.2-11b").unwrap()
    }

    fn internvl() -> ModelSpec {
        ModelSpec::preset("internvl-26b").unwrap()
    }

    #[test]
    fn reference_image_token_counts() {
        assert_eq!(image_tokens(896, 896, &llama()), 6404);
        assert_eq!(image_tokens(896, 896, &internvl()), 1280);
        assert_eq!(image_tokens(896, 896, &ModelSpec::preset("nvlm-d-72b").unwrap()), 1280);
        assert_eq!(image_tokens(896, 896, &ModelSpec::preset("llava-ov-7b").unwrap()), 7290);
        assert_eq!(image_tokens(896, 896, &ModelSpec::preset("llama3.2-90b").unwrap()), 6404);
    }

    #[test]
    fn unit_image_is_one_tile() {
        for m in presets() {
            assert_eq!(m.tiles(1, 1), 1);
            assert_eq!(image_tokens(1, 1, &m), m.tokens_per_tile);
        }
    }

    #[test]
    fn tiles_never_exceed_cap() {
        for m in presets() {
            assert!(m.tiles(100_000, 100_000) <= m.max_tiles_per_image);
        }
    }

    #[test]
    fn totals_text_only_and_images() {
        let m = internvl();
        let mut r = Request {
            id: RequestId(1),
            arrival_ms: 0.0,
            text_tokens: 100,
            images: vec![],
            output_tokens: 1,
            service_id: "s".into(),
        };
        assert_eq!(
            request_totals(&r, &m),
            TokenTotals { text: 100, image: 0, total: 100 }
        );
        r.text_tokens = 0;
        r.images = vec![m.image(896, 896)];
        assert_eq!(
            request_totals(&r, &m),
            TokenTotals { text: 0, image: 1280, total: 1280 }
        );
        let single = request_totals(&r, &m).image;
        r.images.push(m.image(896, 896));
        assert_eq!(request_totals(&r, &m).image, 2 * single);
        assert_eq!(r.image_tokens(), 2 * single);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut m = llama();
        m.tokens_per_tile = 0;
        assert!(m.validate().is_err());
        let mut m = llama();
        m.default_tp_text = 3;
        assert!(m.validate().is_err());
        assert!(llama().validate().is_ok());
    }

    #[test]
    fn slo_scaling() {
        let slo = SloSpec {
            ttft_base_ms: PerModality { text_only: 100.0, image_text: 1000.0 },
            tbt_base_ms: 25.0,
            slo_factor: 4.0,
            percentile: 0.99,
        };
        assert_eq!(slo.ttft_slo_ms(Modality::ImageText), 4000.0);
        assert_eq!(slo.tbt_slo_ms(), 100.0);
        assert!(slo.with_factor(0.0).validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn tiling_monotone_in_each_dimension(w in 1u32..4000, h in 1u32..4000, dw in 0u32..2000, dh in 0u32..2000) {
            for m in presets() {
                let base = m.tiles(w, h);
                proptest::prop_assert!(m.tiles(w + dw, h) >= base);
                proptest::prop_assert!(m.tiles(w, h + dh) >= base);
                proptest::prop_assert!(base >= 1 && base <= m.max_tiles_per_image);
                proptest::prop_assert_eq!(m.image(w, h).image_tokens, base * m.tokens_per_tile);
            }
        }
    }
}
