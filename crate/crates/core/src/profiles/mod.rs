//! Analytic per-stage latency profiles.
//!
//! A profile holds one [`StageLatencyModel`] per (stage, TP degree) point
//! that was profiled. Latencies at TP degrees between profiled points are
//! interpolated piecewise-linearly; preprocessing runs on CPU and is stored
//! under TP `0`.

mod calibrate;
mod capacity;

pub use calibrate::{calibrate, preset_targets, CalibrationTargets, TpPoint};
pub(crate) use capacity::capacity_for_job;
pub use capacity::{
    max_capacity, predicted_latency_ms, reference_job, wait_multiplier, Capacity, CapacityOptions,
    ReferenceJob,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, ModelSpec, PerModality, SloSpec, StageKind};

/// Functional form of one stage's latency and its coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form")]
pub enum LatencyForm {
    /// `fixed_ms + per_unit_ms * units` (tiles for encode, tokens for prefill).
    LinearInTokens { fixed_ms: f64, per_unit_ms: f64 },
    /// `base_ms + per_request_ms * (batch - 1)`.
    AffineInBatch { base_ms: f64, per_request_ms: f64 },
    /// `max(floor_ms, per_tile_core_ms * tiles / cores)`; zero tiles cost nothing.
    ConstantPerToken { per_tile_core_ms: f64, floor_ms: f64 },
    /// `fixed_ms + self_ms * text + cross_ms * text * image / (text + image)`.
    CrossAttnPrefill {
        fixed_ms: f64,
        self_ms_per_token: f64,
        cross_ms_per_token: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageLatencyModel {
    pub stage: StageKind,
    pub tp: u32,
    #[serde(flatten)]
    pub form: LatencyForm,
}

/// The request every profile is normalised against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRequest {
    pub text_tokens: u32,
    pub width_px: u32,
    pub height_px: u32,
    pub cpu_cores: u32,
    pub ttft_ms: f64,
    /// TP degree the reference breakdown was measured at.
    pub tp: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityEntry {
    pub stage: StageKind,
    pub tp: u32,
    pub slo_share_ms: f64,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub model: ModelSpec,
    pub reference: ReferenceRequest,
    pub entries: Vec<StageLatencyModel>,
    #[serde(default)]
    pub max_capacity: Vec<CapacityEntry>,
}

/// Per-item prefill input: text tokens and image tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefillInput {
    pub text_tokens: u64,
    pub image_tokens: u64,
}

impl LatencyProfile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let p: LatencyProfile = serde_json::from_str(&text)?;
        p.model.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        self.model.architecture
    }

    fn points(&self, stage: StageKind) -> impl Iterator<Item = &StageLatencyModel> {
        self.entries.iter().filter(move |e| e.stage == stage)
    }

    pub fn profiled_tps(&self, stage: StageKind) -> Vec<u32> {
        let mut v: Vec<u32> = self.points(stage).map(|e| e.tp).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Evaluates `eval` on the model at `tp`, interpolating linearly in TP
    /// between the nearest profiled points when `tp` was not profiled.
    fn eval_at(&self, stage: StageKind, tp: u32, eval: impl Fn(&LatencyForm) -> f64) -> Result<f64> {
        if let Some(e) = self.points(stage).find(|e| e.tp == tp) {
            return Ok(eval(&e.form));
        }
        let lo = self.points(stage).filter(|e| e.tp < tp).max_by_key(|e| e.tp);
        let hi = self.points(stage).filter(|e| e.tp > tp).min_by_key(|e| e.tp);
        match (lo, hi) {
            (Some(lo), Some(hi)) => {
                let w = f64::from(tp - lo.tp) / f64::from(hi.tp - lo.tp);
                Ok(eval(&lo.form) * (1.0 - w) + eval(&hi.form) * w)
            }
            _ => Err(Error::UnsupportedTp {
                stage,
                tp,
                supported: self.profiled_tps(stage),
            }),
        }
    }

    fn check_encoder_tp(&self, tp: u32) -> Result<()> {
        if self.model.supported_tp_encoder.contains(&tp) {
            Ok(())
        } else {
            Err(Error::UnsupportedTp {
                stage: StageKind::Encode,
                tp,
                supported: self.model.supported_tp_encoder.iter().copied().collect(),
            })
        }
    }

    /// Encoder latency for a batch of `batch_tiles` tiles.
    pub fn encode_latency(&self, batch_tiles: u32, tp: u32) -> Result<f64> {
        self.check_encoder_tp(tp)?;
        if batch_tiles == 0 {
            return Err(Error::Domain("encode batch must contain at least one tile".into()));
        }
        let tiles = f64::from(batch_tiles);
        self.eval_at(StageKind::Encode, tp, |f| match *f {
            LatencyForm::LinearInTokens { fixed_ms, per_unit_ms } => fixed_ms + per_unit_ms * tiles,
            _ => f64::NAN,
        })
    }

    /// Per-batch fixed prefill overhead.
    pub fn prefill_fixed_ms(&self, tp: u32) -> Result<f64> {
        self.eval_at(StageKind::Prefill, tp, |f| match *f {
            LatencyForm::LinearInTokens { fixed_ms, .. } => fixed_ms,
            LatencyForm::CrossAttnPrefill { fixed_ms, .. } => fixed_ms,
            _ => f64::NAN,
        })
    }

    /// Token-dependent prefill work for one request, excluding the fixed
    /// per-batch overhead.
    pub fn prefill_work_ms(&self, text_tokens: u64, image_tokens: u64, tp: u32) -> Result<f64> {
        let t = text_tokens as f64;
        let i = image_tokens as f64;
        self.eval_at(StageKind::Prefill, tp, |f| match *f {
            LatencyForm::LinearInTokens { per_unit_ms, .. } => per_unit_ms * (t + i),
            LatencyForm::CrossAttnPrefill {
                self_ms_per_token,
                cross_ms_per_token,
                ..
            } => self_ms_per_token * t + cross_ms_per_token * cross_mix(t, i),
            _ => f64::NAN,
        })
    }

    /// Single-request prefill latency.
    pub fn prefill_latency(&self, text_tokens: u64, image_tokens: u64, tp: u32) -> Result<f64> {
        if text_tokens + image_tokens == 0 {
            return Err(Error::Domain("prefill needs at least one token".into()));
        }
        Ok(self.prefill_fixed_ms(tp)? + self.prefill_work_ms(text_tokens, image_tokens, tp)?)
    }

    /// Latency of one prefill batch: a single fixed overhead plus the sum of
    /// per-request work.
    pub fn prefill_batch_latency(&self, batch: &[PrefillInput], tp: u32) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Domain("empty prefill batch".into()));
        }
        let mut total = self.prefill_fixed_ms(tp)?;
        for item in batch {
            total += self.prefill_work_ms(item.text_tokens, item.image_tokens, tp)?;
        }
        Ok(total)
    }

    /// The cross-attention part of CroAttn prefill; zero for DecOnly models.
    pub fn cross_attention_ms(&self, text_tokens: u64, image_tokens: u64, tp: u32) -> Result<f64> {
        let t = text_tokens as f64;
        let i = image_tokens as f64;
        self.eval_at(StageKind::Prefill, tp, |f| match *f {
            LatencyForm::CrossAttnPrefill { cross_ms_per_token, .. } => {
                cross_ms_per_token * cross_mix(t, i)
            }
            _ => 0.0,
        })
    }

    /// CPU preprocessing latency for `tiles` tiles on `cpu_cores` cores.
    pub fn preprocess_latency(&self, tiles: u32, cpu_cores: u32) -> Result<f64> {
        if cpu_cores == 0 {
            return Err(Error::Domain("preprocessing needs at least one CPU core".into()));
        }
        if tiles == 0 {
            return Ok(0.0);
        }
        let tiles = f64::from(tiles);
        let cores = f64::from(cpu_cores);
        self.eval_at(StageKind::Preprocess, 0, |f| match *f {
            LatencyForm::ConstantPerToken {
                per_tile_core_ms,
                floor_ms,
            } => (per_tile_core_ms * tiles / cores).max(floor_ms),
            _ => f64::NAN,
        })
    }

    /// Time between tokens for a decode batch of `batch` requests.
    pub fn tbt_latency(&self, batch: u32, tp: u32, max_batch: u32) -> Result<f64> {
        if batch == 0 {
            return Err(Error::Domain("decode batch must be non-empty".into()));
        }
        if batch > max_batch {
            return Err(Error::BatchOverflow { batch, max_batch });
        }
        let extra = f64::from(batch - 1);
        self.eval_at(StageKind::Decode, tp, |f| match *f {
            LatencyForm::AffineInBatch {
                base_ms,
                per_request_ms,
            } => base_ms + per_request_ms * extra,
            _ => f64::NAN,
        })
    }

    pub fn reference_tiles(&self) -> u32 {
        self.model.tiles(self.reference.width_px, self.reference.height_px)
    }

    pub fn reference_image_tokens(&self) -> u64 {
        u64::from(self.reference_tiles()) * u64::from(self.model.tokens_per_tile)
    }

    /// Isolated single-request TTFT when every stage runs on one instance at
    /// `tp` (the monolithic deployment), for a text-only or one-image request.
    pub fn isolated_ttft_ms(&self, with_image: bool, tp: u32, cpu_cores: u32) -> Result<f64> {
        let text = u64::from(self.reference.text_tokens);
        if !with_image {
            return self.prefill_latency(text, 0, tp);
        }
        let tiles = self.reference_tiles();
        Ok(self.preprocess_latency(tiles, cpu_cores)?
            + self.encode_latency(tiles, tp)?
            + self.prefill_latency(text, self.reference_image_tokens(), tp)?)
    }

    /// Objectives scaled from isolated runs on a monolithic instance of `tp`
    /// GPUs: a text-only request, a one-image request, and one decode step.
    pub fn baseline_slo(&self, tp: u32, cpu_cores: u32, slo_factor: f64) -> Result<SloSpec> {
        Ok(SloSpec {
            ttft_base_ms: PerModality {
                text_only: self.isolated_ttft_ms(false, tp, cpu_cores)?,
                image_text: self.isolated_ttft_ms(true, tp, cpu_cores)?,
            },
            tbt_base_ms: self.tbt_latency(1, tp, 1)?,
            slo_factor,
            percentile: 0.99,
        })
    }

    /// Fills the `max_capacity` table for the given per-stage SLO shares at
    /// every profiled TP degree.
    pub fn with_capacity_table(
        mut self,
        shares: &[(StageKind, f64)],
        opts: &CapacityOptions,
    ) -> Result<Self> {
        let mut table = Vec::new();
        for &(stage, share) in shares {
            for tp in self.profiled_tps(stage) {
                let cap = max_capacity(&self, stage, tp, share, opts)?;
                table.push(CapacityEntry {
                    stage,
                    tp,
                    slo_share_ms: share,
                    tokens_per_sec: cap.tokens_per_sec,
                });
            }
        }
        self.max_capacity = table;
        Ok(self)
    }
}

/// `x * y / (x + y)`, zero when both are zero. Symmetric, and for a fixed sum
/// maximal at `x == y`.
pub fn cross_mix(x: f64, y: f64) -> f64 {
    if x + y <= 0.0 {
        0.0
    } else {
        x * y / (x + y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn llama() -> LatencyProfile {
        calibrate(&preset_targets("llama3.2-11b").unwrap()).unwrap()
    }

    fn internvl() -> LatencyProfile {
        calibrate(&preset_targets("internvl-26b").unwrap()).unwrap()
    }

    #[test]
    fn encode_linear_in_batch() {
        let p = llama();
        let a = p.encode_latency(4, 1).unwrap();
        let b = p.encode_latency(8, 1).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-9);
        assert!(p.encode_latency(5, 1).unwrap() > a);
    }

    #[test]
    fn encode_rejects_unsupported_tp() {
        let p = calibrate(&preset_targets("nvlm-d-72b").unwrap()).unwrap();
        assert!(matches!(p.encode_latency(4, 1), Err(Error::UnsupportedTp { .. })));
        assert!(p.encode_latency(4, 4).is_ok());
    }

    #[test]
    fn deconly_prefill_ignores_modality() {
        let p = internvl();
        let a = p.prefill_latency(1000, 0, 8).unwrap();
        let b = p.prefill_latency(0, 1000, 8).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn prefill_rejects_empty() {
        assert!(matches!(llama().prefill_latency(0, 0, 4), Err(Error::Domain(_))));
    }

    #[test]
    fn cross_term_peaks_at_even_split() {
        let p = llama();
        let total = 16_000u64;
        let even = p.cross_attention_ms(8000, 8000, 4).unwrap();
        for text in (0..=total).step_by(500) {
            assert!(p.cross_attention_ms(text, total - text, 4).unwrap() <= even + 1e-9);
        }
    }

    #[test]
    fn preprocess_scales_with_cores_down_to_floor() {
        let p = llama();
        let one = p.preprocess_latency(4, 1).unwrap();
        let two = p.preprocess_latency(4, 2).unwrap();
        assert!((two - one / 2.0).abs() < 1e-9);
        assert_eq!(p.preprocess_latency(0, 3).unwrap(), 0.0);
        let floor = p.preprocess_latency(1, 10_000).unwrap();
        assert!(floor > 0.0);
        assert_eq!(floor, p.preprocess_latency(1, 20_000).unwrap());
        assert!(p.preprocess_latency(1, 0).is_err());
    }

    #[test]
    fn tbt_nearly_flat_and_bounded() {
        let p = llama();
        let one = p.tbt_latency(1, 4, 256).unwrap();
        let eight = p.tbt_latency(8, 4, 256).unwrap();
        assert!(one > 0.0);
        assert!(eight / one <= 1.2);
        // decode throughput from batch 1 to 8
        assert!((8.0 / eight) / (1.0 / one) >= 6.7);
        assert!(matches!(p.tbt_latency(9, 4, 8), Err(Error::BatchOverflow { .. })));
        assert!(p.tbt_latency(0, 4, 8).is_err());
        // lowest TBT at TP-1 for the 11B model
        assert!(p.tbt_latency(1, 1, 8).unwrap() < p.tbt_latency(1, 8, 8).unwrap());
    }

    #[test]
    fn tp_interpolation_between_points() {
        let p = llama();
        let at2 = p.prefill_latency(1000, 0, 2).unwrap();
        let at4 = p.prefill_latency(1000, 0, 4).unwrap();
        let at3 = p.prefill_latency(1000, 0, 3).unwrap();
        assert!((at3 - (at2 + at4) / 2.0).abs() < 1e-9);
        assert!(p.prefill_latency(1000, 0, 16).is_err());
    }

    #[test]
    fn profile_json_round_trip() {
        let p = llama();
        let text = serde_json::to_string(&p).unwrap();
        let back: LatencyProfile = serde_json::from_str(&text).unwrap();
        assert_eq!(p, back);
    }

    proptest::proptest! {
        #[test]
        fn cross_term_symmetric(t in 0u64..50_000, i in 0u64..50_000) {
            let p = llama();
            let a = p.cross_attention_ms(t, i, 4).unwrap();
            let b = p.cross_attention_ms(i, t, 4).unwrap();
            proptest::prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn prefill_monotone_in_tokens(t in 0u64..20_000, i in 0u64..20_000, dt in 0u64..5_000, di in 0u64..5_000) {
            for p in [llama(), internvl()] {
                let tp = p.reference.tp;
                let base = p.prefill_work_ms(t, i, tp).unwrap();
                proptest::prop_assert!(p.prefill_work_ms(t + dt, i, tp).unwrap() >= base - 1e-9);
                proptest::prop_assert!(p.prefill_work_ms(t, i + di, tp).unwrap() >= base - 1e-9);
            }
        }

        #[test]
        fn latencies_positive_and_pure(tiles in 1u32..200, text in 1u64..30_000) {
            let p = internvl();
            for tp in [1u32, 2, 4, 8] {
                let e = p.encode_latency(tiles, tp).unwrap();
                proptest::prop_assert!(e > 0.0);
                proptest::prop_assert_eq!(e, p.encode_latency(tiles, tp).unwrap());
                proptest::prop_assert!(p.prefill_latency(text, 0, tp).unwrap() > 0.0);
            }
        }
    }
}
