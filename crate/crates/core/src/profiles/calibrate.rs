//! Fits stage constants from a measured TTFT breakdown.
//!
//! The unknowns are the per-tile preprocessing and encoding costs and the
//! prefill token costs at the reference TP degree. Each target contributes
//! one linear equation; the system is solved in the least-squares sense and
//! the solution is checked by re-predicting every target.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{LatencyForm, LatencyProfile, ReferenceRequest, StageLatencyModel};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelSpec, StageKind};

/// Latency at one TP degree relative to the TP-8 latency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpPoint {
    pub tp: u32,
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Preset(String),
    Inline(Box<ModelSpec>),
}

impl ModelRef {
    pub fn resolve(&self) -> Result<ModelSpec> {
        match self {
            ModelRef::Preset(name) => ModelSpec::preset(name)
                .ok_or_else(|| Error::Config(format!("unknown model preset `{name}`"))),
            ModelRef::Inline(spec) => {
                spec.validate()?;
                Ok((**spec).clone())
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            ModelRef::Preset(name) => name.clone(),
            ModelRef::Inline(spec) => spec.name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    pub model: ModelRef,
    #[serde(default = "default_ttft")]
    pub reference_ttft_ms: f64,
    pub reference_text_tokens: u32,
    #[serde(default = "default_image_px")]
    pub reference_image_px: (u32, u32),
    pub reference_cpu_cores: u32,
    /// Share of the reference single-image TTFT spent in each stage.
    pub ttft_breakdown: BTreeMap<StageKind, f64>,
    /// Part of the reference prefill time that is a fixed per-batch cost.
    pub prefill_fixed_fraction: f64,
    /// TTFT of an image-only prompt over a text-only prompt of equal length.
    #[serde(default)]
    pub mixed_modality_gain: Option<f64>,
    #[serde(default = "default_mixed_images")]
    pub mixed_modality_images: u32,
    pub tp_scaling: BTreeMap<StageKind, Vec<TpPoint>>,
    /// Relative latency growth per extra request in a batch.
    pub batch_slopes: BTreeMap<StageKind, f64>,
    pub tbt_ms: f64,
    pub preprocess_floor_ms: f64,
}

fn default_ttft() -> f64 {
    1000.0
}

fn default_image_px() -> (u32, u32) {
    (896, 896)
}

fn default_mixed_images() -> u32 {
    10
}

const BREAKDOWN_TOLERANCE: f64 = 0.01;

impl CalibrationTargets {
    pub fn share(&self, stage: StageKind) -> f64 {
        self.ttft_breakdown.get(&stage).copied().unwrap_or(0.0)
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        let bad = |msg: String| Err(Error::Calibration(msg));
        if !(self.reference_ttft_ms > 0.0) {
            return bad("reference_ttft_ms must be > 0".into());
        }
        if self.reference_cpu_cores == 0 {
            return bad("reference_cpu_cores must be >= 1".into());
        }
        for (stage, v) in &self.ttft_breakdown {
            if !matches!(stage, StageKind::Preprocess | StageKind::Encode | StageKind::Prefill) {
                return bad(format!("ttft_breakdown: stage {stage:?} is not part of TTFT"));
            }
            if !(v.is_finite() && *v >= 0.0) {
                return bad(format!("ttft_breakdown: {stage:?} share {v} is negative"));
            }
        }
        let sum: f64 = self.ttft_breakdown.values().sum();
        if sum == 0.0 {
            return bad("ttft_breakdown: all fractions are zero".into());
        }
        if (sum - 1.0).abs() > BREAKDOWN_TOLERANCE {
            return bad(format!("ttft_breakdown: fractions sum to {sum:.4}, expected 1 +/- 0.01"));
        }
        for stage in [StageKind::Preprocess, StageKind::Encode, StageKind::Prefill] {
            if self.share(stage) <= 0.0 {
                return bad(format!("ttft_breakdown: {stage:?} share must be > 0"));
            }
        }
        if !(0.0..1.0).contains(&self.prefill_fixed_fraction) {
            return bad("prefill_fixed_fraction must be in [0, 1)".into());
        }
        if model.architecture == Architecture::CroAttn {
            match self.mixed_modality_gain {
                Some(g) if g > 0.0 => {}
                _ => return bad("mixed_modality_gain is required for CroAttn models".into()),
            }
            if self.mixed_modality_images == 0 {
                return bad("mixed_modality_images must be >= 1".into());
            }
        }
        let tp = model.default_tp_text;
        for stage in [StageKind::Encode, StageKind::Prefill, StageKind::Decode] {
            let Some(table) = self.tp_scaling.get(&stage) else {
                return bad(format!("tp_scaling: missing table for {stage:?}"));
            };
            if !table.iter().any(|p| p.tp == tp) {
                return bad(format!("tp_scaling[{stage:?}]: reference TP {tp} not profiled"));
            }
            if table.iter().any(|p| !(p.relative > 0.0) || p.tp == 0) {
                return bad(format!("tp_scaling[{stage:?}]: relative latencies must be > 0"));
            }
        }
        for tp in &model.supported_tp_encoder {
            if !self.tp_scaling[&StageKind::Encode].iter().any(|p| p.tp == *tp) {
                return bad(format!("tp_scaling[Encode]: supported TP {tp} not profiled"));
            }
        }
        let slope = self.batch_slopes.get(&StageKind::Decode).copied().unwrap_or(0.0);
        if !(slope >= 0.0) {
            return bad("batch_slopes[Decode] must be >= 0".into());
        }
        if !(self.tbt_ms > 0.0) || !(self.preprocess_floor_ms >= 0.0) {
            return bad("tbt_ms must be > 0 and preprocess_floor_ms >= 0".into());
        }
        Ok(())
    }
}

fn relative(table: &[TpPoint], tp: u32) -> f64 {
    table
        .iter()
        .find(|p| p.tp == tp)
        .map(|p| p.relative)
        .unwrap_or(f64::NAN)
}

/// Solves stage constants so that the reference request reproduces the target
/// breakdown (and, for CroAttn models, the image-only vs text-only TTFT gain).
pub fn calibrate(targets: &CalibrationTargets) -> Result<LatencyProfile> {
    let model = targets.model.resolve()?;
    targets.validate(&model)?;

    let ttft = targets.reference_ttft_ms;
    let cores = f64::from(targets.reference_cpu_cores);
    let (w, h) = targets.reference_image_px;
    let tiles = f64::from(model.tiles(w, h));
    let text = f64::from(targets.reference_text_tokens);
    let image = tiles * f64::from(model.tokens_per_tile);
    let prefill_total = targets.share(StageKind::Prefill) * ttft;
    let fixed = targets.prefill_fixed_fraction * prefill_total;

    // unknowns: [prep per tile-core, encode per tile, prefill coefficients...]
    let (rows, rhs): (Vec<Vec<f64>>, Vec<f64>) = match model.architecture {
        Architecture::DecOnly => (
            vec![
                vec![tiles / cores, 0.0, 0.0],
                vec![0.0, tiles, 0.0],
                vec![0.0, 0.0, text + image],
            ],
            vec![
                targets.share(StageKind::Preprocess) * ttft,
                targets.share(StageKind::Encode) * ttft,
                prefill_total - fixed,
            ],
        ),
        Architecture::CroAttn => {
            let gain = targets.mixed_modality_gain.unwrap_or(1.0);
            let n = f64::from(targets.mixed_modality_images);
            let span = n * f64::from(model.tokens_per_tile);
            (
                vec![
                    vec![tiles / cores, 0.0, 0.0, 0.0],
                    vec![0.0, tiles, 0.0, 0.0],
                    vec![0.0, 0.0, text, super::cross_mix(text, image)],
                    vec![n / cores, n, -gain * span, 0.0],
                ],
                vec![
                    targets.share(StageKind::Preprocess) * ttft,
                    targets.share(StageKind::Encode) * ttft,
                    prefill_total - fixed,
                    (gain - 1.0) * fixed,
                ],
            )
        }
    };
    let ncols = rows[0].len();
    let a = DMatrix::from_row_iterator(rows.len(), ncols, rows.iter().flatten().copied());
    let b = DVector::from_vec(rhs);
    let x = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Calibration(format!("least-squares solve failed: {e}")))?;

    let names: &[&str] = match model.architecture {
        Architecture::DecOnly => &["preprocess per-tile cost", "encode per-tile cost", "prefill per-token cost"],
        Architecture::CroAttn => &[
            "preprocess per-tile cost",
            "encode per-tile cost",
            "prefill self-attention per-token cost (mixed_modality_gain vs encode share)",
            "prefill cross-attention cost (reference prefill share vs mixed_modality_gain)",
        ],
    };
    for (value, name) in x.iter().zip(names) {
        if !(value.is_finite() && *value > 0.0) {
            return Err(Error::Calibration(format!(
                "infeasible targets: {name} solves to {value:.6}"
            )));
        }
    }

    let ref_tp = model.default_tp_text;
    let enc_table = &targets.tp_scaling[&StageKind::Encode];
    let pf_table = &targets.tp_scaling[&StageKind::Prefill];
    let dec_table = &targets.tp_scaling[&StageKind::Decode];
    let slope = targets.batch_slopes.get(&StageKind::Decode).copied().unwrap_or(0.0);

    let mut entries = vec![StageLatencyModel {
        stage: StageKind::Preprocess,
        tp: 0,
        form: LatencyForm::ConstantPerToken {
            per_tile_core_ms: x[0],
            floor_ms: targets.preprocess_floor_ms,
        },
    }];
    for p in enc_table {
        let scale = p.relative / relative(enc_table, ref_tp);
        entries.push(StageLatencyModel {
            stage: StageKind::Encode,
            tp: p.tp,
            form: LatencyForm::LinearInTokens {
                fixed_ms: 0.0,
                per_unit_ms: x[1] * scale,
            },
        });
    }
    for p in pf_table {
        let scale = p.relative / relative(pf_table, ref_tp);
        let form = match model.architecture {
            Architecture::DecOnly => LatencyForm::LinearInTokens {
                fixed_ms: fixed * scale,
                per_unit_ms: x[2] * scale,
            },
            Architecture::CroAttn => LatencyForm::CrossAttnPrefill {
                fixed_ms: fixed * scale,
                self_ms_per_token: x[2] * scale,
                cross_ms_per_token: x[3] * scale,
            },
        };
        entries.push(StageLatencyModel {
            stage: StageKind::Prefill,
            tp: p.tp,
            form,
        });
    }
    for p in dec_table {
        let base = targets.tbt_ms * p.relative / relative(dec_table, ref_tp);
        entries.push(StageLatencyModel {
            stage: StageKind::Decode,
            tp: p.tp,
            form: LatencyForm::AffineInBatch {
                base_ms: base,
                per_request_ms: base * slope,
            },
        });
    }

    let profile = LatencyProfile {
        model,
        reference: ReferenceRequest {
            text_tokens: targets.reference_text_tokens,
            width_px: w,
            height_px: h,
            cpu_cores: targets.reference_cpu_cores,
            ttft_ms: ttft,
            tp: ref_tp,
        },
        entries,
        max_capacity: Vec::new(),
    };
    verify_round_trip(&profile, targets)?;
    Ok(profile)
}

/// Predicted share of each TTFT stage for the reference one-image request.
pub(crate) fn predicted_breakdown(p: &LatencyProfile) -> Result<BTreeMap<StageKind, f64>> {
    let tp = p.reference.tp;
    let tiles = p.reference_tiles();
    let prep = p.preprocess_latency(tiles, p.reference.cpu_cores)?;
    let enc = p.encode_latency(tiles, tp)?;
    let pf = p.prefill_latency(u64::from(p.reference.text_tokens), p.reference_image_tokens(), tp)?;
    let total = prep + enc + pf;
    Ok([
        (StageKind::Preprocess, prep / total),
        (StageKind::Encode, enc / total),
        (StageKind::Prefill, pf / total),
    ]
    .into_iter()
    .collect())
}

/// TTFT of an image-only prompt of `n` single-tile images over a text-only
/// prompt of the same token count, on one monolithic instance.
pub(crate) fn predicted_mixed_gain(p: &LatencyProfile, n: u32) -> Result<f64> {
    let tp = p.reference.tp;
    let span = u64::from(n) * u64::from(p.model.tokens_per_tile);
    let image_only = p.preprocess_latency(n, p.reference.cpu_cores)?
        + p.encode_latency(n, tp)?
        + p.prefill_latency(0, span, tp)?;
    let text_only = p.prefill_latency(span, 0, tp)?;
    Ok(image_only / text_only)
}

fn verify_round_trip(p: &LatencyProfile, targets: &CalibrationTargets) -> Result<()> {
    let shares = predicted_breakdown(p)?;
    for (stage, predicted) in &shares {
        let want = targets.share(*stage) / targets.ttft_breakdown.values().sum::<f64>();
        if (predicted - want).abs() > 0.01 {
            return Err(Error::Calibration(format!(
                "{stage:?} share re-predicts as {predicted:.4}, target {want:.4}"
            )));
        }
    }
    if p.model.architecture == Architecture::CroAttn {
        let want = targets.mixed_modality_gain.unwrap_or(1.0);
        let got = predicted_mixed_gain(p, targets.mixed_modality_images)?;
        if (got - want).abs() > 0.01 * want {
            return Err(Error::Calibration(format!(
                "mixed-modality gain re-predicts as {got:.4}, target {want:.4}"
            )));
        }
    }
    Ok(())
}

fn table(points: &[(u32, f64)]) -> Vec<TpPoint> {
    points
        .iter()
        .map(|&(tp, relative)| TpPoint { tp, relative })
        .collect()
}

/// Calibration targets shipped for each preset model.
pub fn preset_targets(name: &str) -> Option<CalibrationTargets> {
    let model = ModelSpec::preset(name)?;
    // Shared encoders share their TP behaviour.
    let small_vit = table(&[(1, 1.0), (2, 0.85), (4, 0.8), (8, 1.0)]);
    let intern_vit = table(&[(1, 3.5), (2, 2.0), (4, 1.3), (8, 1.0)]);
    let (text_tokens, breakdown, gain, enc, prefill, decode, tbt) = match model.name.as_str() {
        "llama3.2-11b" => (
            1536,
            (0.05, 0.79, 0.16),
            Some(1.5),
            small_vit,
            table(&[(1, 3.2), (2, 1.8), (4, 1.25), (8, 1.0)]),
            table(&[(1, 0.8), (2, 0.85), (4, 0.9), (8, 1.0)]),
            25.0,
        ),
        "llama3.2-90b" => (
            3072,
            (0.05, 0.65, 0.30),
            Some(1.5),
            small_vit,
            table(&[(4, 1.6), (8, 1.0)]),
            table(&[(4, 1.1), (8, 1.0)]),
            35.0,
        ),
        "llava-ov-7b" => (
            512,
            (0.05, 0.10, 0.85),
            None,
            small_vit,
            table(&[(1, 3.0), (2, 1.7), (4, 1.2), (8, 1.0)]),
            table(&[(1, 0.8), (2, 0.85), (4, 0.9), (8, 1.0)]),
            22.0,
        ),
        "llava-ov-72b" => (
            512,
            (0.05, 0.05, 0.90),
            None,
            small_vit,
            table(&[(4, 1.6), (8, 1.0)]),
            table(&[(4, 1.1), (8, 1.0)]),
            38.0,
        ),
        "internvl-26b" => (
            1024,
            (0.05, 0.25, 0.70),
            None,
            intern_vit,
            table(&[(1, 5.0), (2, 2.8), (4, 1.6), (8, 1.0)]),
            table(&[(1, 0.85), (2, 0.9), (4, 0.95), (8, 1.0)]),
            30.0,
        ),
        "nvlm-d-72b" => (
            1024,
            (0.05, 0.54, 0.41),
            None,
            table(&[(4, 1.3), (8, 1.0)]),
            table(&[(4, 1.6), (8, 1.0)]),
            table(&[(4, 1.1), (8, 1.0)]),
            38.0,
        ),
        _ => return None,
    };
    Some(CalibrationTargets {
        model: ModelRef::Preset(model.name.clone()),
        reference_ttft_ms: 1000.0,
        reference_text_tokens: text_tokens,
        reference_image_px: (896, 896),
        reference_cpu_cores: 8,
        ttft_breakdown: [
            (StageKind::Preprocess, breakdown.0),
            (StageKind::Encode, breakdown.1),
            (StageKind::Prefill, breakdown.2),
        ]
        .into_iter()
        .collect(),
        prefill_fixed_fraction: 0.05,
        mixed_modality_gain: gain,
        mixed_modality_images: 10,
        tp_scaling: [
            (StageKind::Encode, enc),
            (StageKind::Prefill, prefill),
            (StageKind::Decode, decode),
        ]
        .into_iter()
        .collect(),
        batch_slopes: [(StageKind::Decode, 0.02)].into_iter().collect(),
        tbt_ms: tbt,
        preprocess_floor_ms: 0.5,
    })
}
