//! Fits a latency profile for each preset and prints the per-stage shares of
//! a single-image request, the TP scaling of each stage and the objectives
//! derived from it.
//!
//! Profiles are written to `out/profiles/` (or the directory given as the
//! first argument); a second run reuses them.

use std::path::PathBuf;

use lmmsim::experiment::calibrate_profile;
use lmmsim::model::presets;

fn main() -> lmmsim::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"));
    for m in presets() {
        let r = calibrate_profile(None, &m.name, &out, false)?;
        let p = &r.profile;
        let reference = p.reference;
        let tiles = p.reference_tiles();
        let pre = p.preprocess_latency(tiles, reference.cpu_cores)?;
        let enc = p.encode_latency(tiles, reference.tp)?;
        let fill = p.prefill_latency(u64::from(reference.text_tokens), p.reference_image_tokens(), reference.tp)?;
        let ttft = pre + enc + fill;
        println!(
            "{} ({}, {}): ttft {ttft:.0} ms = preprocess {:.0}% + encode {:.0}% + prefill {:.0}%",
            m.name,
            if r.reused { "cached" } else { "fitted" },
            r.path.display(),
            100.0 * pre / ttft,
            100.0 * enc / ttft,
            100.0 * fill / ttft,
        );
        for tp in m.supported_tp_encoder.iter() {
            println!("  encode {tiles} tiles @ TP{tp}: {:.0} ms", p.encode_latency(tiles, *tp)?);
        }
        for tp in m.supported_tp_text.iter() {
            println!(
                "  prefill @ TP{tp}: {:.0} ms, tbt {:.1} ms",
                p.prefill_latency(u64::from(reference.text_tokens), p.reference_image_tokens(), *tp)?,
                p.tbt_latency(1, *tp, 1)?
            );
        }
        let slo = p.baseline_slo(m.default_tp_text, reference.cpu_cores, 5.0)?;
        println!(
            "  objectives x5: text {:.0} ms, image {:.0} ms, tbt {:.1} ms",
            slo.ttft_slo_ms(lmmsim::model::Modality::TextOnly),
            slo.ttft_slo_ms(lmmsim::model::Modality::ImageText),
            slo.tbt_slo_ms()
        );
    }
    Ok(())
}
