//! Cross-attention model with a fixed 16K-token prompt, sweeping how much of
//! it is image tokens. Each point is a single request simulated alone on a
//! TP4 instance.

use lmmsim::engine::{self, ClusterSpec, PoolSpec, SimConfig};
use lmmsim::model::{Request, RequestId};
use lmmsim::policies::{InstanceKind, PolicySet};
use lmmsim::profiles::{calibrate, preset_targets};

fn main() -> lmmsim::Result<()> {
    let p = calibrate(&preset_targets("llama3.2-11b").unwrap())?;
    let tp = 4;
    let cluster = ClusterSpec { servers: 1, gpus_per_server: 8, cpu_cores_per_server: 16 };
    let slo = p.baseline_slo(tp, cluster.cores_for(tp), 5.0)?;
    let cfg = SimConfig::new(cluster, vec![PoolSpec::new(InstanceKind::Text, 1, tp)], slo, 60_000.0);

    let per_image = p.model.tokens_per_tile;
    let tile = p.model.image(p.model.tile_edge_px, p.model.tile_edge_px);
    let mut base = None;
    println!("{:>6} {:>10} {:>10} {:>8} {:>12}", "images", "text", "ttft ms", "x text", "cross-attn");
    for k in 0..=10u32 {
        let r = Request {
            id: RequestId(0),
            arrival_ms: 0.0,
            text_tokens: (10 - k) * per_image,
            images: vec![tile; k as usize],
            output_tokens: 1,
            service_id: "sweep".into(),
        };
        let text = r.text_tokens;
        let log = engine::run(&cfg, [r], &PolicySet::monolith(), &p, 1)?;
        let ttft = log.requests[0].ttft_ms().unwrap();
        let b = *base.get_or_insert(ttft);
        let cross = p.cross_attention_ms(u64::from(text), u64::from(k * per_image), tp)?;
        println!("{k:>6} {text:>10} {ttft:>10.0} {:>8.3} {cross:>12.1}", ttft / b);
    }
    Ok(())
}
