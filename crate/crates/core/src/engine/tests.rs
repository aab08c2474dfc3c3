use proptest::prelude::*;

use super::*;
use crate::model::{ModelSpec, RequestId, SloSpec, StageKind};
use crate::policies::{Autoscaler, InstanceKind, Placement, PoolCounts, Router, Scheduler, ScalingDecision, Topology};
use crate::profiles::{calibrate, preset_targets, LatencyForm, LatencyProfile};
use crate::workload::{generate, BurstEpisode, GeneratorConfig};

fn profile(name: &str) -> LatencyProfile {
    calibrate(&preset_targets(name).unwrap()).unwrap()
}

fn slo(p: &LatencyProfile) -> SloSpec {
    p.baseline_slo(p.reference.tp, 8, 5.0).unwrap()
}

fn req(p: &LatencyProfile, id: u64, t: f64, text: u32, images: usize, output: u32) -> Request {
    Request {
        id: RequestId(id),
        arrival_ms: t,
        text_tokens: text,
        images: vec![p.model.image(896, 896); images],
        output_tokens: output,
        service_id: "s".into(),
    }
}

fn policies(topology: Topology) -> PolicySet {
    PolicySet {
        topology,
        ..Default::default()
    }
}

fn config(p: &LatencyProfile, servers: u32, pools: Vec<PoolSpec>) -> SimConfig {
    let mut c = SimConfig::new(ClusterSpec::new(servers), pools, slo(p), 1e9);
    c.check_invariants = true;
    c
}

fn decoupled(p: &LatencyProfile, images: u32, text: u32) -> SimConfig {
    config(
        p,
        1,
        vec![
            PoolSpec::new(InstanceKind::Image, images, 1),
            PoolSpec::new(InstanceKind::Text, text, 4),
        ],
    )
}

fn sim(cfg: &SimConfig, pol: PolicySet, p: &LatencyProfile) -> Simulation {
    Simulation::new(cfg, &pol, p, 7).unwrap()
}

#[test]
fn isolated_ttft_is_sum_of_stages() {
    let p = profile("internvl-26b");
    let cfg = decoupled(&p, 1, 1);
    let log = run(&cfg, [req(&p, 0, 0.0, 1000, 1, 1)], &policies(Topology::Decoupled), &p, 1).unwrap();
    let tiles = p.model.image(896, 896).tiles;
    let expect = p.preprocess_latency(tiles, cfg.cluster.cores_for(1)).unwrap()
        + p.encode_latency(tiles, 1).unwrap()
        + LOCAL_TRANSFER_MS
        + p.prefill_latency(1000, u64::from(p.model.image(896, 896).image_tokens), 4).unwrap();
    let ttft = log.requests[0].ttft_ms().unwrap();
    assert!((ttft - expect).abs() < 1e-9, "{ttft} vs {expect}");
}

#[test]
fn cross_server_transfer_is_sampled() {
    let p = profile("internvl-26b");
    let mut cfg = decoupled(&p, 1, 1);
    cfg.cluster.servers = 2;
    let pol = PolicySet {
        placement: Placement::Spread,
        ..policies(Topology::Decoupled)
    };
    let log = run(&cfg, [req(&p, 0, 0.0, 1000, 1, 1)], &pol, &p, 1).unwrap();
    let r = &log.requests[0];
    let moved = r.transfer_end_ms.unwrap() - r.encode_end_ms().unwrap();
    assert!(moved > 0.0 && moved != LOCAL_TRANSFER_MS);
    assert_eq!(r.prefill_start_ms, r.transfer_end_ms);
}

#[test]
fn second_identical_request_waits_one_encode() {
    let p = profile("llama3.2-11b");
    let cfg = decoupled(&p, 1, 1);
    let reqs = [req(&p, 0, 0.0, 1000, 1, 1), req(&p, 1, 0.0, 1000, 1, 1)];
    let log = run(&cfg, reqs, &policies(Topology::Decoupled), &p, 1).unwrap();
    let enc = p.encode_latency(p.model.image(896, 896).tiles, 1).unwrap();
    let (a, b) = (log.requests[0].ttft_ms().unwrap(), log.requests[1].ttft_ms().unwrap());
    assert!((b - a - enc).abs() < 1e-9, "{a} {b} {enc}");
}

#[test]
fn text_only_has_no_transfer() {
    let p = profile("internvl-26b");
    let log = run(&decoupled(&p, 1, 1), [req(&p, 0, 0.0, 500, 0, 1)], &policies(Topology::Decoupled), &p, 1).unwrap();
    assert_eq!(log.requests[0].transfer_end_ms, None);
    assert!((log.requests[0].ttft_ms().unwrap() - p.prefill_latency(500, 0, 4).unwrap()).abs() < 1e-9);
}

#[test]
fn batch_takes_max_batch_items() {
    let p = profile("internvl-26b");
    let mut cfg = decoupled(&p, 1, 1);
    cfg.pools[1].max_batch = Some(2);
    // the first request occupies the instance while five more queue up
    let mut reqs = vec![req(&p, 0, 0.0, 4000, 0, 1)];
    reqs.extend((1..6).map(|i| req(&p, i, 1.0, 500, 0, 1)));
    let log = run(&cfg, reqs, &policies(Topology::Decoupled), &p, 1).unwrap();
    let starts: Vec<f64> = log.requests[1..].iter().map(|r| r.prefill_start_ms.unwrap()).collect();
    let busy = log.requests[0].prefill_end_ms.unwrap();
    assert_eq!(starts[0], busy);
    assert_eq!(starts[1], busy);
    assert!(starts[2] > busy);
    assert_eq!(starts[2], starts[3]);
    assert!(starts[4] > starts[3]);
}

#[test]
fn image_instances_run_one_item_at_a_time() {
    let p = profile("internvl-26b");
    let cfg = decoupled(&p, 1, 1);
    let reqs: Vec<Request> = (0..3).map(|i| req(&p, i, 0.0, 100, 1, 1)).collect();
    let log = run(&cfg, reqs, &policies(Topology::Decoupled), &p, 1).unwrap();
    let mut spans: Vec<(f64, f64)> = log
        .requests
        .iter()
        .map(|r| (r.encode_start_ms().unwrap(), r.encode_end_ms().unwrap()))
        .collect();
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in spans.windows(2) {
        assert!(w[0].1 <= w[1].0);
    }
}

#[test]
fn waiting_items_do_not_block_runnable_ones() {
    let p = profile("internvl-26b");
    let cfg = config(&p, 1, vec![PoolSpec::new(InstanceKind::Text, 1, 8)]);
    let reqs = [req(&p, 0, 0.0, 100, 2, 1), req(&p, 1, 0.0, 100, 0, 1)];
    let log = run(&cfg, reqs, &policies(Topology::Monolith), &p, 1).unwrap();
    assert_eq!(log.requests[1].prefill_start_ms, Some(0.0));
    let r0 = &log.requests[0];
    assert!(r0.prefill_start_ms.unwrap() >= r0.encode_end_ms().unwrap());
}

/// Linear encoder coefficients at `tp`.
fn encode_coeffs(p: &LatencyProfile, tp: u32) -> (f64, f64) {
    p.entries
        .iter()
        .find_map(|e| match e.form {
            LatencyForm::LinearInTokens { fixed_ms, per_unit_ms } if e.stage == StageKind::Encode && e.tp == tp => {
                Some((fixed_ms, per_unit_ms))
            }
            _ => None,
        })
        .unwrap()
}

fn encode_makespan(log: &MetricsLog) -> f64 {
    let r = &log.requests[0];
    r.encode_end_ms().unwrap() - r.encode_start_ms().unwrap()
}

#[test]
fn four_shards_quarter_makespan() {
    let p = profile("internvl-26b");
    let tiles = f64::from(p.model.image(896, 896).tiles);
    let (fixed, per_tile) = encode_coeffs(&p, 1);
    // one instance encodes all 16 images in one item; four instances take 4 each
    let serial = fixed + per_tile * 16.0 * tiles;
    let parallel = fixed + per_tile * 4.0 * tiles;
    let pol = PolicySet {
        router: Router::LeastPendingModalityAware,
        ..policies(Topology::Decoupled)
    };
    let one = run(&decoupled(&p, 1, 1), [req(&p, 0, 0.0, 100, 16, 1)], &pol, &p, 1).unwrap();
    let four = run(&decoupled(&p, 4, 1), [req(&p, 0, 0.0, 100, 16, 1)], &pol, &p, 1).unwrap();
    assert!((encode_makespan(&one) - serial).abs() < 1e-6);
    assert!((encode_makespan(&four) - parallel).abs() < 1e-6);
    assert_eq!(four.requests[0].shards.len(), 4);
    let ratio = encode_makespan(&four) / encode_makespan(&one);
    assert!((ratio - 0.25).abs() < 0.01, "{ratio}");
}

#[test]
fn decode_steps_at_batch_tbt() {
    let p = profile("internvl-26b");
    let log = run(&decoupled(&p, 1, 1), [req(&p, 0, 0.0, 100, 0, 11)], &policies(Topology::Decoupled), &p, 1).unwrap();
    let r = &log.requests[0];
    let tbt = p.tbt_latency(1, 4, 4).unwrap();
    assert_eq!(r.tbt_gaps, vec![(tbt, 10)]);
    assert!((r.completion_ms.unwrap() - r.prefill_end_ms.unwrap() - 10.0 * tbt).abs() < 1e-9);
}

#[test]
fn joining_request_enters_at_step_boundary() {
    let p = profile("internvl-26b");
    let cfg = decoupled(&p, 1, 1);
    let reqs = [req(&p, 0, 0.0, 100, 0, 40), req(&p, 1, 50.0, 100, 0, 5)];
    let log = run(&cfg, reqs, &policies(Topology::Decoupled), &p, 1).unwrap();
    let mb = log.requests.iter().map(|r| r.tbt_gaps.iter().map(|g| g.1).sum::<u32>()).collect::<Vec<_>>();
    assert_eq!(mb, vec![39, 4]);
    let t1 = p.tbt_latency(1, 4, 4).unwrap();
    let t2 = p.tbt_latency(2, 4, 4).unwrap();
    // the first request's gaps are single-batch steps until the join, then pair steps
    let gaps = &log.requests[0].tbt_gaps;
    assert_eq!(gaps[0].0, t1);
    assert!(gaps.iter().any(|g| g.0 == t2));
    // the second request's first token gap covers its wait for the boundary
    let r1 = &log.requests[1];
    assert!(r1.tbt_gaps[0].0 >= t2);
}

#[test]
fn pd_decodes_on_decode_pool() {
    let p = profile("internvl-26b");
    let cfg = config(
        &p,
        2,
        vec![
            PoolSpec::new(InstanceKind::Image, 2, 1),
            PoolSpec::new(InstanceKind::Prefill, 1, 4),
            PoolSpec::new(InstanceKind::Decode, 1, 4),
        ],
    );
    let log = run(&cfg, [req(&p, 0, 0.0, 100, 2, 8)], &policies(Topology::DecoupledPD), &p, 1).unwrap();
    let r = &log.requests[0];
    assert_ne!(r.prefill_instance, r.decode_instance);
    assert!(r.completion_ms.unwrap() > r.prefill_end_ms.unwrap());
    assert_eq!(log.completed, 1);
}

#[test]
fn tp4_text_and_two_tp2_images_share_a_server() {
    let p = profile("internvl-26b");
    let cfg = config(
        &p,
        2,
        vec![
            PoolSpec::new(InstanceKind::Image, 2, 2),
            PoolSpec::new(InstanceKind::Text, 1, 4),
        ],
    );
    let s = sim(&cfg, policies(Topology::Decoupled), &p);
    assert!(s.instances().iter().all(|i| i.server == 0));
}

#[test]
fn drained_instance_finishes_its_queue_then_stops() {
    let p = profile("internvl-26b");
    let cfg = config(&p, 1, vec![PoolSpec::new(InstanceKind::Text, 2, 4)]);
    let mut s = sim(&cfg, policies(Topology::Monolith), &p);
    for i in 0..4 {
        s.submit(req(&p, i, 0.0, 800, 1, 3)).unwrap();
    }
    let queued = s.instances()[1].queued;
    assert!(queued > 0);
    let decision = ScalingDecision {
        targets: PoolCounts::from([(InstanceKind::Text, 1)]),
        ..Default::default()
    };
    s.apply_scaling(&decision).unwrap();
    let states: Vec<InstanceState> = s.instances().iter().map(|i| i.state).collect();
    assert!(states.contains(&InstanceState::Draining));
    let draining = s.instances().iter().find(|i| i.state == InstanceState::Draining).unwrap().id;
    s.submit(req(&p, 4, 1.0, 800, 0, 1)).unwrap();
    s.run_until(1e7).unwrap();
    let recs = s.records();
    assert!(recs.iter().all(|r| r.completed()));
    assert!(recs[..4].iter().any(|r| r.prefill_instance == Some(draining)));
    assert_ne!(recs[4].prefill_instance, Some(draining));
    assert_eq!(s.instances()[draining as usize].state, InstanceState::Stopped);
}

#[test]
fn text_pool_never_scales_to_zero() {
    let p = profile("internvl-26b");
    let cfg = decoupled(&p, 1, 1);
    let mut s = sim(&cfg, policies(Topology::Decoupled), &p);
    let decision = ScalingDecision {
        targets: PoolCounts::from([(InstanceKind::Image, 1), (InstanceKind::Text, 0)]),
        ..Default::default()
    };
    s.apply_scaling(&decision).unwrap();
    assert_eq!(s.live_counts().get(InstanceKind::Text), 1);
    assert!(s.scaling_log()[0].truncated);
}

#[test]
fn starting_instance_takes_no_work_until_ready() {
    let p = profile("internvl-26b");
    let mut cfg = decoupled(&p, 1, 1);
    cfg.cluster.servers = 2;
    cfg.start_delay_ms = 1000.0;
    let mut s = sim(&cfg, policies(Topology::Decoupled), &p);
    let decision = ScalingDecision {
        targets: PoolCounts::from([(InstanceKind::Image, 1), (InstanceKind::Text, 2)]),
        ..Default::default()
    };
    s.apply_scaling(&decision).unwrap();
    let new = s.instances().len() as u32 - 1;
    assert_eq!(s.instances()[new as usize].state, InstanceState::Starting);
    for i in 0..4 {
        s.submit(req(&p, i, 0.0, 100, 0, 1)).unwrap();
    }
    s.run_until(999.0).unwrap();
    assert_eq!(s.instances()[new as usize].queued, 0);
    s.run_until(1000.0).unwrap();
    assert_eq!(s.instances()[new as usize].state, InstanceState::Active);
    for i in 4..8 {
        s.submit(req(&p, i, 1000.0, 100, 0, 1)).unwrap();
    }
    s.run_until(1e7).unwrap();
    assert!(s.records()[4..].iter().any(|r| r.prefill_instance == Some(new)));
}

#[test]
fn unplaceable_pools_are_rejected() {
    let p = profile("internvl-26b");
    let cfg = config(&p, 1, vec![PoolSpec::new(InstanceKind::Text, 3, 4)]);
    assert!(matches!(
        Simulation::new(&cfg, &policies(Topology::Monolith), &p, 0),
        Err(crate::Error::Config(_))
    ));
}

fn bursty(rate: f64, image_fraction: f64, seed: u64, horizon: f64) -> GeneratorConfig {
    GeneratorConfig {
        base_rate: rate,
        image_request_fraction: image_fraction,
        burst_episodes: vec![BurstEpisode {
            start_ms: horizon * 0.3,
            duration_ms: horizon * 0.2,
            rate_multiplier: 3.0,
            image_multiplier: 2.0,
            image_only: true,
        }],
        seed,
        ..Default::default()
    }
}

fn scaled_run(seed: u64, rate: f64, frac: f64, topology: Topology, scheduler: Scheduler) -> MetricsLog {
    let p = profile("internvl-26b");
    let model = ModelSpec::preset("internvl-26b").unwrap();
    let horizon = 120_000.0;
    let pools = match topology {
        Topology::Monolith => vec![PoolSpec::new(InstanceKind::Text, 2, 4)],
        _ => vec![
            PoolSpec::new(InstanceKind::Image, 2, 1),
            PoolSpec::new(InstanceKind::Text, 1, 4),
        ],
    };
    let mut cfg = config(&p, 2, pools);
    cfg.horizon_ms = horizon;
    cfg.autoscale_period_ms = 15_000.0;
    cfg.start_delay_ms = 5_000.0;
    let pol = PolicySet {
        topology,
        scheduler,
        autoscaler: Autoscaler::TokenAware,
        router: if topology == Topology::Monolith {
            Router::RoundRobin
        } else {
            Router::LeastPendingModalityAware
        },
        ..Default::default()
    };
    let w = generate(&bursty(rate, frac, seed, horizon), &model, horizon).unwrap();
    run(&cfg, w, &pol, &p, seed).unwrap()
}

#[test]
fn reruns_are_bit_identical() {
    let a = scaled_run(3, 2.0, 0.5, Topology::Decoupled, Scheduler::SLOPriority);
    let b = scaled_run(3, 2.0, 0.5, Topology::Decoupled, Scheduler::SLOPriority);
    assert_eq!(a, b);
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    a.write_requests_csv(&mut ca).unwrap();
    b.write_requests_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
    assert!(!a.scaling.is_empty());
}

fn causal(r: &RequestRecord) -> bool {
    let le = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => a <= b,
        _ => true,
    };
    let shards_ok = r.shards.iter().all(|s| {
        le(Some(r.arrival_ms), s.preprocess_start_ms)
            && le(s.preprocess_start_ms, s.preprocess_end_ms)
            && le(s.preprocess_end_ms, s.encode_start_ms)
            && le(s.encode_start_ms, s.encode_end_ms)
            && le(s.encode_end_ms, r.transfer_end_ms.or(r.prefill_start_ms))
            && le(s.encode_end_ms, r.prefill_start_ms)
    });
    let all_shards_done = r.prefill_start_ms.is_none() || r.shards.iter().all(|s| s.encode_end_ms.is_some());
    shards_ok
        && all_shards_done
        && le(Some(r.arrival_ms), r.prefill_start_ms)
        && le(r.transfer_end_ms, r.prefill_start_ms)
        && le(r.prefill_start_ms, r.prefill_end_ms)
        && le(r.prefill_end_ms, r.completion_ms)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    /// Invariants are checked after every event; the run itself errors on
    /// any counter, GPU-accounting or work-conservation breach.
    #[test]
    fn scaling_runs_conserve_and_stay_causal(
        seed in 0u64..1000,
        rate in 0.5f64..4.0,
        frac in 0.1f64..0.9,
        mono in any::<bool>(),
        prio in any::<bool>(),
    ) {
        let topology = if mono { Topology::Monolith } else { Topology::Decoupled };
        let scheduler = if prio { Scheduler::SLOPriority } else { Scheduler::FIFO };
        let log = scaled_run(seed, rate, frac, topology, scheduler);
        prop_assert_eq!(log.arrived, log.completed + log.in_flight);
        prop_assert_eq!(log.arrived, log.requests.len());
        prop_assert_eq!(log.completed, log.requests.iter().filter(|r| r.completed()).count());
        prop_assert!(log.requests.iter().all(causal));
        prop_assert!(log.allocation.iter().all(|a| a.gpus <= log.inventory_gpus));
        for r in log.requests.iter().filter(|r| r.completed()) {
            let tokens: u32 = r.tbt_gaps.iter().map(|g| g.1).sum();
            prop_assert_eq!(tokens + 1, r.output_tokens);
        }
    }
}
