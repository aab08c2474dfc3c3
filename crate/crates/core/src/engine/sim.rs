use std::collections::{BTreeMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Request, StageKind};
use crate::policies::{
    autoscale, place, place_incremental, pool_capacities, priority_key, route_image, route_text,
    select_max_batch, stage_slo_shares, Autoscaler, InstanceKind, LoadWindow, PolicySet, PoolCapacity, PoolCounts,
    PoolLoad, QueuedItem, RouteCursor, ScaleGuard, ScalingDecision, ServerSlots,
};
use crate::profiles::{CapacityOptions, LatencyProfile, PrefillInput};

use super::events::{EventKind, EventQueue, ARRIVAL_RANK};
use super::log::{AllocationPoint, MetricsLog, RequestRecord, ScalingRecord, ShardRecord};
use super::shard::encode_shard;
use super::transfer::LOCAL_TRANSFER_MS;
use super::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceState {
    Starting,
    Active,
    Draining,
    Stopped,
}

/// Public snapshot of one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceInfo {
    pub id: u32,
    pub kind: InstanceKind,
    pub tp: u32,
    pub server: u32,
    pub state: InstanceState,
    pub max_batch: u32,
    pub pending_text_tokens: u64,
    pub pending_image_tokens: u64,
    pub queued: usize,
}

#[derive(Debug, Clone)]
struct Item {
    req: usize,
    stage: StageKind,
    tiles: u32,
    text_tokens: u64,
    image_tokens: u64,
    enqueue_ms: f64,
    ready_ms: f64,
    deps_left: u32,
    shard: usize,
    /// Item on the same instance that waits for this one.
    then: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
struct DecodeRun {
    start_ms: f64,
    step_ms: f64,
    steps: u32,
}

#[derive(Debug, Default)]
struct DecodeLane {
    active: Vec<usize>,
    waiting: VecDeque<usize>,
    run: Option<DecodeRun>,
    epoch: u64,
}

impl DecodeLane {
    fn load(&self) -> usize {
        self.active.len() + self.waiting.len()
    }
}

#[derive(Debug)]
struct Instance {
    id: u32,
    kind: InstanceKind,
    tp: u32,
    server: u32,
    state: InstanceState,
    max_batch: u32,
    decode_max_batch: u32,
    cpu_cores: u32,
    cpu_queue: VecDeque<u64>,
    cpu_busy: bool,
    queue: Vec<u64>,
    batch: Vec<u64>,
    busy_until_ms: f64,
    pending_text: u64,
    pending_image: u64,
    decode: DecodeLane,
    /// KV transfers on their way to this instance.
    inbound: u32,
}

impl Instance {
    fn serving(&self) -> bool {
        matches!(self.state, InstanceState::Active | InstanceState::Draining)
    }

    fn idle(&self) -> bool {
        self.queue.is_empty()
            && self.batch.is_empty()
            && self.cpu_queue.is_empty()
            && !self.cpu_busy
            && self.decode.load() == 0
            && self.inbound == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct Server {
    gpus_total: u32,
    gpus_used: u32,
}

#[derive(Debug)]
struct ReqState {
    req: Request,
    rec: RequestRecord,
    shards_left: u32,
    producers: Vec<u32>,
    remaining: u32,
    last_token_ms: f64,
}

#[derive(Debug, Clone, Copy)]
enum Waiting {
    Arrival(usize),
    Prefill { req: usize, transfer: bool },
    Decode(usize),
}

#[derive(Debug, Default)]
struct WindowAcc {
    text_tokens: f64,
    image_tokens: f64,
    work_ms: f64,
    output_tokens: f64,
    finished: u64,
    met: u64,
    delay: BTreeMap<StageKind, (f64, u64)>,
}

/// One simulation run. Build with [`Simulation::new`], then [`Simulation::run`].
#[derive(Debug)]
pub struct Simulation {
    cfg: SimConfig,
    policies: PolicySet,
    profile: LatencyProfile,
    rng: ChaCha8Rng,
    now: f64,
    events: EventQueue,
    items: Vec<Option<Item>>,
    instances: Vec<Instance>,
    servers: Vec<Server>,
    reqs: Vec<ReqState>,
    cursors: BTreeMap<InstanceKind, RouteCursor>,
    waiting: BTreeMap<InstanceKind, VecDeque<Waiting>>,
    tps: BTreeMap<InstanceKind, u32>,
    max_batch: BTreeMap<InstanceKind, u32>,
    decode_max_batch: BTreeMap<InstanceKind, u32>,
    caps: Option<PoolCapacity>,
    guard: ScaleGuard,
    acc: WindowAcc,
    aging_ms: Option<f64>,
    /// Latency a GPU batch may reach before it stops admitting items, per stage.
    batch_budget_ms: BTreeMap<StageKind, f64>,
    gpus_in_use: u32,
    last_alloc_ms: f64,
    log: MetricsLog,
}

impl Simulation {
    pub fn new(config: &SimConfig, policies: &PolicySet, profile: &LatencyProfile, seed: u64) -> Result<Self> {
        config.validate(policies)?;
        let topo = policies.topology;
        let mut tps = BTreeMap::new();
        let mut max_batch = BTreeMap::new();
        let mut decode_max_batch = BTreeMap::new();
        for p in &config.pools {
            tps.insert(p.kind, p.tp);
            let encodes = p.kind == InstanceKind::Image || (!topo.has_image_pool() && p.kind == topo.prefill_kind());
            if encodes && !profile.model.supported_tp_encoder.contains(&p.tp) {
                return Err(Error::Config(format!(
                    "pools: {} tp {} is not a supported encoder degree {:?}",
                    p.kind.as_str(),
                    p.tp,
                    profile.model.supported_tp_encoder
                )));
            }
            if p.kind != InstanceKind::Image {
                profile.prefill_fixed_ms(p.tp)?;
                profile.tbt_latency(1, p.tp, 1)?;
            }
            let mb = match p.max_batch {
                Some(b) => b,
                None => select_max_batch(p.kind, p.tp, profile, &config.slo)?,
            };
            max_batch.insert(p.kind, mb);
            let dmb = match p.decode_max_batch {
                Some(b) => b,
                None if p.kind == InstanceKind::Image => 1,
                None => select_max_batch(InstanceKind::Decode, p.tp, profile, &config.slo)?,
            };
            decode_max_batch.insert(p.kind, dmb);
        }

        let caps = if policies.autoscaler == Autoscaler::TokenAware {
            let text_kind = topo.prefill_kind();
            let decode_kind = if topo.is_pd() { InstanceKind::Decode } else { text_kind };
            let tp_text = tps[&text_kind];
            let tp_image = tps.get(&InstanceKind::Image).copied().unwrap_or(tp_text);
            let mut caps = pool_capacities(
                profile,
                &config.slo,
                topo,
                tp_image,
                tp_text,
                decode_max_batch[&decode_kind],
                &CapacityOptions::default(),
            )?;
            if topo.is_pd() {
                let tp = tps[&InstanceKind::Decode];
                let b = decode_max_batch[&InstanceKind::Decode];
                caps.decode_tokens_per_sec = f64::from(b) * 1000.0 / profile.tbt_latency(b, tp, b)?;
            }
            Some(caps)
        } else {
            None
        };

        let aging_ms = config.aging_ms;
        let shares = stage_slo_shares(profile, &config.slo)?;
        let batch_budget_ms = BTreeMap::from([(StageKind::Encode, shares.encode_ms), (StageKind::Prefill, shares.prefill_ms)]);
        let servers = (0..config.cluster.servers)
            .map(|_| Server {
                gpus_total: config.cluster.gpus_per_server,
                gpus_used: 0,
            })
            .collect();
        let mut sim = Simulation {
            cfg: config.clone(),
            policies: *policies,
            profile: profile.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            now: 0.0,
            events: EventQueue::default(),
            items: Vec::new(),
            instances: Vec::new(),
            servers,
            reqs: Vec::new(),
            cursors: BTreeMap::new(),
            waiting: BTreeMap::new(),
            tps,
            max_batch,
            decode_max_batch,
            caps,
            guard: ScaleGuard::default(),
            acc: WindowAcc::default(),
            aging_ms,
            batch_budget_ms,
            gpus_in_use: 0,
            last_alloc_ms: 0.0,
            log: MetricsLog {
                horizon_ms: config.horizon_ms,
                inventory_gpus: config.cluster.inventory(),
                ..Default::default()
            },
        };

        // prefill-side pools first so placement sees them in a stable order
        let mut wanted = Vec::new();
        for &kind in topo.kinds().iter().rev() {
            let p = config.pool(kind).unwrap();
            wanted.extend(std::iter::repeat_n((kind, p.tp), p.count as usize));
        }
        let outcome = place(&wanted, &sim.slots(), policies.placement);
        if outcome.unplaced > 0 {
            let need: u32 = wanted.iter().map(|w| w.1).sum();
            return Err(Error::Config(format!(
                "pools: {} instance(s) do not fit; the pools need {need} GPUs and the cluster has {}",
                outcome.unplaced,
                config.cluster.inventory()
            )));
        }
        for (&(kind, _), server) in wanted.iter().zip(&outcome.servers) {
            sim.add_instance(kind, server.unwrap(), InstanceState::Active);
        }
        sim.record_allocation();
        Ok(sim)
    }

    pub fn now_ms(&self) -> f64 {
        self.now
    }

    pub fn instances(&self) -> Vec<InstanceInfo> {
        self.instances
            .iter()
            .map(|i| InstanceInfo {
                id: i.id,
                kind: i.kind,
                tp: i.tp,
                server: i.server,
                state: i.state,
                max_batch: i.max_batch,
                pending_text_tokens: i.pending_text,
                pending_image_tokens: i.pending_image,
                queued: i.queue.len() + i.batch.len() + i.cpu_queue.len() + usize::from(i.cpu_busy),
            })
            .collect()
    }

    /// Counts of starting or active instances per kind.
    pub fn live_counts(&self) -> PoolCounts {
        let mut c = PoolCounts::default();
        for &k in self.policies.topology.kinds() {
            c.set(k, 0);
        }
        for i in &self.instances {
            if matches!(i.state, InstanceState::Starting | InstanceState::Active) {
                c.set(i.kind, c.get(i.kind) + 1);
            }
        }
        c
    }

    pub fn tps(&self) -> &BTreeMap<InstanceKind, u32> {
        &self.tps
    }

    /// Runs the workload to the horizon plus drain time.
    pub fn run(mut self, workload: impl IntoIterator<Item = Request>) -> Result<MetricsLog> {
        let horizon = self.cfg.horizon_ms;
        let end = horizon + self.cfg.drain_ms;
        let mut arrivals = workload.into_iter().take_while(|r| r.arrival_ms < horizon).peekable();
        if self.caps.is_some() && self.cfg.autoscale_period_ms < horizon {
            self.events.push(self.cfg.autoscale_period_ms, 0, EventKind::AutoscaleTick);
        }
        loop {
            let next_event = self.events.peek_key();
            let take_arrival = match (arrivals.peek(), next_event) {
                (None, _) => false,
                (Some(_), None) => true,
                (Some(r), Some(k)) => (r.arrival_ms.max(0.0), ARRIVAL_RANK, r.id.0) < (k.time_ms(), k.rank(), k.request()),
            };
            if take_arrival {
                let r = arrivals.next().unwrap();
                if r.arrival_ms < self.now {
                    return Err(Error::Domain(format!(
                        "workload is not sorted by arrival: request {} at {} ms after {} ms",
                        r.id, r.arrival_ms, self.now
                    )));
                }
                self.now = r.arrival_ms.max(0.0);
                self.log.events += 1;
                self.on_arrival(r)?;
            } else {
                let Some(k) = next_event else { break };
                if k.time_ms() > end {
                    break;
                }
                self.process_next_event()?;
                continue;
            }
            if self.cfg.check_invariants {
                self.check_invariants()?;
            }
        }
        let in_flight = self.log.arrived - self.log.completed;
        if in_flight > 0 && self.events.len() == 0 {
            return Err(Error::Deadlock {
                time_ms: self.now,
                dump: self.dump(),
            });
        }
        self.now = self.now.max(horizon).min(end.max(self.now));
        self.advance_gpu_seconds();
        self.log.end_ms = self.now;
        self.log.in_flight = in_flight;
        self.log.requests = self.reqs.into_iter().map(|r| r.rec).collect();
        Ok(self.log)
    }

    fn process_next_event(&mut self) -> Result<bool> {
        let Some(ev) = self.events.pop() else { return Ok(false) };
        self.now = ev.key.time_ms();
        self.log.events += 1;
        self.dispatch(ev.kind)?;
        if self.cfg.check_invariants {
            self.check_invariants()?;
        }
        Ok(true)
    }

    fn dispatch(&mut self, kind: EventKind) -> Result<()> {
        match kind {
            EventKind::InstanceReady { instance } => self.on_ready(instance),
            EventKind::PreprocessDone { instance, item } => self.on_preprocess_done(instance, item),
            EventKind::GpuBatchDone { instance } => self.on_gpu_done(instance),
            EventKind::TransferDone { instance, item } => {
                self.release(item);
                self.try_start_gpu(instance)
            }
            EventKind::KvTransferDone { instance, req } => {
                self.inst_mut(instance).inbound -= 1;
                self.decode_join(instance, req)
            }
            EventKind::DecodeStep { instance, epoch } => self.on_decode_step(instance, epoch),
            EventKind::AutoscaleTick => self.on_tick(),
        }
    }

    fn inst(&self, id: u32) -> &Instance {
        &self.instances[id as usize]
    }

    fn inst_mut(&mut self, id: u32) -> &mut Instance {
        &mut self.instances[id as usize]
    }

    fn slots(&self) -> Vec<ServerSlots> {
        let mut has_text = vec![false; self.servers.len()];
        for i in &self.instances {
            if i.state != InstanceState::Stopped && i.kind != InstanceKind::Image {
                has_text[i.server as usize] = true;
            }
        }
        self.servers
            .iter()
            .enumerate()
            .map(|(s, srv)| ServerSlots {
                id: s as u32,
                free_gpus: srv.gpus_total - srv.gpus_used,
                has_text: has_text[s],
            })
            .collect()
    }

    fn add_instance(&mut self, kind: InstanceKind, server: u32, state: InstanceState) -> u32 {
        let id = self.instances.len() as u32;
        let tp = self.tps[&kind];
        self.servers[server as usize].gpus_used += tp;
        self.instances.push(Instance {
            id,
            kind,
            tp,
            server,
            state,
            max_batch: self.max_batch[&kind],
            decode_max_batch: self.decode_max_batch[&kind],
            cpu_cores: self.cfg.cluster.cores_for(tp),
            cpu_queue: VecDeque::new(),
            cpu_busy: false,
            queue: Vec::new(),
            batch: Vec::new(),
            busy_until_ms: 0.0,
            pending_text: 0,
            pending_image: 0,
            decode: DecodeLane::default(),
            inbound: 0,
        });
        id
    }

    fn advance_gpu_seconds(&mut self) {
        let dt = self.now - self.last_alloc_ms;
        if dt > 0.0 {
            self.log.gpu_seconds += f64::from(self.gpus_in_use) * dt / 1000.0;
        }
        self.last_alloc_ms = self.now;
    }

    fn record_allocation(&mut self) {
        self.advance_gpu_seconds();
        let mut counts = BTreeMap::new();
        let mut gpus = 0;
        for i in &self.instances {
            if i.state != InstanceState::Stopped {
                *counts.entry(i.kind).or_insert(0) += 1;
                gpus += i.tp;
            }
        }
        self.gpus_in_use = gpus;
        let point = AllocationPoint {
            time_ms: self.now,
            gpus,
            instances: counts,
        };
        match self.log.allocation.last_mut() {
            Some(last) if last.time_ms == self.now => *last = point,
            _ => self.log.allocation.push(point),
        }
    }

    fn stop_instance(&mut self, id: u32) {
        let (server, tp) = {
            let i = self.inst_mut(id);
            i.state = InstanceState::Stopped;
            (i.server, i.tp)
        };
        self.servers[server as usize].gpus_used -= tp;
        self.record_allocation();
    }

    fn maybe_stop(&mut self, id: u32) {
        let i = self.inst(id);
        if i.state == InstanceState::Draining && i.idle() {
            self.stop_instance(id);
        }
    }

    /// Routing view of a pool. Instances that also decode count the tokens
    /// their resident requests have yet to generate as pending text.
    fn pool_loads(&self, kind: InstanceKind) -> Vec<PoolLoad> {
        self.instances
            .iter()
            .filter(|i| i.kind == kind && i.state == InstanceState::Active)
            .map(|i| {
                let decoding: u64 = i
                    .decode
                    .active
                    .iter()
                    .chain(&i.decode.waiting)
                    .map(|&r| u64::from(self.reqs[r].remaining))
                    .sum();
                PoolLoad {
                    id: i.id,
                    pending_text: i.pending_text + decoding,
                    pending_image: i.pending_image,
                }
            })
            .collect()
    }

    fn wait(&mut self, kind: InstanceKind, w: Waiting) {
        self.waiting.entry(kind).or_default().push_back(w);
    }

    fn new_item(&mut self, item: Item) -> u64 {
        self.items.push(Some(item));
        (self.items.len() - 1) as u64
    }

    fn item(&self, id: u64) -> &Item {
        self.items[id as usize].as_ref().expect("live item")
    }

    fn enqueue_gpu(&mut self, inst: u32, id: u64) {
        let (stage, text, image) = {
            let it = self.item(id);
            (it.stage, it.text_tokens, it.image_tokens)
        };
        let i = self.inst_mut(inst);
        i.queue.push(id);
        match stage {
            StageKind::Encode => i.pending_image += image,
            _ => {
                i.pending_text += text;
                i.pending_image += image;
            }
        }
    }

    /// Marks one dependency of `id` as met.
    fn release(&mut self, id: u64) {
        let now = self.now;
        let it = self.items[id as usize].as_mut().expect("live item");
        it.deps_left -= 1;
        if it.deps_left == 0 {
            it.ready_ms = now;
        }
    }

    fn on_arrival(&mut self, req: Request) -> Result<()> {
        req.validate()?;
        let idx = self.reqs.len();
        let image_tokens = req.image_tokens();
        let tiles = req.tiles();
        let text = u64::from(req.text_tokens);
        self.acc.text_tokens += text as f64;
        self.acc.image_tokens += image_tokens as f64;
        self.acc.output_tokens += f64::from(req.output_tokens);
        if self.caps.is_some() && !self.policies.topology.has_image_pool() {
            let tp = self.tps[&self.policies.topology.prefill_kind()];
            let enc = if tiles > 0 { self.profile.encode_latency(tiles, tp)? } else { 0.0 };
            self.acc.work_ms += enc + self.profile.prefill_latency(text, image_tokens, tp)?;
        }
        let rec = RequestRecord {
            id: req.id.0,
            arrival_ms: req.arrival_ms,
            modality: req.slo_class(),
            service_id: req.service_id.clone(),
            text_tokens: text,
            image_tokens,
            images: req.images.len() as u32,
            output_tokens: req.output_tokens,
            shards: Vec::new(),
            transfer_end_ms: None,
            prefill_instance: None,
            prefill_start_ms: None,
            prefill_end_ms: None,
            decode_instance: None,
            completion_ms: None,
            tbt_gaps: Vec::new(),
        };
        self.reqs.push(ReqState {
            remaining: req.output_tokens,
            req,
            rec,
            shards_left: 0,
            producers: Vec::new(),
            last_token_ms: 0.0,
        });
        self.log.arrived += 1;
        self.dispatch_arrival(idx)
    }

    fn dispatch_arrival(&mut self, idx: usize) -> Result<()> {
        let topo = self.policies.topology;
        let has_images = !self.reqs[idx].req.images.is_empty();
        if topo.has_image_pool() {
            if has_images {
                self.dispatch_encode(idx)
            } else {
                self.dispatch_prefill(idx, false)
            }
        } else {
            self.dispatch_monolith(idx)
        }
    }

    /// Shards the images over Image instances; each shard is a preprocess
    /// item followed by an encode item.
    fn dispatch_encode(&mut self, idx: usize) -> Result<()> {
        let pool = self.pool_loads(InstanceKind::Image);
        if pool.is_empty() {
            self.wait(InstanceKind::Image, Waiting::Arrival(idx));
            return Ok(());
        }
        let images = std::mem::take(&mut self.reqs[idx].req.images);
        let cursor = self.cursors.entry(InstanceKind::Image).or_default();
        let targets = route_image(
            images.len(),
            &pool,
            self.policies.router,
            self.cfg.max_fanout as usize,
            cursor,
        );
        let shards = encode_shard(&images, targets.len());
        let arrival = self.reqs[idx].req.arrival_ms;
        self.reqs[idx].shards_left = shards.len() as u32;
        for (s, (shard, &inst)) in shards.iter().zip(&targets).enumerate() {
            self.reqs[idx].rec.shards.push(ShardRecord {
                instance: inst,
                images: shard.images.len() as u32,
                tiles: shard.tiles,
                ..Default::default()
            });
            let enc = self.new_item(Item {
                req: idx,
                stage: StageKind::Encode,
                tiles: shard.tiles,
                text_tokens: 0,
                image_tokens: shard.image_tokens,
                enqueue_ms: arrival,
                ready_ms: f64::INFINITY,
                deps_left: 1,
                shard: s,
                then: None,
            });
            self.enqueue_gpu(inst, enc);
            let pre = self.new_item(Item {
                req: idx,
                stage: StageKind::Preprocess,
                tiles: shard.tiles,
                text_tokens: 0,
                image_tokens: 0,
                enqueue_ms: arrival,
                ready_ms: self.now,
                deps_left: 0,
                shard: s,
                then: Some(enc),
            });
            self.inst_mut(inst).cpu_queue.push_back(pre);
            self.try_start_cpu(inst)?;
        }
        self.reqs[idx].req.images = images;
        Ok(())
    }

    /// Routes the prefill of a request to the text side. After encoding the
    /// prefill waits for the image-token transfer.
    fn dispatch_prefill(&mut self, idx: usize, transfer: bool) -> Result<()> {
        let kind = self.policies.topology.prefill_kind();
        let pool = self.pool_loads(kind);
        if pool.is_empty() {
            self.wait(kind, Waiting::Prefill { req: idx, transfer });
            return Ok(());
        }
        let cursor = self.cursors.entry(kind).or_default();
        let target = route_text(&pool, self.profile.architecture(), self.policies.router, cursor)
            .expect("non-empty pool");
        let r = &self.reqs[idx];
        let item = Item {
            req: idx,
            stage: StageKind::Prefill,
            tiles: 0,
            text_tokens: u64::from(r.req.text_tokens),
            image_tokens: r.rec.image_tokens,
            enqueue_ms: r.req.arrival_ms,
            ready_ms: self.now,
            deps_left: u32::from(transfer),
            shard: 0,
            then: None,
        };
        let id = self.new_item(item);
        self.enqueue_gpu(target, id);
        self.reqs[idx].rec.prefill_instance = Some(target);
        if transfer {
            let server = self.inst(target).server;
            let local = self.reqs[idx]
                .producers
                .iter()
                .all(|&p| self.inst(p).server == server);
            let lat = if local {
                LOCAL_TRANSFER_MS
            } else {
                self.cfg.transfer.sample_ms(&mut self.rng)
            };
            let at = self.now + lat;
            self.reqs[idx].rec.transfer_end_ms = Some(at);
            let rid = self.reqs[idx].rec.id;
            self.events.push(at, rid, EventKind::TransferDone { instance: target, item: id });
            Ok(())
        } else {
            self.try_start_gpu(target)
        }
    }

    /// Every stage on one instance: preprocess, then encode, then prefill.
    fn dispatch_monolith(&mut self, idx: usize) -> Result<()> {
        let kind = self.policies.topology.prefill_kind();
        let pool = self.pool_loads(kind);
        if pool.is_empty() {
            self.wait(kind, Waiting::Arrival(idx));
            return Ok(());
        }
        let cursor = self.cursors.entry(kind).or_default();
        let target = route_text(&pool, self.profile.architecture(), self.policies.router, cursor)
            .expect("non-empty pool");
        let r = &self.reqs[idx];
        let arrival = r.req.arrival_ms;
        let tiles = r.req.tiles();
        let n_images = r.req.images.len() as u32;
        let prefill = Item {
            req: idx,
            stage: StageKind::Prefill,
            tiles: 0,
            text_tokens: u64::from(r.req.text_tokens),
            image_tokens: r.rec.image_tokens,
            enqueue_ms: arrival,
            ready_ms: self.now,
            deps_left: u32::from(n_images > 0),
            shard: 0,
            then: None,
        };
        let image_tokens = r.rec.image_tokens;
        self.reqs[idx].rec.prefill_instance = Some(target);
        let pf = self.new_item(prefill);
        self.enqueue_gpu(target, pf);
        if n_images > 0 {
            self.reqs[idx].shards_left = 1;
            self.reqs[idx].rec.shards.push(ShardRecord {
                instance: target,
                images: n_images,
                tiles,
                ..Default::default()
            });
            let enc = self.new_item(Item {
                req: idx,
                stage: StageKind::Encode,
                tiles,
                text_tokens: 0,
                image_tokens,
                enqueue_ms: arrival,
                ready_ms: f64::INFINITY,
                deps_left: 1,
                shard: 0,
                then: Some(pf),
            });
            self.enqueue_gpu(target, enc);
            let pre = self.new_item(Item {
                req: idx,
                stage: StageKind::Preprocess,
                tiles,
                text_tokens: 0,
                image_tokens: 0,
                enqueue_ms: arrival,
                ready_ms: self.now,
                deps_left: 0,
                shard: 0,
                then: Some(enc),
            });
            self.inst_mut(target).cpu_queue.push_back(pre);
            self.try_start_cpu(target)
        } else {
            self.try_start_gpu(target)
        }
    }

    fn note_delay(&mut self, stage: StageKind, ready_ms: f64) {
        let e = self.acc.delay.entry(stage).or_insert((0.0, 0));
        e.0 += (self.now - ready_ms).max(0.0);
        e.1 += 1;
    }

    fn try_start_cpu(&mut self, inst: u32) -> Result<()> {
        let i = self.inst(inst);
        if i.cpu_busy || !i.serving() {
            return Ok(());
        }
        let Some(&id) = i.cpu_queue.front() else { return Ok(()) };
        let cores = i.cpu_cores;
        let (req, shard, tiles, ready) = {
            let it = self.item(id);
            (it.req, it.shard, it.tiles, it.ready_ms)
        };
        let lat = self.profile.preprocess_latency(tiles, cores)?;
        let i = self.inst_mut(inst);
        i.cpu_queue.pop_front();
        i.cpu_busy = true;
        self.reqs[req].rec.shards[shard].preprocess_start_ms = Some(self.now);
        self.note_delay(StageKind::Preprocess, ready);
        let rid = self.reqs[req].rec.id;
        self.events
            .push(self.now + lat, rid, EventKind::PreprocessDone { instance: inst, item: id });
        Ok(())
    }

    fn on_preprocess_done(&mut self, inst: u32, id: u64) -> Result<()> {
        let it = self.items[id as usize].take().expect("live item");
        self.reqs[it.req].rec.shards[it.shard].preprocess_end_ms = Some(self.now);
        self.inst_mut(inst).cpu_busy = false;
        if let Some(next) = it.then {
            self.release(next);
        }
        self.try_start_cpu(inst)?;
        self.try_start_gpu(inst)?;
        self.maybe_stop(inst);
        Ok(())
    }

    fn queued_view(&self, id: u64) -> QueuedItem {
        let it = self.item(id);
        QueuedItem {
            id,
            enqueue_ms: it.enqueue_ms,
            tokens: it.text_tokens + it.image_tokens,
            runnable: it.deps_left == 0,
            aging_ms: self
                .aging_ms
                .unwrap_or_else(|| 0.5 * self.cfg.slo.ttft_slo_ms(self.reqs[it.req].req.slo_class())),
        }
    }

    /// Forms a batch: the scheduler's pick plus further runnable items of the
    /// same stage in scheduler order, up to the instance's max batch and
    /// while the batch's predicted latency stays within the stage budget.
    fn form_batch(&self, inst: u32) -> Result<Vec<usize>> {
        let i = self.inst(inst);
        let sched = self.policies.scheduler;
        let mut best: Option<(usize, (u8, u64, u64, u64))> = None;
        for (pos, &id) in i.queue.iter().enumerate() {
            let q = self.queued_view(id);
            if q.runnable {
                let k = priority_key(&q, self.now, sched);
                if best.is_none_or(|b| k < b.1) {
                    best = Some((pos, k));
                }
            }
        }
        let Some((first, _)) = best else { return Ok(Vec::new()) };
        let stage = self.item(i.queue[first]).stage;
        let mut picks = vec![first];
        let room = i.max_batch.max(1) as usize - 1;
        if room == 0 {
            return Ok(picks);
        }
        let mut rest: Vec<((u8, u64, u64, u64), usize)> = Vec::new();
        for (pos, &id) in i.queue.iter().enumerate() {
            let q = self.queued_view(id);
            if pos != first && q.runnable && self.item(id).stage == stage {
                rest.push((priority_key(&q, self.now, sched), pos));
            }
        }
        rest.sort_unstable();
        let budget = self.batch_budget_ms.get(&stage).copied().unwrap_or(f64::INFINITY);
        let cost = |it: &Item| -> Result<f64> {
            match stage {
                StageKind::Encode => Ok(f64::from(it.tiles)),
                _ => self.profile.prefill_work_ms(it.text_tokens, it.image_tokens, i.tp),
            }
        };
        let latency = |acc: f64| -> Result<f64> {
            match stage {
                StageKind::Encode => self.profile.encode_latency(acc as u32, i.tp),
                _ => Ok(self.profile.prefill_fixed_ms(i.tp)? + acc),
            }
        };
        let mut acc = cost(self.item(i.queue[first]))?;
        for (_, pos) in rest.into_iter().take(room) {
            let next = acc + cost(self.item(i.queue[pos]))?;
            if latency(next)? > budget {
                break;
            }
            acc = next;
            picks.push(pos);
        }
        Ok(picks)
    }

    fn try_start_gpu(&mut self, inst: u32) -> Result<()> {
        let i = self.inst(inst);
        if !i.batch.is_empty() || !i.serving() || i.queue.is_empty() {
            return Ok(());
        }
        let picks = self.form_batch(inst)?;
        if picks.is_empty() {
            return Ok(());
        }
        let i = self.inst(inst);
        let batch: Vec<u64> = picks.iter().map(|&p| i.queue[p]).collect();
        let tp = i.tp;
        let stage = self.item(batch[0]).stage;
        let lat = match stage {
            StageKind::Encode => {
                let tiles = batch.iter().map(|&id| self.item(id).tiles).sum();
                self.profile.encode_latency(tiles, tp)?
            }
            StageKind::Prefill => {
                let inputs: Vec<PrefillInput> = batch
                    .iter()
                    .map(|&id| {
                        let it = self.item(id);
                        PrefillInput {
                            text_tokens: it.text_tokens,
                            image_tokens: it.image_tokens,
                        }
                    })
                    .collect();
                self.profile.prefill_batch_latency(&inputs, tp)?
            }
            other => return Err(Error::Domain(format!("{other:?} item on a GPU queue"))),
        };
        let mut positions = picks;
        positions.sort_unstable_by(|a, b| b.cmp(a));
        let now = self.now;
        {
            let i = self.inst_mut(inst);
            for p in positions {
                i.queue.swap_remove(p);
            }
            i.batch = batch.clone();
            i.busy_until_ms = now + lat;
        }
        let mut first_req = u64::MAX;
        for &id in &batch {
            let (req, shard, ready) = {
                let it = self.item(id);
                (it.req, it.shard, it.ready_ms)
            };
            let rec = &mut self.reqs[req].rec;
            first_req = first_req.min(rec.id);
            match stage {
                StageKind::Encode => rec.shards[shard].encode_start_ms = Some(now),
                _ => rec.prefill_start_ms = Some(now),
            }
            self.note_delay(stage, ready);
        }
        self.events.push(now + lat, first_req, EventKind::GpuBatchDone { instance: inst });
        Ok(())
    }

    fn on_gpu_done(&mut self, inst: u32) -> Result<()> {
        let batch = std::mem::take(&mut self.inst_mut(inst).batch);
        for id in batch {
            let it = self.items[id as usize].take().expect("live item");
            let i = self.inst_mut(inst);
            match it.stage {
                StageKind::Encode => i.pending_image -= it.image_tokens,
                _ => {
                    i.pending_text -= it.text_tokens;
                    i.pending_image -= it.image_tokens;
                }
            }
            match it.stage {
                StageKind::Encode => {
                    let r = &mut self.reqs[it.req];
                    r.rec.shards[it.shard].encode_end_ms = Some(self.now);
                    r.shards_left -= 1;
                    r.producers.push(inst);
                    let left = r.shards_left;
                    if let Some(next) = it.then {
                        self.release(next);
                    } else if left == 0 {
                        self.dispatch_prefill(it.req, true)?;
                    }
                }
                _ => self.on_first_token(it.req, inst)?,
            }
        }
        self.try_start_gpu(inst)?;
        self.maybe_stop(inst);
        Ok(())
    }

    fn on_first_token(&mut self, idx: usize, inst: u32) -> Result<()> {
        let now = self.now;
        let r = &mut self.reqs[idx];
        r.rec.prefill_end_ms = Some(now);
        r.last_token_ms = now;
        r.remaining -= 1;
        if r.remaining == 0 {
            self.complete(idx);
            return Ok(());
        }
        if self.policies.topology.is_pd() {
            self.dispatch_decode(idx)
        } else {
            self.decode_join(inst, idx)
        }
    }

    /// Sends the KV cache to the Decode instance with the fewest requests.
    fn dispatch_decode(&mut self, idx: usize) -> Result<()> {
        let target = self
            .instances
            .iter()
            .filter(|i| i.kind == InstanceKind::Decode && i.state == InstanceState::Active)
            .min_by_key(|i| (i.decode.load() + i.inbound as usize, i.id))
            .map(|i| i.id);
        let Some(target) = target else {
            self.wait(InstanceKind::Decode, Waiting::Decode(idx));
            return Ok(());
        };
        let from = self.reqs[idx].rec.prefill_instance.map(|p| self.inst(p).server);
        let lat = if from == Some(self.inst(target).server) {
            LOCAL_TRANSFER_MS
        } else {
            self.cfg.transfer.sample_ms(&mut self.rng)
        };
        self.inst_mut(target).inbound += 1;
        let rid = self.reqs[idx].rec.id;
        self.events
            .push(self.now + lat, rid, EventKind::KvTransferDone { instance: target, req: idx });
        Ok(())
    }

    /// Queues a request for the decode lane. A run in progress is cut at its
    /// next step boundary so the newcomer joins there.
    fn decode_join(&mut self, inst: u32, idx: usize) -> Result<()> {
        self.reqs[idx].rec.decode_instance = Some(inst);
        let now = self.now;
        let rid = self.reqs[idx].rec.id;
        let i = self.inst_mut(inst);
        i.decode.waiting.push_back(idx);
        let has_room = i.decode.active.len() < i.decode_max_batch as usize;
        let Some(run) = i.decode.run.as_mut() else {
            return self.start_decode_run(inst);
        };
        if has_room {
            let done = ((now - run.start_ms) / run.step_ms).floor().max(0.0) as u32;
            let cut = (done + 1).min(run.steps);
            if cut < run.steps {
                run.steps = cut;
                let at = run.start_ms + f64::from(cut) * run.step_ms;
                i.decode.epoch += 1;
                let epoch = i.decode.epoch;
                self.events.push(at, rid, EventKind::DecodeStep { instance: inst, epoch });
            }
        }
        Ok(())
    }

    fn start_decode_run(&mut self, inst: u32) -> Result<()> {
        let now = self.now;
        let i = &mut self.instances[inst as usize];
        while i.decode.active.len() < i.decode_max_batch as usize {
            match i.decode.waiting.pop_front() {
                Some(r) => i.decode.active.push(r),
                None => break,
            }
        }
        if i.decode.active.is_empty() {
            i.decode.run = None;
            return Ok(());
        }
        let b = i.decode.active.len() as u32;
        let step = self.profile.tbt_latency(b, i.tp, i.decode_max_batch)?;
        let steps = i
            .decode
            .active
            .iter()
            .map(|&r| self.reqs[r].remaining)
            .min()
            .unwrap();
        let first = i.decode.active.iter().map(|&r| self.reqs[r].rec.id).min().unwrap();
        i.decode.run = Some(DecodeRun {
            start_ms: now,
            step_ms: step,
            steps,
        });
        i.decode.epoch += 1;
        let epoch = i.decode.epoch;
        self.events.push(
            now + f64::from(steps) * step,
            first,
            EventKind::DecodeStep { instance: inst, epoch },
        );
        Ok(())
    }

    fn on_decode_step(&mut self, inst: u32, epoch: u64) -> Result<()> {
        let i = &mut self.instances[inst as usize];
        if i.decode.epoch != epoch {
            return Ok(());
        }
        let Some(run) = i.decode.run.take() else { return Ok(()) };
        let active = std::mem::take(&mut i.decode.active);
        let end = self.now;
        let mut still = Vec::with_capacity(active.len());
        for idx in active {
            let r = &mut self.reqs[idx];
            let first_gap = (run.start_ms - r.last_token_ms) + run.step_ms;
            push_gap(&mut r.rec.tbt_gaps, first_gap, 1);
            if run.steps > 1 {
                push_gap(&mut r.rec.tbt_gaps, run.step_ms, run.steps - 1);
            }
            r.last_token_ms = end;
            r.remaining -= run.steps;
            if r.remaining == 0 {
                self.complete(idx);
            } else {
                still.push(idx);
            }
        }
        self.instances[inst as usize].decode.active = still;
        self.start_decode_run(inst)?;
        self.maybe_stop(inst);
        Ok(())
    }

    fn complete(&mut self, idx: usize) {
        let r = &mut self.reqs[idx];
        r.rec.completion_ms = Some(self.now);
        self.log.completed += 1;
        self.acc.finished += 1;
        if r.rec.meets_slo(&self.cfg.slo) {
            self.acc.met += 1;
        }
    }

    fn on_ready(&mut self, inst: u32) -> Result<()> {
        if self.inst(inst).state != InstanceState::Starting {
            return Ok(());
        }
        self.inst_mut(inst).state = InstanceState::Active;
        let kind = self.inst(inst).kind;
        let waiting = self.waiting.remove(&kind).unwrap_or_default();
        for w in waiting {
            match w {
                Waiting::Arrival(idx) => self.dispatch_arrival(idx)?,
                Waiting::Prefill { req, transfer } => self.dispatch_prefill(req, transfer)?,
                Waiting::Decode(idx) => self.dispatch_decode(idx)?,
            }
        }
        Ok(())
    }

    fn load_window(&self) -> LoadWindow {
        let secs = self.cfg.autoscale_period_ms / 1000.0;
        let a = &self.acc;
        LoadWindow {
            window_ms: self.cfg.autoscale_period_ms,
            image_token_rate: a.image_tokens / secs,
            text_token_rate: a.text_tokens / secs,
            total_token_rate: (a.image_tokens + a.text_tokens) / secs,
            work_rate: a.work_ms / secs,
            output_token_rate: a.output_tokens / secs,
            slo_attainment: if a.finished == 0 {
                1.0
            } else {
                a.met as f64 / a.finished as f64
            },
            queue_delay_ms: a
                .delay
                .iter()
                .map(|(&s, &(sum, n))| (s, if n == 0 { 0.0 } else { sum / n as f64 }))
                .collect(),
        }
    }

    fn on_tick(&mut self) -> Result<()> {
        let window = self.load_window();
        let caps = self.caps.expect("autoscaling enabled");
        let decision = autoscale(
            &window,
            &caps,
            self.policies.topology,
            self.profile.architecture(),
            &self.live_counts(),
            &self.tps,
            self.cfg.cluster.inventory(),
            &self.cfg.autoscale,
            &mut self.guard,
        );
        self.apply_scaling(&decision)?;
        self.acc = WindowAcc::default();
        let next = self.now + self.cfg.autoscale_period_ms;
        if next < self.cfg.horizon_ms {
            self.events.push(next, 0, EventKind::AutoscaleTick);
        }
        Ok(())
    }

    /// Moves every pool toward its target. New instances start after the
    /// start delay; removed ones finish their queued work first. A pool of
    /// the topology never drops below one instance.
    pub fn apply_scaling(&mut self, decision: &ScalingDecision) -> Result<u32> {
        let topo = self.policies.topology;
        let mut truncated = decision.clamped;
        let mut adds = Vec::new();
        let mut targets = BTreeMap::new();
        for &kind in topo.kinds() {
            let mut target = decision.targets.get(kind);
            if target == 0 {
                truncated = true;
                target = 1;
            }
            targets.insert(kind, target);
            let mut live: Vec<u32> = self
                .instances
                .iter()
                .filter(|i| i.kind == kind && matches!(i.state, InstanceState::Starting | InstanceState::Active))
                .map(|i| i.id)
                .collect();
            let n = live.len() as u32;
            if target > n {
                adds.extend(std::iter::repeat_n((kind, self.tps[&kind]), (target - n) as usize));
            } else if target < n {
                // starting instances go first, then the least loaded active ones
                live.sort_by_key(|&id| {
                    let i = self.inst(id);
                    let load = i.pending_text + i.pending_image + i.decode.load() as u64;
                    (i.state != InstanceState::Starting, load, std::cmp::Reverse(id))
                });
                for &id in live.iter().take((n - target) as usize) {
                    if self.inst(id).state == InstanceState::Starting {
                        self.stop_instance(id);
                    } else {
                        self.inst_mut(id).state = InstanceState::Draining;
                        self.maybe_stop(id);
                    }
                }
            }
        }
        let outcome = place_incremental(&adds, &self.slots(), self.policies.placement);
        for (&(kind, _), server) in adds.iter().zip(&outcome.servers) {
            if let Some(s) = server {
                let id = self.add_instance(kind, *s, InstanceState::Starting);
                self.events
                    .push(self.now + self.cfg.start_delay_ms, 0, EventKind::InstanceReady { instance: id });
            }
        }
        if !adds.is_empty() {
            self.record_allocation();
        }
        let unplaced = outcome.unplaced as u32;
        self.log.scaling.push(ScalingRecord {
            time_ms: self.now,
            targets,
            bumped: decision.bumped,
            truncated: truncated || unplaced > 0,
            unplaced,
        });
        Ok(unplaced)
    }

    fn check_invariants(&self) -> Result<()> {
        let fail = |what: String| {
            Err(Error::Invariant {
                time_ms: self.now,
                what,
            })
        };
        let mut used = vec![0u32; self.servers.len()];
        for i in &self.instances {
            if i.state == InstanceState::Stopped {
                continue;
            }
            used[i.server as usize] += i.tp;
            let (mut text, mut image) = (0, 0);
            for &id in i.queue.iter().chain(&i.batch) {
                let it = self.item(id);
                match it.stage {
                    StageKind::Encode => image += it.image_tokens,
                    _ => {
                        text += it.text_tokens;
                        image += it.image_tokens;
                    }
                }
            }
            if (text, image) != (i.pending_text, i.pending_image) {
                return fail(format!(
                    "instance {} counters ({}, {}) but queued work ({text}, {image})",
                    i.id, i.pending_text, i.pending_image
                ));
            }
            if i.serving() && i.batch.is_empty() && i.queue.iter().any(|&id| self.item(id).deps_left == 0) {
                return fail(format!("instance {} idle with runnable work", i.id));
            }
            if i.serving() && !i.cpu_busy && !i.cpu_queue.is_empty() {
                return fail(format!("instance {} CPU idle with queued preprocessing", i.id));
            }
            if i.state == InstanceState::Starting && !(i.queue.is_empty() && i.cpu_queue.is_empty()) {
                return fail(format!("starting instance {} holds work", i.id));
            }
        }
        for (s, srv) in self.servers.iter().enumerate() {
            if used[s] != srv.gpus_used || srv.gpus_used > srv.gpus_total {
                return fail(format!("server {s} uses {} of {} GPUs", used[s], srv.gpus_total));
            }
        }
        let placed: u32 = used.iter().sum();
        if placed > self.cfg.cluster.inventory() || placed != self.gpus_in_use {
            return fail(format!("{placed} GPUs placed, {} accounted", self.gpus_in_use));
        }
        Ok(())
    }

    fn dump(&self) -> String {
        let waiting: Vec<String> = self
            .waiting
            .iter()
            .map(|(k, v)| format!("{}:{}", k.as_str(), v.len()))
            .collect();
        let states: Vec<String> = self
            .instances
            .iter()
            .filter(|i| i.state != InstanceState::Stopped)
            .map(|i| {
                format!(
                    "#{} {} {:?} queue={} batch={} cpu={} decode={}",
                    i.id,
                    i.kind.as_str(),
                    i.state,
                    i.queue.len(),
                    i.batch.len(),
                    i.cpu_queue.len(),
                    i.decode.load()
                )
            })
            .collect();
        format!(
            "{} request(s) in flight; waiting for instances [{}]; instances [{}]",
            self.log.arrived - self.log.completed,
            waiting.join(", "),
            states.join("; ")
        )
    }
}

fn push_gap(gaps: &mut Vec<(f64, u32)>, gap: f64, count: u32) {
    match gaps.last_mut() {
        Some(last) if last.0 == gap => last.1 += count,
        _ => gaps.push((gap, count)),
    }
}

#[cfg(test)]
impl Simulation {
    /// Delivers one arrival at its timestamp.
    pub(crate) fn submit(&mut self, r: Request) -> Result<()> {
        self.now = self.now.max(r.arrival_ms);
        self.on_arrival(r)
    }

    /// Processes queued events up to `until_ms`.
    pub(crate) fn run_until(&mut self, until_ms: f64) -> Result<()> {
        while let Some(k) = self.events.peek_key() {
            if k.time_ms() > until_ms {
                break;
            }
            self.process_next_event()?;
        }
        self.now = self.now.max(until_ms.min(self.events.peek_key().map_or(until_ms, |k| k.time_ms())));
        Ok(())
    }

    pub(crate) fn records(&self) -> Vec<RequestRecord> {
        self.reqs.iter().map(|r| r.rec.clone()).collect()
    }

    pub(crate) fn scaling_log(&self) -> &[ScalingRecord] {
        &self.log.scaling
    }
}
