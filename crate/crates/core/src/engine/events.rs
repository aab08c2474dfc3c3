use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Rank of an arrival, which is pulled lazily from the workload rather than
/// queued.
pub(crate) const ARRIVAL_RANK: u8 = 6;

/// What happened. The rank orders equal-time events: capacity is released
/// before new work arrives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum EventKind {
    InstanceReady { instance: u32 },
    PreprocessDone { instance: u32, item: u64 },
    GpuBatchDone { instance: u32 },
    TransferDone { instance: u32, item: u64 },
    KvTransferDone { instance: u32, req: usize },
    DecodeStep { instance: u32, epoch: u64 },
    AutoscaleTick,
}

impl EventKind {
    pub(crate) fn rank(&self) -> u8 {
        match self {
            EventKind::InstanceReady { .. } => 0,
            EventKind::PreprocessDone { .. } => 1,
            EventKind::GpuBatchDone { .. } => 2,
            EventKind::TransferDone { .. } => 3,
            EventKind::KvTransferDone { .. } => 4,
            EventKind::DecodeStep { .. } => 5,
            EventKind::AutoscaleTick => 7,
        }
    }
}

/// Total order key: time, kind rank, request id, insertion sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) struct EventKey {
    time_bits: u64,
    rank: u8,
    request: u64,
    seq: u64,
}

impl EventKey {
    pub(crate) fn new(time_ms: f64, rank: u8, request: u64, seq: u64) -> Self {
        debug_assert!(time_ms >= 0.0 && time_ms.is_finite());
        // non-negative IEEE doubles order like their bit patterns
        EventKey {
            time_bits: time_ms.to_bits(),
            rank,
            request,
            seq,
        }
    }

    pub(crate) fn time_ms(&self) -> f64 {
        f64::from_bits(self.time_bits)
    }

    pub(crate) fn rank(&self) -> u8 {
        self.rank
    }

    pub(crate) fn request(&self) -> u64 {
        self.request
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Event {
    pub key: EventKey,
    pub kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed so the max-heap pops the earliest key
    fn cmp(&self, other: &Self) -> Ordering {
        other.key.cmp(&self.key)
    }
}

#[derive(Debug, Default)]
pub(crate) struct EventQueue {
    heap: BinaryHeap<Event>,
    seq: u64,
}

impl EventQueue {
    pub(crate) fn push(&mut self, time_ms: f64, request: u64, kind: EventKind) {
        self.seq += 1;
        let key = EventKey::new(time_ms, kind.rank(), request, self.seq);
        self.heap.push(Event { key, kind });
    }

    pub(crate) fn peek_key(&self) -> Option<EventKey> {
        self.heap.peek().map(|e| e.key)
    }

    pub(crate) fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub(crate) fn len(&self) -> usize {
        self.heap.len()
    }
}
