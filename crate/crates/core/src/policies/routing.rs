use crate::model::Architecture;

use super::Router;

/// Pending work of one Active instance. Counters cover queued and in-service
/// items.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolLoad {
    pub id: u32,
    pub pending_text: u64,
    pub pending_image: u64,
}

/// Round-robin position within a pool.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RouteCursor(pub usize);

impl RouteCursor {
    fn take(&mut self, pool_len: usize, k: usize) -> Vec<usize> {
        let start = self.0 % pool_len;
        self.0 = (start + k) % pool_len;
        (0..k).map(|i| (start + i) % pool_len).collect()
    }
}

/// Ids of the `k` instances with the smallest `key`, ties to the lowest id.
pub fn least_loaded(pool: &[PoolLoad], k: usize, key: impl Fn(&PoolLoad) -> u64) -> Vec<u32> {
    let mut order: Vec<&PoolLoad> = pool.iter().collect();
    order.sort_by_key(|p| (key(p), p.id));
    order.into_iter().take(k).map(|p| p.id).collect()
}

/// Picks the instances that encode a request's images. Returns one instance
/// id per shard; `fanout = min(images, pool, max_fanout)`. Least-pending
/// routing orders the result from least to most loaded.
pub fn route_image(
    images: usize,
    pool: &[PoolLoad],
    router: Router,
    max_fanout: usize,
    cursor: &mut RouteCursor,
) -> Vec<u32> {
    if pool.is_empty() || images == 0 {
        return Vec::new();
    }
    let k = images.min(pool.len()).min(max_fanout.max(1));
    match router {
        Router::LeastPendingModalityAware => least_loaded(pool, k, |p| p.pending_image),
        Router::RoundRobin => cursor.take(pool.len(), k).into_iter().map(|i| pool[i].id).collect(),
    }
}

/// Picks the instance that prefills a request. DecOnly balances on all pending
/// tokens; CroAttn on pending text tokens only.
pub fn route_text(
    pool: &[PoolLoad],
    architecture: Architecture,
    router: Router,
    cursor: &mut RouteCursor,
) -> Option<u32> {
    if pool.is_empty() {
        return None;
    }
    match router {
        Router::LeastPendingModalityAware => {
            let key = |p: &PoolLoad| match architecture {
                Architecture::DecOnly => p.pending_text + p.pending_image,
                Architecture::CroAttn => p.pending_text,
            };
            least_loaded(pool, 1, key).first().copied()
        }
        Router::RoundRobin => Some(pool[cursor.take(pool.len(), 1)[0]].id),
    }
}
