use super::Scheduler;

/// Scheduler view of one queued work item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueuedItem {
    pub id: u64,
    pub enqueue_ms: f64,
    pub tokens: u64,
    pub runnable: bool,
    /// Wait after which the item is served in arrival order.
    pub aging_ms: f64,
}

impl QueuedItem {
    fn aged(&self, now: f64) -> bool {
        now - self.enqueue_ms > self.aging_ms
    }
}

/// Sort key under `scheduler`; the smallest runnable key runs next.
/// FIFO orders by enqueue time. SLO priority puts aged items first in
/// enqueue order, then the rest by size; ties fall back to enqueue time and
/// id.
pub fn priority_key(item: &QueuedItem, now: f64, scheduler: Scheduler) -> (u8, u64, u64, u64) {
    // enqueue times are non-negative, so their bit patterns sort like the values
    let t = item.enqueue_ms.max(0.0).to_bits();
    match scheduler {
        Scheduler::SLOPriority if !item.aged(now) => (1, item.tokens, t, item.id),
        _ => (0, 0, t, item.id),
    }
}

/// Index of the next runnable item, if any.
pub fn schedule_next(queue: &[QueuedItem], now: f64, scheduler: Scheduler) -> Option<usize> {
    queue
        .iter()
        .enumerate()
        .filter(|(_, q)| q.runnable)
        .min_by_key(|(_, q)| priority_key(q, now, scheduler))
        .map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(id: u64, enqueue_ms: f64, tokens: u64) -> QueuedItem {
        QueuedItem {
            id,
            enqueue_ms,
            tokens,
            runnable: true,
            aging_ms: 1000.0,
        }
    }

    #[test]
    fn fifo_oldest_first() {
        let q = [item(1, 2.0, 5), item(0, 1.0, 500)];
        assert_eq!(schedule_next(&q, 3.0, Scheduler::FIFO), Some(1));
    }

    #[test]
    fn priority_prefers_small() {
        let q = [item(0, 0.0, 8000), item(1, 1.0, 100)];
        assert_eq!(schedule_next(&q, 2.0, Scheduler::SLOPriority), Some(1));
    }

    #[test]
    fn aged_item_jumps_ahead() {
        let q = [item(0, 0.0, 8000), item(1, 1500.0, 100)];
        assert_eq!(schedule_next(&q, 1600.0, Scheduler::SLOPriority), Some(0));
    }

    #[test]
    fn unmet_dependencies_skipped() {
        let mut q = [item(0, 0.0, 10), item(1, 1.0, 10)];
        q[0].runnable = false;
        assert_eq!(schedule_next(&q, 2.0, Scheduler::FIFO), Some(1));
        q[1].runnable = false;
        assert_eq!(schedule_next(&q, 2.0, Scheduler::SLOPriority), None);
    }

    /// Single server, unit-free service time proportional to tokens. Small
    /// items arrive continuously; one large item must still start within the
    /// aging threshold plus one maximal service time.
    #[test]
    fn large_item_not_starved() {
        let aging = 200.0;
        let mut queue = vec![QueuedItem {
            aging_ms: aging,
            ..item(0, 0.0, 50)
        }];
        let mut now = 0.0;
        let mut next_id = 1;
        let mut next_arrival = 0.0;
        let max_service = 50.0;
        loop {
            while next_arrival <= now {
                queue.push(QueuedItem {
                    aging_ms: aging,
                    ..item(next_id, next_arrival, 1)
                });
                next_id += 1;
                next_arrival += 1.5;
            }
            let i = schedule_next(&queue, now, Scheduler::SLOPriority).unwrap();
            let chosen = queue.remove(i);
            if chosen.id == 0 {
                assert!(now - chosen.enqueue_ms <= aging + max_service, "started at {now}");
                break;
            }
            now += chosen.tokens as f64;
            assert!(now < 10_000.0, "starved");
        }
    }

    proptest! {
        #[test]
        fn picks_a_runnable_minimum(
            items in proptest::collection::vec((0f64..100.0, 0u64..1000, any::<bool>()), 1..30),
            now in 0f64..200.0,
        ) {
            let q: Vec<QueuedItem> = items
                .iter()
                .enumerate()
                .map(|(i, &(t, tok, r))| QueuedItem { id: i as u64, enqueue_ms: t, tokens: tok, runnable: r, aging_ms: 50.0 })
                .collect();
            for s in [Scheduler::FIFO, Scheduler::SLOPriority] {
                match schedule_next(&q, now, s) {
                    None => prop_assert!(q.iter().all(|x| !x.runnable)),
                    Some(i) => {
                        prop_assert!(q[i].runnable);
                        let any_aged = q.iter().any(|x| x.runnable && now - x.enqueue_ms > x.aging_ms);
                        for x in q.iter().filter(|x| x.runnable) {
                            if s == Scheduler::FIFO || any_aged {
                                if s == Scheduler::SLOPriority && !(now - x.enqueue_ms > x.aging_ms) { continue; }
                                prop_assert!(q[i].enqueue_ms <= x.enqueue_ms);
                            } else {
                                prop_assert!(q[i].tokens <= x.tokens);
                            }
                        }
                    }
                }
            }
        }
    }
}
