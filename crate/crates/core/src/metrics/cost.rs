use serde::{Deserialize, Serialize};

use crate::engine::MetricsLog;

use super::latency::window_count;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowGpus {
    pub start_ms: f64,
    pub end_ms: f64,
    /// Time-weighted mean allocation over the window.
    pub avg_gpus: f64,
    pub peak_gpus: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub gpu_seconds: f64,
    pub peak_gpus: u32,
    pub timeline: Vec<WindowGpus>,
}

/// GPU-seconds and per-window allocation over `[0, end_ms)`. Windows carry
/// time-weighted means, so the timeline integrates to the total.
pub fn cost_summary(log: &MetricsLog, window_ms: f64) -> CostSummary {
    let end = log.end_ms;
    let n = window_count(end, window_ms);
    let mut timeline: Vec<WindowGpus> = (0..n)
        .map(|w| WindowGpus {
            start_ms: w as f64 * window_ms,
            end_ms: ((w + 1) as f64 * window_ms).min(end.max(window_ms)),
            avg_gpus: 0.0,
            peak_gpus: 0,
        })
        .collect();
    let mut gpu_ms = 0.0;
    for (i, p) in log.allocation.iter().enumerate() {
        let seg_start = p.time_ms.min(end);
        let seg_end = log.allocation.get(i + 1).map_or(end, |q| q.time_ms).min(end);
        gpu_ms += f64::from(p.gpus) * (seg_end - seg_start).max(0.0);
        let first = ((seg_start / window_ms) as usize).min(n - 1);
        let last = ((seg_end / window_ms).ceil() as usize).clamp(first + 1, n);
        for w in &mut timeline[first..last] {
            let overlap = seg_end.min(w.end_ms) - seg_start.max(w.start_ms);
            if overlap > 0.0 {
                w.avg_gpus += f64::from(p.gpus) * overlap;
                w.peak_gpus = w.peak_gpus.max(p.gpus);
            }
        }
    }
    for w in &mut timeline {
        let len = w.end_ms - w.start_ms;
        if len > 0.0 {
            w.avg_gpus /= len;
        }
    }
    CostSummary {
        gpu_seconds: gpu_ms / 1000.0,
        peak_gpus: timeline.iter().map(|w| w.peak_gpus).max().unwrap_or(0),
        timeline,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::AllocationPoint;
    use proptest::prelude::*;

    fn log(points: &[(f64, u32)], end: f64) -> MetricsLog {
        MetricsLog {
            end_ms: end,
            horizon_ms: end,
            allocation: points
                .iter()
                .map(|&(t, g)| AllocationPoint {
                    time_ms: t,
                    gpus: g,
                    instances: Default::default(),
                })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn constant_allocation() {
        let c = cost_summary(&log(&[(0.0, 8)], 10_000.0), 1000.0);
        assert!((c.gpu_seconds - 80.0).abs() < 1e-9);
        assert!(c.timeline.iter().all(|w| w.avg_gpus == 8.0));
        assert_eq!(c.peak_gpus, 8);
    }

    #[test]
    fn step_inside_a_window() {
        let c = cost_summary(&log(&[(0.0, 4), (1500.0, 12)], 3000.0), 1000.0);
        assert_eq!(c.timeline[1].avg_gpus, 8.0);
        assert_eq!(c.timeline[1].peak_gpus, 12);
        assert!((c.gpu_seconds - (4.0 * 1.5 + 12.0 * 1.5)).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn timeline_conserves_gpu_seconds(
            steps in proptest::collection::vec((1f64..5000.0, 0u32..64), 0..30),
            window in 100f64..5000.0,
            tail in 0f64..5000.0,
        ) {
            let mut t = 0.0;
            let mut points = vec![(0.0, 8)];
            for (dt, g) in steps {
                t += dt;
                points.push((t, g));
            }
            let c = cost_summary(&log(&points, t + tail), window);
            let integral: f64 = c.timeline.iter().map(|w| w.avg_gpus * (w.end_ms - w.start_ms) / 1000.0).sum();
            prop_assert!((integral - c.gpu_seconds).abs() <= window / 1000.0 * 1e-6 + 1e-9 * c.gpu_seconds);
        }
    }
}
