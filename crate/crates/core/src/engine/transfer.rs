use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::model::Request;

/// Latency of a hand-off between instances on the same server.
pub const LOCAL_TRANSFER_MS: f64 = 0.5;

/// z-score of the 99th percentile of a standard normal.
const Z99: f64 = 2.326_347_874_040_841;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TransferMedium {
    #[default]
    Rdma,
    Tcp,
}

impl TransferMedium {
    /// Median and P99 of the cross-server latency, ms.
    pub fn quantiles_ms(self) -> (f64, f64) {
        match self {
            TransferMedium::Rdma => (2.0, 5.0),
            TransferMedium::Tcp => (100.0, 180.0),
        }
    }

    fn distribution(self) -> LogNormal<f64> {
        let (p50, p99) = self.quantiles_ms();
        LogNormal::new(p50.ln(), (p99 / p50).ln() / Z99).expect("valid log-normal")
    }

    /// One cross-server transfer latency.
    pub fn sample_ms<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        self.distribution().sample(rng)
    }
}

/// Image-token transfer latency for a request; text-only requests move
/// nothing.
pub fn transfer_tokens<R: Rng + ?Sized>(request: &Request, medium: TransferMedium, rng: &mut R) -> f64 {
    if request.images.is_empty() {
        0.0
    } else {
        medium.sample_ms(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::quantile::percentile;
    use crate::model::RequestId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quantiles(m: TransferMedium) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..200_000).map(|_| m.sample_ms(&mut rng)).collect();
        (percentile(&xs, 0.5).unwrap(), percentile(&xs, 0.99).unwrap())
    }

    #[test]
    fn rdma_p99_is_5ms() {
        let (_, p99) = quantiles(TransferMedium::Rdma);
        assert!((p99 - 5.0).abs() < 0.15, "{p99}");
    }

    #[test]
    fn tcp_p50_100_p99_180() {
        let (p50, p99) = quantiles(TransferMedium::Tcp);
        assert!((p50 - 100.0).abs() < 1.5, "{p50}");
        assert!((p99 - 180.0).abs() < 4.0, "{p99}");
    }

    #[test]
    fn text_only_moves_nothing() {
        let r = Request {
            id: RequestId(0),
            arrival_ms: 0.0,
            text_tokens: 10,
            images: vec![],
            output_tokens: 1,
            service_id: String::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(transfer_tokens(&r, TransferMedium::Tcp, &mut rng), 0.0);
    }
}
