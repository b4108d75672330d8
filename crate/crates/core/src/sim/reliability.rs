use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::topology::{NodeId, Path, Topology};

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityEstimate {
    pub paths: Vec<Path>,
    /// `1 - prod_i (1 - prod_{l in path_i} (1 - loss_l))`.
    pub analytic: f64,
    pub monte_carlo: f64,
    pub trials: u64,
}

impl ReliabilityEstimate {
    /// Standard error of a Bernoulli mean with the analytic success rate.
    pub fn sigma(&self) -> f64 {
        if self.trials == 0 {
            return 0.0;
        }
        (self.analytic * (1.0 - self.analytic) / self.trials as f64).sqrt()
    }

    pub fn within_sigmas(&self, k: f64) -> bool {
        let d = (self.analytic - self.monte_carlo).abs();
        // A degenerate distribution has zero spread; allow float noise only.
        d <= k * self.sigma() + 1e-12
    }
}

/// Success probability over the (up to) `k` link-disjoint data routes from
/// `src` to `dst`: analytic, plus a seeded Monte Carlo estimate where every
/// link independently drops with its `loss_prob`.
pub fn reliability_estimate(
    topology: &Topology,
    src: NodeId,
    dst: NodeId,
    k: usize,
    trials: u64,
    seed: u64,
) -> ReliabilityEstimate {
    let paths = crate::topology::k_disjoint_paths(topology, src, dst, k);
    let per_path: Vec<Vec<f64>> = paths
        .iter()
        .map(|p| {
            p.links(topology)
                .iter()
                .map(|l| topology.link(*l).loss_prob)
                .collect()
        })
        .collect();
    let analytic = if per_path.is_empty() {
        0.0
    } else {
        1.0 - per_path
            .iter()
            .map(|losses| 1.0 - losses.iter().map(|p| 1.0 - p).product::<f64>())
            .product::<f64>()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = 0u64;
    for _ in 0..trials {
        // Draw every link so the stream layout does not depend on outcomes.
        let mut any = false;
        for losses in &per_path {
            let mut survived = true;
            for p in losses {
                if rng.gen::<f64>() < *p {
                    survived = false;
                }
            }
            any |= survived;
        }
        ok += any as u64;
    }
    ReliabilityEstimate {
        paths,
        analytic,
        monte_carlo: if trials == 0 {
            0.0
        } else {
            ok as f64 / trials as f64
        },
        trials,
    }
}
