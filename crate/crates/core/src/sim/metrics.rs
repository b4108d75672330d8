use std::collections::BTreeMap;

use crate::protocol::RejectReason;
use crate::session::DropReason;
use crate::topology::NodeId;

/// Per-session outcome of a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionMetrics {
    pub src_ue: NodeId,
    pub dst_ue: NodeId,
    /// Injection to both UEs active, for the first successful attempt.
    pub establishment_us: Option<u64>,
    /// Last reason the session ended or was refused, if any.
    pub last_failure: Option<RejectReason>,
    pub injected: u64,
    pub delivered: u64,
    pub dropped: BTreeMap<DropReason, u64>,
    /// One-way latencies of delivered packets, in delivery order.
    pub latencies_us: Vec<u64>,
    pub qos_violations: u64,
}

impl SessionMetrics {
    pub fn dropped_total(&self) -> u64 {
        self.dropped.values().sum()
    }

    pub fn dropped_for(&self, r: DropReason) -> u64 {
        self.dropped.get(&r).copied().unwrap_or(0)
    }

    pub fn p50_us(&self) -> Option<u64> {
        percentile(&self.latencies_us, 50.0)
    }

    pub fn p99_us(&self) -> Option<u64> {
        percentile(&self.latencies_us, 99.0)
    }

    pub fn delivery_ratio(&self) -> Option<f64> {
        (self.injected > 0).then(|| self.delivered as f64 / self.injected as f64)
    }
}

/// Nearest-rank percentile.
pub fn percentile(values: &[u64], p: f64) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

/// Signalling messages by the highest tier their route touched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SignallingCounts {
    /// Routes among RAN nodes only.
    pub ran: u64,
    /// Routes through an aggregation site but no core site.
    pub agg: u64,
    /// Routes through a core site.
    pub core: u64,
    /// Relay hops made at donor nodes.
    pub donor_hops: u64,
    /// Frames lost in transit.
    pub lost: u64,
}

impl SignallingCounts {
    pub fn total(&self) -> u64 {
        self.ran + self.agg + self.core
    }
}

/// One injected failure and how long the affected sessions took to recover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailureRecord {
    pub at_us: u64,
    pub target: String,
    /// Sessions (by index) whose route used the failed element.
    pub affected: Vec<usize>,
    /// Time each affected session had a working route again.
    pub repaired_at: BTreeMap<usize, u64>,
}

impl FailureRecord {
    /// Time until the last affected session was repaired; `None` if one
    /// never was. Zero when nothing was affected.
    pub fn reconvergence_us(&self) -> Option<u64> {
        let mut worst = 0;
        for s in &self.affected {
            worst = worst.max(self.repaired_at.get(s)? - self.at_us);
        }
        Some(worst)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Metrics {
    pub sessions: Vec<SessionMetrics>,
    pub signalling: SignallingCounts,
    pub failures: Vec<FailureRecord>,
    pub events_processed: u64,
}

impl Metrics {
    pub fn injected(&self) -> u64 {
        self.sessions.iter().map(|s| s.injected).sum()
    }

    pub fn delivered(&self) -> u64 {
        self.sessions.iter().map(|s| s.delivered).sum()
    }

    pub fn dropped(&self) -> u64 {
        self.sessions.iter().map(|s| s.dropped_total()).sum()
    }

    pub fn all_latencies(&self) -> Vec<u64> {
        self.sessions
            .iter()
            .flat_map(|s| s.latencies_us.iter().copied())
            .collect()
    }

    pub fn p50_us(&self) -> Option<u64> {
        percentile(&self.all_latencies(), 50.0)
    }

    pub fn p99_us(&self) -> Option<u64> {
        percentile(&self.all_latencies(), 99.0)
    }

    /// Slowest establishment among sessions that came up.
    pub fn max_establishment_us(&self) -> Option<u64> {
        self.sessions
            .iter()
            .filter_map(|s| s.establishment_us)
            .max()
    }
}
