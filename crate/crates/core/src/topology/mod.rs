//! Network graph, functional placement variants and path computation.
//!
//! A [`Topology`] is immutable once built. Failure injection never mutates
//! it; instead routing queries take a [`FailureSet`] describing which links
//! and nodes are currently unusable.

mod build;
mod placement;
mod routing;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use build::{LinkSpec, NodeSpec, PlacementSpec, TopologySpec, ValidationError};
pub use placement::{Placement, Variant};
pub use routing::{compute_path, k_disjoint_paths, FailureSet, NoPathError, Path, Plane, Router};

/// Default per-node session capacity when a scenario does not set one.
pub const DEFAULT_NODE_CAPACITY: u32 = 16;

/// Identity of a node, unique within a topology and never reused.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    #[serde(rename = "UE")]
    Ue,
    /// gNB-DU or IAB-node; serves UEs over Uu.
    AccessNode,
    /// gNB-CU or IAB-donor, wired toward the aggregation/core tier.
    DonorNode,
    AggregationSite,
    CoreSite,
}

impl NodeKind {
    /// gNB-level node (runs the RAN protocol stack).
    pub fn is_ran(self) -> bool {
        matches!(self, NodeKind::AccessNode | NodeKind::DonorNode)
    }

    /// Aggregation or core tier; uses the core-side processing delay.
    pub fn is_core_tier(self) -> bool {
        matches!(self, NodeKind::AggregationSite | NodeKind::CoreSite)
    }

    pub fn label(self) -> &'static str {
        match self {
            NodeKind::Ue => "UE",
            NodeKind::AccessNode => "AccessNode",
            NodeKind::DonorNode => "DonorNode",
            NodeKind::AggregationSite => "AggregationSite",
            NodeKind::CoreSite => "CoreSite",
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    /// Set on an AccessNode acting as an IAB-node (DU + mobile termination).
    pub iab_mt: bool,
    pub capacity_sessions: u32,
}

/// Interface type of a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LinkKind {
    /// Air interface: UE-gNB access or IAB wireless backhaul.
    Uu,
    /// Inter-gNB interface.
    Xn,
    /// DU-CU interface.
    F1,
    /// RAN-to-core transport.
    #[serde(rename = "N_core")]
    NCore,
}

impl LinkKind {
    pub fn label(self) -> &'static str {
        match self {
            LinkKind::Uu => "Uu",
            LinkKind::Xn => "Xn",
            LinkKind::F1 => "F1",
            LinkKind::NCore => "N_core",
        }
    }
}

impl fmt::Display for LinkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.label())
    }
}

/// Index of a link within its topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId(pub usize);

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

/// Bidirectional link with symmetric attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub a: NodeId,
    pub b: NodeId,
    /// One-way latency in microseconds, always positive.
    pub latency_us: u64,
    pub loss_prob: f64,
    pub capacity_sessions: u32,
    pub kind: LinkKind,
    /// When set, frames also pay a serialization delay of `size * 8 / rate`.
    pub bandwidth_bps: Option<u64>,
}

impl Link {
    pub fn other(&self, n: NodeId) -> Option<NodeId> {
        if n == self.a {
            Some(self.b)
        } else if n == self.b {
            Some(self.a)
        } else {
            None
        }
    }

    pub fn connects(&self, x: NodeId, y: NodeId) -> bool {
        (self.a == x && self.b == y) || (self.a == y && self.b == x)
    }

    /// Serialization delay for a frame of `size_bytes`, rounded up to 1 µs.
    pub fn transmission_us(&self, size_bytes: usize) -> u64 {
        match self.bandwidth_bps {
            Some(bps) if bps > 0 => {
                let bits = size_bytes as u128 * 8 * 1_000_000;
                bits.div_ceil(bps as u128) as u64
            }
            _ => 0,
        }
    }
}

/// Validated network graph plus its functional placement.
#[derive(Debug, Clone)]
pub struct Topology {
    nodes: BTreeMap<NodeId, Node>,
    links: Vec<Link>,
    adjacency: BTreeMap<NodeId, Vec<(LinkId, NodeId)>>,
    placement: Placement,
}

impl Topology {
    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn kind(&self, id: NodeId) -> Option<NodeKind> {
        self.nodes.get(&id).map(|n| n.kind)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id.0]
    }

    pub fn link_ids(&self) -> impl Iterator<Item = LinkId> {
        (0..self.links.len()).map(LinkId)
    }

    /// Neighbors of `id` as (link, neighbor), ordered by neighbor id.
    pub fn neighbors(&self, id: NodeId) -> &[(LinkId, NodeId)] {
        self.adjacency.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn link_between(&self, x: NodeId, y: NodeId) -> Option<LinkId> {
        self.neighbors(x)
            .iter()
            .find(|(_, n)| *n == y)
            .map(|(l, _)| *l)
    }

    pub fn placement(&self) -> &Placement {
        &self.placement
    }

    /// The AccessNode a UE is attached to.
    pub fn serving_gnb(&self, ue: NodeId) -> Option<NodeId> {
        if self.kind(ue) != Some(NodeKind::Ue) {
            return None;
        }
        self.neighbors(ue)
            .iter()
            .map(|(_, n)| *n)
            .find(|n| self.kind(*n) == Some(NodeKind::AccessNode))
    }

    pub fn ues(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .values()
            .filter(|n| n.kind == NodeKind::Ue)
            .map(|n| n.id)
    }

    /// Same graph under a different placement, re-validated.
    pub fn with_placement(&self, placement: Placement) -> Result<Topology, ValidationError> {
        build::assemble(
            self.nodes.values().cloned().collect(),
            self.links.clone(),
            placement,
        )
    }

    /// Sum of link latencies along consecutive hops; `None` if two
    /// consecutive hops are not adjacent.
    pub fn hops_latency_us(&self, hops: &[NodeId]) -> Option<u64> {
        hops.windows(2).try_fold(0u64, |acc, w| {
            self.link_between(w[0], w[1])
                .map(|l| acc + self.link(l).latency_us)
        })
    }
}
