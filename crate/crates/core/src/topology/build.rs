use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    Link, LinkId, LinkKind, Node, NodeId, NodeKind, Placement, Topology, Variant,
    DEFAULT_NODE_CAPACITY,
};

fn default_link_capacity() -> u32 {
    64
}

/// Declarative topology description as read from a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub placement: PlacementSpec,
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementSpec {
    pub variant: Variant,
    #[serde(default)]
    pub upf_at: Option<NodeKind>,
    #[serde(default)]
    pub cp_core_at: Option<NodeKind>,
    #[serde(default)]
    pub split_option: Option<u8>,
}

impl PlacementSpec {
    pub fn resolve(&self) -> Placement {
        let mut p = self.variant.default_placement();
        if let Some(k) = self.upf_at {
            p.upf_at = k;
        }
        if let Some(k) = self.cp_core_at {
            p.cp_core_at = k;
        }
        if let Some(s) = self.split_option {
            p.split_option = s;
        }
        p
    }
}

impl From<Variant> for PlacementSpec {
    fn from(variant: Variant) -> Self {
        PlacementSpec {
            variant,
            upf_at: None,
            cp_core_at: None,
            split_option: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: u32,
    pub kind: NodeKind,
    #[serde(default)]
    pub iab_mt: bool,
    #[serde(default)]
    pub capacity_sessions: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: u32,
    pub b: u32,
    pub kind: LinkKind,
    pub latency_us: u64,
    #[serde(default)]
    pub loss_prob: f64,
    #[serde(default = "default_link_capacity")]
    pub capacity_sessions: u32,
    #[serde(default)]
    pub bandwidth_bps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("link {a}-{b} references unknown node {missing}")]
    UnknownNode {
        a: NodeId,
        b: NodeId,
        missing: NodeId,
    },
    #[error("link {0}-{0} is a self loop")]
    SelfLoop(NodeId),
    #[error("duplicate link between {0} and {1}")]
    DuplicateLink(NodeId, NodeId),
    #[error("link {a}-{b}: latency_us must be > 0")]
    NonPositiveLatency { a: NodeId, b: NodeId },
    #[error("link {a}-{b}: loss_prob must lie in [0, 1]")]
    LossOutOfRange { a: NodeId, b: NodeId },
    #[error("link {a}-{b}: kind {kind} cannot join {a_kind} and {b_kind}")]
    LinkKindMismatch {
        a: NodeId,
        b: NodeId,
        kind: LinkKind,
        a_kind: NodeKind,
        b_kind: NodeKind,
    },
    #[error(
        "UE {ue} must attach to exactly one AccessNode over a single Uu link (has {links} links)"
    )]
    UeAttachment { ue: NodeId, links: usize },
    #[error("iab_mt flag set on {0}, which is not an AccessNode")]
    MtOnNonAccess(NodeId),
    #[error("DonorNode {0} needs a link toward CoreSite or AggregationSite under a non-coreless variant")]
    DonorWithoutUplink(NodeId),
    #[error("placement: {0}")]
    Placement(String),
    #[error("{variant} requires {} {kind} node", article(.kind))]
    MissingAnchor { variant: Variant, kind: NodeKind },
    #[error("{variant} requires an Xn path between AccessNodes {a} and {b}")]
    MissingMeshLink {
        variant: Variant,
        a: NodeId,
        b: NodeId,
    },
    #[error("topology is not connected: node {0} unreachable from {1}")]
    Disconnected(NodeId, NodeId),
    #[error("topology has no nodes")]
    Empty,
}

impl TopologySpec {
    pub fn build(&self) -> Result<Topology, ValidationError> {
        build_topology(self)
    }
}

/// Builds and validates a topology, reporting the first violated invariant.
pub fn build_topology(spec: &TopologySpec) -> Result<Topology, ValidationError> {
    let nodes = spec
        .nodes
        .iter()
        .map(|n| Node {
            id: NodeId(n.id),
            kind: n.kind,
            iab_mt: n.iab_mt,
            capacity_sessions: n.capacity_sessions.unwrap_or(DEFAULT_NODE_CAPACITY),
        })
        .collect();
    let links = spec
        .links
        .iter()
        .map(|l| Link {
            a: NodeId(l.a),
            b: NodeId(l.b),
            latency_us: l.latency_us,
            loss_prob: l.loss_prob,
            capacity_sessions: l.capacity_sessions,
            kind: l.kind,
            bandwidth_bps: l.bandwidth_bps,
        })
        .collect();
    assemble(nodes, links, spec.placement.resolve())
}

fn article(kind: &NodeKind) -> &'static str {
    if kind.label().starts_with(['A', 'E', 'I', 'O', 'U']) {
        "an"
    } else {
        "a"
    }
}

fn link_kind_allowed(kind: LinkKind, x: NodeKind, y: NodeKind) -> bool {
    use NodeKind::*;
    let pair = |p: NodeKind, q: NodeKind| (x == p && y == q) || (x == q && y == p);
    match kind {
        LinkKind::Uu => pair(Ue, AccessNode) || pair(AccessNode, AccessNode),
        LinkKind::Xn => x.is_ran() && y.is_ran(),
        LinkKind::F1 => {
            pair(AccessNode, DonorNode)
                || pair(AccessNode, AggregationSite)
                || pair(AccessNode, CoreSite)
        }
        LinkKind::NCore => x != Ue && y != Ue && (x.is_core_tier() || y.is_core_tier()),
    }
}

pub(super) fn assemble(
    node_list: Vec<Node>,
    links: Vec<Link>,
    placement: Placement,
) -> Result<Topology, ValidationError> {
    if node_list.is_empty() {
        return Err(ValidationError::Empty);
    }
    let mut nodes = BTreeMap::new();
    for n in node_list {
        if n.iab_mt && n.kind != NodeKind::AccessNode {
            return Err(ValidationError::MtOnNonAccess(n.id));
        }
        let id = n.id;
        if nodes.insert(id, n).is_some() {
            return Err(ValidationError::DuplicateNode(id));
        }
    }

    let mut adjacency: BTreeMap<NodeId, Vec<(LinkId, NodeId)>> =
        nodes.keys().map(|id| (*id, Vec::new())).collect();
    let mut seen_pairs = BTreeSet::new();
    for (i, l) in links.iter().enumerate() {
        let (a, b) = (l.a, l.b);
        for end in [a, b] {
            if !nodes.contains_key(&end) {
                return Err(ValidationError::UnknownNode { a, b, missing: end });
            }
        }
        if a == b {
            return Err(ValidationError::SelfLoop(a));
        }
        if !seen_pairs.insert((a.min(b), a.max(b))) {
            return Err(ValidationError::DuplicateLink(a, b));
        }
        if l.latency_us == 0 {
            return Err(ValidationError::NonPositiveLatency { a, b });
        }
        if !(0.0..=1.0).contains(&l.loss_prob) {
            return Err(ValidationError::LossOutOfRange { a, b });
        }
        let (ak, bk) = (nodes[&a].kind, nodes[&b].kind);
        if !link_kind_allowed(l.kind, ak, bk) {
            return Err(ValidationError::LinkKindMismatch {
                a,
                b,
                kind: l.kind,
                a_kind: ak,
                b_kind: bk,
            });
        }
        adjacency.get_mut(&a).unwrap().push((LinkId(i), b));
        adjacency.get_mut(&b).unwrap().push((LinkId(i), a));
    }
    for adj in adjacency.values_mut() {
        adj.sort_by_key(|(l, n)| (*n, *l));
    }

    for n in nodes.values().filter(|n| n.kind == NodeKind::Ue) {
        let adj = &adjacency[&n.id];
        let ok = adj.len() == 1 && {
            let (l, peer) = adj[0];
            links[l.0].kind == LinkKind::Uu && nodes[&peer].kind == NodeKind::AccessNode
        };
        if !ok {
            return Err(ValidationError::UeAttachment {
                ue: n.id,
                links: adj.len(),
            });
        }
    }

    placement.check().map_err(ValidationError::Placement)?;
    let variant = placement.variant;
    let has_kind = |k: NodeKind| nodes.values().any(|n| n.kind == k);
    for k in [placement.upf_at, placement.cp_core_at] {
        if !has_kind(k) {
            return Err(ValidationError::MissingAnchor { variant, kind: k });
        }
    }

    if !variant.is_coreless() {
        for n in nodes.values().filter(|n| n.kind == NodeKind::DonorNode) {
            let uplink = adjacency[&n.id]
                .iter()
                .any(|(_, p)| nodes[p].kind.is_core_tier());
            if !uplink {
                return Err(ValidationError::DonorWithoutUplink(n.id));
            }
        }
    }

    // Connectivity among all nodes.
    let start = *nodes.keys().next().unwrap();
    let reach = bfs(&adjacency, start, |_| true, |_| true);
    if let Some(missing) = nodes.keys().find(|id| !reach.contains(id)) {
        return Err(ValidationError::Disconnected(*missing, start));
    }

    // A gNB mesh needs direct Xn reachability between UE-serving gNBs.
    if variant == Variant::MeshUrllc {
        let serving: BTreeSet<NodeId> = nodes
            .values()
            .filter(|n| n.kind == NodeKind::Ue)
            .map(|n| adjacency[&n.id][0].1)
            .collect();
        let mut iter = serving.iter();
        if let Some(&first) = iter.next() {
            let via_xn = bfs(
                &adjacency,
                first,
                |n| nodes[&n].kind.is_ran(),
                |l| links[l.0].kind == LinkKind::Xn,
            );
            if let Some(&b) = iter.find(|b| !via_xn.contains(b)) {
                return Err(ValidationError::MissingMeshLink {
                    variant,
                    a: first,
                    b,
                });
            }
        }
    }

    Ok(Topology {
        nodes,
        links,
        adjacency,
        placement,
    })
}

fn bfs(
    adjacency: &BTreeMap<NodeId, Vec<(LinkId, NodeId)>>,
    start: NodeId,
    node_ok: impl Fn(NodeId) -> bool,
    link_ok: impl Fn(LinkId) -> bool,
) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(n) = queue.pop_front() {
        for &(l, m) in &adjacency[&n] {
            if link_ok(l) && node_ok(m) && seen.insert(m) {
                queue.push_back(m);
            }
        }
    }
    seen
}
