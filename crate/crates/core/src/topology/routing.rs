use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use thiserror::Error;

use super::{LinkId, LinkKind, NodeId, NodeKind, Placement, Topology, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Plane {
    Data,
    Signalling,
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Plane::Data => "data",
            Plane::Signalling => "signalling",
        })
    }
}

/// A route between two nodes.
///
/// Routes anchored at a UPF or CP node outside the direct RAN path are the
/// concatenation of two simple legs through the anchor, so a node next to
/// the anchor can appear twice (the hairpin). Unanchored routes are simple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path {
    pub hops: Vec<NodeId>,
    pub total_latency_us: u64,
    pub plane: Plane,
}

impl Path {
    pub fn visits(&self, topo: &Topology, kind: NodeKind) -> bool {
        self.hops.iter().any(|n| topo.kind(*n) == Some(kind))
    }

    /// Links traversed, in hop order.
    pub fn links(&self, topo: &Topology) -> Vec<LinkId> {
        self.hops
            .windows(2)
            .filter_map(|w| topo.link_between(w[0], w[1]))
            .collect()
    }

    pub fn hop_count(&self) -> usize {
        self.hops.len().saturating_sub(1)
    }

    pub fn is_simple(&self) -> bool {
        let set: BTreeSet<_> = self.hops.iter().collect();
        set.len() == self.hops.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no {plane} path from {src} to {dst} under {variant}")]
pub struct NoPathError {
    pub src: NodeId,
    pub dst: NodeId,
    pub plane: Plane,
    pub variant: Variant,
}

/// Links and nodes currently out of service.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FailureSet {
    pub links: BTreeSet<LinkId>,
    pub nodes: BTreeSet<NodeId>,
}

impl FailureSet {
    pub fn is_empty(&self) -> bool {
        self.links.is_empty() && self.nodes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Relays {
    All,
    RanOnly,
    AccessOnly,
}

#[derive(Debug, Clone, Copy)]
struct PlaneRule {
    relays: Relays,
    anchor: Option<NodeKind>,
}

impl PlaneRule {
    fn for_plane(placement: &Placement, plane: Plane) -> PlaneRule {
        match plane {
            Plane::Data if placement.upf_at.is_ran() => PlaneRule {
                relays: Relays::RanOnly,
                anchor: (placement.upf_at == NodeKind::DonorNode).then_some(NodeKind::DonorNode),
            },
            Plane::Data => PlaneRule {
                relays: Relays::All,
                anchor: Some(placement.upf_at),
            },
            Plane::Signalling => match placement.cp_core_at {
                NodeKind::AccessNode => PlaneRule {
                    relays: if placement.variant == Variant::IabCoreInDu {
                        Relays::AccessOnly
                    } else {
                        Relays::RanOnly
                    },
                    anchor: None,
                },
                NodeKind::DonorNode => PlaneRule {
                    relays: Relays::RanOnly,
                    anchor: Some(NodeKind::DonorNode),
                },
                k => PlaneRule {
                    relays: Relays::All,
                    anchor: Some(k),
                },
            },
        }
    }
}

/// Dijkstra label ordered by latency, then hop count, then hop sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Label {
    latency: u64,
    hops: Vec<NodeId>,
}

impl Ord for Label {
    fn cmp(&self, other: &Self) -> Ordering {
        self.latency
            .cmp(&other.latency)
            .then(self.hops.len().cmp(&other.hops.len()))
            .then_with(|| self.hops.cmp(&other.hops))
    }
}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Placement-aware route computation over a topology and its current
/// failures.
#[derive(Debug, Clone, Copy)]
pub struct Router<'a> {
    topo: &'a Topology,
    failures: Option<&'a FailureSet>,
    mesh_interface: Option<LinkKind>,
}

impl<'a> Router<'a> {
    pub fn new(topo: &'a Topology) -> Self {
        Router {
            topo,
            failures: None,
            mesh_interface: None,
        }
    }

    pub fn with_failures(mut self, failures: &'a FailureSet) -> Self {
        self.failures = Some(failures);
        self
    }

    /// Restrict direct gNB-to-gNB air/Xn links to one interface kind.
    /// F1 and transport links are unaffected.
    pub fn with_mesh_interface(mut self, kind: Option<LinkKind>) -> Self {
        self.mesh_interface = kind;
        self
    }

    pub fn topology(&self) -> &'a Topology {
        self.topo
    }

    pub fn node_usable(&self, n: NodeId) -> bool {
        self.topo.node(n).is_some() && self.failures.is_none_or(|f| !f.nodes.contains(&n))
    }

    pub fn link_usable(&self, l: LinkId) -> bool {
        let link = self.topo.link(l);
        if let Some(f) = self.failures {
            if f.links.contains(&l) || f.nodes.contains(&link.a) || f.nodes.contains(&link.b) {
                return false;
            }
        }
        if let Some(mk) = self.mesh_interface {
            let gnb_pair = self.topo.kind(link.a).is_some_and(NodeKind::is_ran)
                && self.topo.kind(link.b).is_some_and(NodeKind::is_ran);
            if gnb_pair && matches!(link.kind, LinkKind::Uu | LinkKind::Xn) && link.kind != mk {
                return false;
            }
        }
        true
    }

    fn relay_ok(&self, rule: &PlaneRule, n: NodeId) -> bool {
        let Some(kind) = self.topo.kind(n) else {
            return false;
        };
        self.node_usable(n)
            && kind != NodeKind::Ue
            && match rule.relays {
                Relays::All => true,
                Relays::RanOnly => kind.is_ran(),
                Relays::AccessOnly => kind == NodeKind::AccessNode,
            }
    }

    fn leg(&self, rule: &PlaneRule, src: NodeId, dst: NodeId) -> Option<Label> {
        if src == dst {
            return Some(Label {
                latency: 0,
                hops: vec![src],
            });
        }
        let mut settled = BTreeSet::new();
        let mut heap = BinaryHeap::new();
        heap.push(Reverse(Label {
            latency: 0,
            hops: vec![src],
        }));
        while let Some(Reverse(label)) = heap.pop() {
            let v = *label.hops.last().unwrap();
            if !settled.insert(v) {
                continue;
            }
            if v == dst {
                return Some(label);
            }
            for &(l, w) in self.topo.neighbors(v) {
                if settled.contains(&w) || !self.link_usable(l) {
                    continue;
                }
                if w != dst && !self.relay_ok(rule, w) {
                    continue;
                }
                let mut hops = label.hops.clone();
                hops.push(w);
                heap.push(Reverse(Label {
                    latency: label.latency + self.topo.link(l).latency_us,
                    hops,
                }));
            }
        }
        None
    }

    /// Minimum-latency route honoring the placement's anchoring rule for
    /// `plane`. Ties go to fewer hops, then the lexicographically smallest
    /// hop sequence.
    pub fn path(&self, src: NodeId, dst: NodeId, plane: Plane) -> Result<Path, NoPathError> {
        let err = || NoPathError {
            src,
            dst,
            plane,
            variant: self.topo.placement().variant,
        };
        if !self.node_usable(src) || !self.node_usable(dst) {
            return Err(err());
        }
        if src == dst {
            return Ok(Path {
                hops: vec![src],
                total_latency_us: 0,
                plane,
            });
        }
        let rule = PlaneRule::for_plane(self.topo.placement(), plane);
        let is_anchor = |n: NodeId, k: NodeKind| self.topo.kind(n) == Some(k);
        let best = match rule.anchor {
            Some(k) if !is_anchor(src, k) && !is_anchor(dst, k) => self
                .topo
                .nodes()
                .filter(|n| n.kind == k && self.node_usable(n.id))
                .filter_map(|a| {
                    let first = self.leg(&rule, src, a.id)?;
                    let second = self.leg(&rule, a.id, dst)?;
                    let mut hops = first.hops;
                    hops.extend_from_slice(&second.hops[1..]);
                    Some(Label {
                        latency: first.latency + second.latency,
                        hops,
                    })
                })
                .min(),
            _ => self.leg(&rule, src, dst),
        };
        best.map(|l| Path {
            hops: l.hops,
            total_latency_us: l.latency,
            plane,
        })
        .ok_or_else(err)
    }

    /// Up to `k` pairwise link-disjoint data-plane routes, ascending by
    /// latency. Minimises the summed latency of the set (successive
    /// shortest augmenting paths on a unit-capacity residual graph).
    ///
    /// Under centrally anchored placements every route hairpins through the
    /// same UPF, so at most the single anchored route is returned.
    pub fn k_disjoint(&self, src: NodeId, dst: NodeId, k: usize) -> Vec<Path> {
        if k == 0 {
            return Vec::new();
        }
        let Ok(shortest) = self.path(src, dst, Plane::Data) else {
            return Vec::new();
        };
        let rule = PlaneRule::for_plane(self.topo.placement(), Plane::Data);
        let anchored = rule
            .anchor
            .is_some_and(|a| self.topo.kind(src) != Some(a) && self.topo.kind(dst) != Some(a));
        if k == 1 || anchored || src == dst {
            return vec![shortest];
        }

        let mut flow = FlowGraph::default();
        let endpoint_ok = |x: NodeId, y: NodeId| {
            x != dst
                && y != src
                && (x == src || self.relay_ok(&rule, x))
                && (y == dst || self.relay_ok(&rule, y))
        };
        for l in self.topo.link_ids() {
            if !self.link_usable(l) {
                continue;
            }
            let link = self.topo.link(l);
            for (x, y) in [(link.a, link.b), (link.b, link.a)] {
                if endpoint_ok(x, y) {
                    flow.add_arc(x, y, link.latency_us as i64, l);
                }
            }
        }
        let mut found = 0;
        while found < k && flow.augment(src, dst) {
            found += 1;
        }
        if found <= 1 {
            return vec![shortest];
        }

        let mut paths: Vec<Path> = flow
            .decompose(src, dst)
            .into_iter()
            .map(|hops| Path {
                total_latency_us: self.topo.hops_latency_us(&hops).unwrap_or(0),
                hops,
                plane: Plane::Data,
            })
            .collect();
        paths.sort_by(|a, b| {
            a.total_latency_us
                .cmp(&b.total_latency_us)
                .then(a.hops.len().cmp(&b.hops.len()))
                .then_with(|| a.hops.cmp(&b.hops))
        });
        paths
    }
}

#[derive(Debug, Clone)]
struct Arc {
    from: NodeId,
    to: NodeId,
    cap: i64,
    cost: i64,
    rev: usize,
    link: Option<LinkId>,
}

#[derive(Debug, Default)]
struct FlowGraph {
    arcs: Vec<Arc>,
}

impl FlowGraph {
    fn add_arc(&mut self, from: NodeId, to: NodeId, cost: i64, link: LinkId) {
        let i = self.arcs.len();
        self.arcs.push(Arc {
            from,
            to,
            cap: 1,
            cost,
            rev: i + 1,
            link: Some(link),
        });
        self.arcs.push(Arc {
            from: to,
            to: from,
            cap: 0,
            cost: -cost,
            rev: i,
            link: None,
        });
    }

    /// One unit along a cheapest residual path (Bellman-Ford; residual
    /// costs can be negative).
    fn augment(&mut self, src: NodeId, dst: NodeId) -> bool {
        let mut dist: BTreeMap<NodeId, i64> = BTreeMap::from([(src, 0)]);
        let mut pred: BTreeMap<NodeId, usize> = BTreeMap::new();
        let rounds = self.arcs.len() + 1;
        for _ in 0..rounds {
            let mut changed = false;
            for (i, a) in self.arcs.iter().enumerate() {
                if a.cap <= 0 {
                    continue;
                }
                let Some(&du) = dist.get(&a.from) else {
                    continue;
                };
                let cand = du + a.cost;
                if dist.get(&a.to).is_none_or(|&dv| cand < dv) {
                    dist.insert(a.to, cand);
                    pred.insert(a.to, i);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if !dist.contains_key(&dst) {
            return false;
        }
        let mut v = dst;
        while v != src {
            let i = pred[&v];
            self.arcs[i].cap -= 1;
            let r = self.arcs[i].rev;
            self.arcs[r].cap += 1;
            v = self.arcs[i].from;
        }
        true
    }

    fn decompose(&self, src: NodeId, dst: NodeId) -> Vec<Vec<NodeId>> {
        // Net flow per link; opposite flows on the same link cancel.
        let mut net: BTreeMap<LinkId, (NodeId, NodeId, i64)> = BTreeMap::new();
        for a in self.arcs.iter().filter(|a| a.link.is_some()) {
            let used = 1 - a.cap;
            if used == 0 {
                continue;
            }
            let l = a.link.unwrap();
            let e = net.entry(l).or_insert((a.from, a.to, 0));
            if e.0 == a.from {
                e.2 += used;
            } else {
                e.2 -= used;
            }
        }
        let mut out: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for (from, to, f) in net.values() {
            match f.cmp(&0) {
                Ordering::Greater => out.entry(*from).or_default().push(*to),
                Ordering::Less => out.entry(*to).or_default().push(*from),
                Ordering::Equal => {}
            }
        }
        for v in out.values_mut() {
            v.sort_unstable_by(|a, b| b.cmp(a));
        }

        let mut paths = Vec::new();
        while out.get(&src).is_some_and(|v| !v.is_empty()) {
            let mut hops = vec![src];
            let mut v = src;
            while v != dst {
                let Some(next) = out.get_mut(&v).and_then(Vec::pop) else {
                    break;
                };
                if let Some(pos) = hops.iter().position(|h| *h == next) {
                    hops.truncate(pos + 1);
                } else {
                    hops.push(next);
                }
                v = next;
            }
            if v == dst {
                paths.push(hops);
            } else {
                break;
            }
        }
        paths
    }
}

/// Route between `src` and `dst` on an intact topology.
pub fn compute_path(
    topology: &Topology,
    src: NodeId,
    dst: NodeId,
    plane: Plane,
) -> Result<Path, NoPathError> {
    Router::new(topology).path(src, dst, plane)
}

/// Up to `k` link-disjoint data-plane routes on an intact topology.
pub fn k_disjoint_paths(topology: &Topology, src: NodeId, dst: NodeId, k: usize) -> Vec<Path> {
    Router::new(topology).k_disjoint(src, dst, k)
}
