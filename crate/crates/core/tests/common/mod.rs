//! Topology builders and a message pump shared by the integration tests.
#![allow(dead_code)]

pub mod harness;

use meshran::topology::{LinkSpec, NodeSpec, PlacementSpec};
use meshran::{LinkKind, NodeKind, Topology, TopologySpec, Variant};

pub fn node(id: u32, kind: NodeKind) -> NodeSpec {
    NodeSpec {
        id,
        kind,
        iab_mt: false,
        capacity_sessions: None,
    }
}

pub fn link(a: u32, b: u32, kind: LinkKind, latency_us: u64) -> LinkSpec {
    LinkSpec {
        a,
        b,
        kind,
        latency_us,
        loss_prob: 0.0,
        capacity_sessions: 64,
        bandwidth_bps: None,
    }
}

pub fn build(variant: Variant, nodes: Vec<NodeSpec>, links: Vec<LinkSpec>) -> Topology {
    TopologySpec {
        placement: PlacementSpec::from(variant),
        nodes,
        links,
    }
    .build()
    .expect("valid test topology")
}

/// UE 1 - gNB 10 - gNB 11 - UE 2 with the given gNB-gNB interface.
pub fn pair(kind: LinkKind, uu_us: u64, mesh_us: u64) -> Topology {
    build(
        Variant::IabP2p,
        vec![
            node(1, NodeKind::Ue),
            node(2, NodeKind::Ue),
            node(10, NodeKind::AccessNode),
            node(11, NodeKind::AccessNode),
        ],
        vec![
            link(1, 10, LinkKind::Uu, uu_us),
            link(10, 11, kind, mesh_us),
            link(11, 2, LinkKind::Uu, uu_us),
        ],
    )
}

/// Both gNB-gNB interfaces present, so every approach applies.
pub fn pair_both(uu_us: u64, xn_us: u64) -> Topology {
    build(
        Variant::IabP2p,
        vec![
            node(1, NodeKind::Ue),
            node(2, NodeKind::Ue),
            node(10, NodeKind::AccessNode),
            node(11, NodeKind::AccessNode),
            node(12, NodeKind::AccessNode),
        ],
        vec![
            link(1, 10, LinkKind::Uu, uu_us),
            link(10, 11, LinkKind::Xn, xn_us),
            link(10, 12, LinkKind::Uu, xn_us),
            link(12, 11, LinkKind::Uu, xn_us),
            link(11, 2, LinkKind::Uu, uu_us),
        ],
    )
}

/// Triangle of gNBs 10, 11, 12 over Xn; UE 1 on 10, UE 2 on 11.
/// The direct 10-11 link is the fastest.
pub fn triangle() -> Topology {
    build(
        Variant::IabP2p,
        vec![
            node(1, NodeKind::Ue),
            node(2, NodeKind::Ue),
            node(10, NodeKind::AccessNode),
            node(11, NodeKind::AccessNode),
            node(12, NodeKind::AccessNode),
        ],
        vec![
            link(1, 10, LinkKind::Uu, 300),
            link(10, 11, LinkKind::Xn, 200),
            link(10, 12, LinkKind::Xn, 300),
            link(12, 11, LinkKind::Xn, 300),
            link(11, 2, LinkKind::Uu, 300),
        ],
    )
}

use rand::seq::SliceRandom;
use rand::Rng;

/// Random valid topology of at most `max_nodes` nodes for `variant`.
///
/// UE 1 sits on gNB 10 and UE 2 on gNB 11; further gNBs are 12, 13, ...
/// Tier nodes are 40 (donor), 50 (aggregation) and 60 (core), present as
/// the variant requires plus at random.
pub fn random_spec<R: Rng>(rng: &mut R, variant: Variant, max_nodes: usize) -> TopologySpec {
    assert!(max_nodes >= 5);
    let needs_donor = matches!(
        variant,
        Variant::IabCentral | Variant::IabCoreInCu | Variant::IabCoreInDu | Variant::IabP2p
    ) && (variant == Variant::IabCoreInCu || rng.gen_bool(0.5));
    let needs_agg = matches!(variant, Variant::AggUpf | Variant::MeshUrllc);
    let needs_core = matches!(
        variant,
        Variant::EmbbCentral | Variant::CloudConverged | Variant::AggUpf | Variant::IabCentral
    );
    let has_agg = needs_agg || (!variant.is_coreless() && rng.gen_bool(0.3));
    let has_core = needs_core || (!variant.is_coreless() && has_agg && rng.gen_bool(0.3));
    let tiers = needs_donor as usize + has_agg as usize + has_core as usize;
    let budget = max_nodes - 2 - tiers;
    let n_access = rng.gen_range(2..=budget.min(6));

    let mut nodes = vec![node(1, NodeKind::Ue), node(2, NodeKind::Ue)];
    let access: Vec<u32> = (0..n_access as u32).map(|i| 10 + i).collect();
    for &a in &access {
        let mut n = node(a, NodeKind::AccessNode);
        n.iab_mt = rng.gen_bool(0.3);
        nodes.push(n);
    }
    let mut links = vec![
        link(1, 10, LinkKind::Uu, rng.gen_range(100..=500)),
        link(2, 11, LinkKind::Uu, rng.gen_range(100..=500)),
    ];
    let edge = |a: u32, b: u32, kind: LinkKind, lat: u64, links: &mut Vec<LinkSpec>| {
        if !links
            .iter()
            .any(|l| (l.a, l.b) == (a, b) || (l.a, l.b) == (b, a))
        {
            links.push(link(a, b, kind, lat));
        }
    };
    let mesh_kind = |rng: &mut R| {
        if variant == Variant::MeshUrllc || rng.gen_bool(0.6) {
            LinkKind::Xn
        } else {
            LinkKind::Uu
        }
    };
    // Random spanning tree over the gNBs.
    let mut order = access.clone();
    order.shuffle(rng);
    for i in 1..order.len() {
        let parent = order[rng.gen_range(0..i)];
        let kind = mesh_kind(rng);
        let lat = rng.gen_range(50..=1000);
        edge(parent, order[i], kind, lat, &mut links);
    }
    for _ in 0..rng.gen_range(0..=n_access) {
        let a = *access.choose(rng).unwrap();
        let b = *access.choose(rng).unwrap();
        if a != b {
            let kind = if rng.gen_bool(0.5) {
                LinkKind::Xn
            } else {
                LinkKind::Uu
            };
            let lat = rng.gen_range(50..=1000);
            edge(a, b, kind, lat, &mut links);
        }
    }
    if needs_donor {
        nodes.push(node(40, NodeKind::DonorNode));
        for &a in &access {
            if a == access[0] || rng.gen_bool(0.4) {
                let kind = if rng.gen_bool(0.7) {
                    LinkKind::F1
                } else {
                    LinkKind::Xn
                };
                let lat = rng.gen_range(200..=1500);
                edge(40, a, kind, lat, &mut links);
            }
        }
    }
    let ran: Vec<u32> = access
        .iter()
        .copied()
        .chain(needs_donor.then_some(40))
        .collect();
    if has_agg {
        nodes.push(node(50, NodeKind::AggregationSite));
        let first = *ran.choose(rng).unwrap();
        for &r in &ran {
            if r == first || (r == 40 && !variant.is_coreless()) || rng.gen_bool(0.3) {
                let lat = rng.gen_range(500..=3000);
                edge(50, r, LinkKind::NCore, lat, &mut links);
            }
        }
    }
    if has_core {
        nodes.push(node(60, NodeKind::CoreSite));
        if has_agg {
            let lat = rng.gen_range(3000..=10000);
            edge(60, 50, LinkKind::NCore, lat, &mut links);
        }
        let first = *ran.choose(rng).unwrap();
        for &r in &ran {
            let must = (!has_agg && r == first) || (r == 40 && !has_agg);
            if must || rng.gen_bool(0.15) {
                let lat = rng.gen_range(5000..=12000);
                edge(60, r, LinkKind::NCore, lat, &mut links);
            }
        }
    }
    TopologySpec {
        placement: PlacementSpec::from(variant),
        nodes,
        links,
    }
}

pub fn random_topology<R: Rng>(rng: &mut R, variant: Variant, max_nodes: usize) -> Topology {
    let spec = random_spec(rng, variant, max_nodes);
    match spec.build() {
        Ok(t) => t,
        Err(e) => panic!("generator produced an invalid {variant} topology: {e}\n{spec:#?}"),
    }
}

/// Gives every non-UE link a random loss probability below `max`.
pub fn with_random_loss<R: Rng>(rng: &mut R, mut spec: TopologySpec, max: f64) -> TopologySpec {
    for l in spec.links.iter_mut() {
        l.loss_prob = rng.gen_range(0.0..max);
    }
    spec
}
