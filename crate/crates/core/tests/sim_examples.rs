mod common;

use std::collections::{BTreeSet, VecDeque};

use common::{build, link, node};
use meshran::protocol::RejectReason;
use meshran::session::{Approach, DropReason};
use meshran::sim::{
    reliability_estimate, run, FailureTarget, RunConfig, RunOutput, SessionSpec, TrafficSpec,
    Workload,
};
use meshran::{LinkId, LinkKind, NodeId, NodeKind, Topology, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const UE1: NodeId = NodeId(1);
const UE2: NodeId = NodeId(2);

fn traffic(start_us: u64, count: u64) -> TrafficSpec {
    TrafficSpec {
        start_us,
        interval_us: 1_000,
        count,
        size_bytes: 100,
    }
}

fn one_session(t: TrafficSpec) -> Workload {
    Workload {
        sessions: vec![SessionSpec::new(UE1, UE2, 0).with_traffic(t)],
        ..Default::default()
    }
}

fn go(topo: &Topology, a: Approach, w: &Workload, seed: u64, horizon: u64) -> RunOutput {
    run(topo, a, w, &RunConfig::new(seed, horizon)).expect("valid workload")
}

fn lid(topo: &Topology, a: u32, b: u32) -> LinkId {
    topo.link_between(NodeId(a), NodeId(b))
        .expect("link exists")
}

/// UE1 - 10 - 20(agg) - 11 - UE2 plus a direct Xn 10-11, core 30 behind
/// the aggregation site. Under MESH_URLLC data takes the Xn link while
/// signalling goes through the aggregation site.
fn mesh_split(xn_loss: f64) -> Topology {
    let mut xn = link(10, 11, LinkKind::Xn, 200);
    xn.loss_prob = xn_loss;
    build(
        Variant::MeshUrllc,
        vec![
            node(1, NodeKind::Ue),
            node(2, NodeKind::Ue),
            node(10, NodeKind::AccessNode),
            node(11, NodeKind::AccessNode),
            node(20, NodeKind::AggregationSite),
            node(30, NodeKind::CoreSite),
        ],
        vec![
            link(1, 10, LinkKind::Uu, 300),
            link(11, 2, LinkKind::Uu, 300),
            xn,
            link(10, 20, LinkKind::NCore, 1_500),
            link(11, 20, LinkKind::NCore, 1_500),
            link(20, 30, LinkKind::NCore, 8_000),
        ],
    )
}

#[test]
fn latency_is_additive_along_the_route() {
    // Uu + relay + Xn + relay + Uu.
    let topo = common::pair(LinkKind::Xn, 300, 150);
    let out = go(
        &topo,
        Approach::C,
        &one_session(traffic(50_000, 20)),
        1,
        200_000,
    );
    let s = &out.metrics.sessions[0];
    assert_eq!(s.delivered, 20);
    assert!(s
        .latencies_us
        .iter()
        .all(|&l| l == 300 + 50 + 150 + 50 + 300));

    for a in [Approach::A, Approach::B] {
        let topo = common::pair(a.mesh_interface(), 300, 150);
        let out = go(&topo, a, &one_session(traffic(50_000, 5)), 1, 200_000);
        assert_eq!(out.metrics.sessions[0].p50_us(), Some(850), "{a}");
    }
}

#[test]
fn serialization_delay_adds_to_latency() {
    let mut nodes = vec![node(1, NodeKind::Ue), node(2, NodeKind::Ue)];
    nodes.extend([
        node(10, NodeKind::AccessNode),
        node(11, NodeKind::AccessNode),
    ]);
    let mut xn = link(10, 11, LinkKind::Xn, 150);
    // 100 bytes at 800 kbit/s is 1 ms on the wire.
    xn.bandwidth_bps = Some(800_000);
    let topo = build(
        Variant::IabP2p,
        nodes,
        vec![
            link(1, 10, LinkKind::Uu, 300),
            xn,
            link(11, 2, LinkKind::Uu, 300),
        ],
    );
    let out = go(
        &topo,
        Approach::C,
        &one_session(traffic(50_000, 3)),
        1,
        200_000,
    );
    assert_eq!(out.metrics.sessions[0].p50_us(), Some(850 + 1_000));
}

#[test]
fn dead_mesh_link_times_out_and_nothing_is_delivered() {
    let mut nodes = vec![node(1, NodeKind::Ue), node(2, NodeKind::Ue)];
    nodes.extend([
        node(10, NodeKind::AccessNode),
        node(11, NodeKind::AccessNode),
    ]);
    let mut xn = link(10, 11, LinkKind::Xn, 200);
    xn.loss_prob = 1.0;
    let topo = build(
        Variant::IabP2p,
        nodes,
        vec![
            link(1, 10, LinkKind::Uu, 300),
            xn,
            link(11, 2, LinkKind::Uu, 300),
        ],
    );
    let out = go(
        &topo,
        Approach::C,
        &one_session(traffic(50_000, 10)),
        5,
        500_000,
    );
    let s = &out.metrics.sessions[0];
    assert_eq!(s.last_failure, Some(RejectReason::Timeout));
    assert_eq!(s.establishment_us, None);
    assert_eq!(s.delivered, 0);
    assert_eq!(s.dropped_for(DropReason::NotEstablished), 10);
    assert!(out.metrics.signalling.lost > 0);
}

#[test]
fn same_seed_same_trace() {
    let topo = mesh_split(0.2);
    let w = one_session(traffic(100_000, 200));
    for a in [Approach::A, Approach::C] {
        let x = go(&topo, a, &w, 42, 500_000);
        let y = go(&topo, a, &w, 42, 500_000);
        assert_eq!(x.trace, y.trace);
        assert_eq!(x.metrics, y.metrics);
        let z = go(&topo, a, &w, 43, 500_000);
        assert_ne!(
            x.metrics.sessions[0].latencies_us,
            z.metrics.sessions[0].latencies_us
        );
    }
}

/// Frozen trace of an Approach C handshake plus two packets.
#[test]
fn golden_trace() {
    let topo = common::pair(LinkKind::Xn, 300, 200);
    let out = go(
        &topo,
        Approach::C,
        &one_session(traffic(50_000, 2)),
        1,
        100_000,
    );
    let golden = include_str!("golden/pair_c.trace");
    assert_eq!(out.trace.to_string(), golden);
}

#[test]
fn trace_lines_have_the_documented_shape() {
    let topo = common::pair(LinkKind::Xn, 300, 200);
    let out = go(
        &topo,
        Approach::C,
        &one_session(traffic(50_000, 2)),
        1,
        100_000,
    );
    let text = out.trace.to_string();
    let first = text.lines().next().unwrap();
    let cols: Vec<&str> = first.split(" | ").collect();
    assert_eq!(cols.len(), 5, "{first}");
    assert!(cols[2].contains(" -> "));
    let data: Vec<_> = out.trace.data().collect();
    assert_eq!(data.len(), 2);
    assert_eq!(data[0].path, [UE1, NodeId(10), NodeId(11), UE2]);
    // Times never go backwards.
    let times: Vec<u64> = out.trace.lines().iter().map(|l| l.time_us).collect();
    assert!(times.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn approach_a_reroutes_around_a_failed_link() {
    let topo = common::triangle();
    let mut w = one_session(traffic(50_000, 100));
    w.failures
        .push((100_500, FailureTarget::Link(lid(&topo, 10, 11))));
    let out = go(&topo, Approach::A, &w, 9, 400_000);
    let s = &out.metrics.sessions[0];
    // Direct: 300+50+200+50+300. Detour: 300+50+300+50+300+50+300.
    let direct = s.latencies_us.iter().filter(|&&l| l == 900).count();
    let detour = s.latencies_us.iter().filter(|&&l| l == 1_350).count();
    // The packet sent at 100000 is on the link when it fails.
    assert_eq!(direct, 50);
    assert_eq!(s.dropped_for(DropReason::LinkDown), 1);
    assert!(detour >= 48, "{detour}");
    assert_eq!(direct + detour, s.delivered as usize);
    let last = out.trace.data().last().unwrap();
    assert_eq!(last.path, [UE1, NodeId(10), NodeId(12), NodeId(11), UE2]);
    assert_eq!(out.metrics.failures[0].reconvergence_us(), Some(0));
    assert_eq!(s.injected, s.delivered + s.dropped_total());
}

#[test]
fn every_approach_recovers_on_the_triangle() {
    let topo = common::triangle();
    let mut w = one_session(traffic(50_000, 200));
    w.failures
        .push((100_500, FailureTarget::Link(lid(&topo, 10, 11))));
    for a in [Approach::A, Approach::C] {
        let out = go(&topo, a, &w, 9, 400_000);
        let s = &out.metrics.sessions[0];
        assert!(s.delivery_ratio().unwrap() > 0.95, "{a}: {s:?}");
        let r = &out.metrics.failures[0];
        assert_eq!(r.affected, [0]);
        assert!(r.reconvergence_us().is_some(), "{a}");
        assert!(out
            .trace
            .lines()
            .iter()
            .any(|l| l.tag.starts_with("FAIL_LINK")));
    }
}

#[test]
fn unrelated_failure_leaves_session_metrics_alone() {
    let topo = common::triangle();
    let base = one_session(traffic(50_000, 100));
    let mut w = base.clone();
    w.failures
        .push((80_000, FailureTarget::Link(lid(&topo, 12, 11))));
    for a in [Approach::A, Approach::C] {
        let x = go(&topo, a, &base, 3, 300_000);
        let y = go(&topo, a, &w, 3, 300_000);
        assert_eq!(x.metrics.sessions, y.metrics.sessions, "{a}");
        assert!(y.metrics.failures[0].affected.is_empty());
        assert_eq!(y.metrics.failures[0].reconvergence_us(), Some(0));
    }
}

/// Reachability from `src` to `dst` over links allowed for `approach`,
/// minus the failed ones.
fn reachable(topo: &Topology, approach: Approach, failed: &BTreeSet<LinkId>) -> bool {
    let mesh = approach.mesh_interface();
    let mut seen = BTreeSet::from([UE1]);
    let mut queue = VecDeque::from([UE1]);
    while let Some(n) = queue.pop_front() {
        for &(l, m) in topo.neighbors(n) {
            let link = topo.link(l);
            let gnb_gnb = [link.a, link.b]
                .iter()
                .all(|x| topo.kind(*x) == Some(NodeKind::AccessNode));
            if failed.contains(&l) || (gnb_gnb && link.kind != mesh) {
                continue;
            }
            if seen.insert(m) {
                queue.push_back(m);
            }
        }
    }
    seen.contains(&UE2)
}

#[test]
fn cutting_the_only_route_drops_everything_after() {
    let topo = common::pair(LinkKind::Xn, 300, 200);
    let cut = lid(&topo, 10, 11);
    assert!(!reachable(&topo, Approach::C, &BTreeSet::from([cut])));
    let mut w = one_session(traffic(50_000, 100));
    w.failures.push((100_500, FailureTarget::Link(cut)));
    let out = go(&topo, Approach::C, &w, 1, 400_000);
    let s = &out.metrics.sessions[0];
    assert_eq!(s.delivered, 50);
    assert_eq!(s.dropped_for(DropReason::LinkDown), 1);
    // One packet falls in the re-request window, the rest find no route.
    let refused = s.dropped_for(DropReason::NoRoute) + s.dropped_for(DropReason::NotEstablished);
    assert_eq!(refused, 49, "{:?}", s.dropped);
    assert!(s.dropped_for(DropReason::NoRoute) >= 45);
    assert_eq!(out.metrics.failures[0].reconvergence_us(), None);
}

#[test]
fn node_failure_is_reported() {
    let topo = common::triangle();
    let mut w = one_session(traffic(50_000, 100));
    w.failures.push((100_500, FailureTarget::Node(NodeId(12))));
    let out = go(&topo, Approach::A, &w, 1, 300_000);
    assert!(out.trace.lines().iter().any(|l| l.tag == "FAIL_NODE:12"));
    assert_eq!(out.metrics.sessions[0].delivered, 100);
}

#[test]
fn link_recovery_restores_service() {
    let cut = lid(&common::pair(LinkKind::Xn, 300, 200), 10, 11);
    let mut w = one_session(traffic(50_000, 200));
    w.failures.push((100_500, FailureTarget::Link(cut)));
    w.recoveries.push((150_500, cut));
    for a in [Approach::A, Approach::B, Approach::C] {
        let topo = common::pair(a.mesh_interface(), 300, 200);
        let out = go(&topo, a, &w, 1, 400_000);
        let s = &out.metrics.sessions[0];
        assert!(s.delivered >= 140, "{a}: {s:?}");
        assert!(out
            .trace
            .lines()
            .iter()
            .any(|l| l.tag.starts_with("RECOVER_LINK")));
    }
}

#[test]
fn release_stops_delivery() {
    let topo = common::pair(LinkKind::Xn, 300, 200);
    let mut w = one_session(traffic(50_000, 100));
    w.releases.push((100_500, UE1, UE2));
    let out = go(&topo, Approach::C, &w, 1, 300_000);
    let s = &out.metrics.sessions[0];
    assert_eq!(s.delivered, 51);
    assert_eq!(s.dropped_for(DropReason::NotEstablished), 49);
    for g in [NodeId(10), NodeId(11)] {
        assert!(out.nodes[&g].mapping.is_empty());
        assert_eq!(out.nodes[&g].ledger.allocated(), 0);
    }
}

#[test]
fn tight_budget_counts_violations() {
    let topo = common::pair(LinkKind::Xn, 300, 200);
    let mut w = one_session(traffic(50_000, 10));
    // The budget is checked against packet age at each forwarding gNB; at
    // the destination gNB the age is 300 + 50 + 200.
    w.sessions[0].qos = meshran::protocol::QosProfile::xurllc(500);
    let out = go(&topo, Approach::C, &w, 1, 200_000);
    let s = &out.metrics.sessions[0];
    assert_eq!(s.delivered, 10);
    assert_eq!(s.qos_violations, 10);
}

#[test]
fn invalid_workloads_are_rejected() {
    let topo = common::pair(LinkKind::Xn, 300, 200);
    let cfg = RunConfig::new(1, 1_000);
    let bad = [
        Workload {
            sessions: vec![SessionSpec::new(UE1, UE1, 0)],
            ..Default::default()
        },
        Workload {
            sessions: vec![SessionSpec::new(UE1, NodeId(10), 0)],
            ..Default::default()
        },
        Workload {
            sessions: vec![SessionSpec::new(UE1, UE2, 0), SessionSpec::new(UE1, UE2, 5)],
            ..Default::default()
        },
        Workload {
            failures: vec![(10, FailureTarget::Link(LinkId(99)))],
            ..Default::default()
        },
        Workload {
            releases: vec![(10, UE1, UE2)],
            ..Default::default()
        },
    ];
    for w in bad {
        assert!(run(&topo, Approach::C, &w, &cfg).is_err(), "{w:?}");
    }
}

#[test]
fn reliability_examples() {
    let topo = common::triangle();
    let e = reliability_estimate(&topo, NodeId(10), NodeId(11), 2, 10_000, 1);
    assert_eq!(e.paths.len(), 2);
    assert_eq!((e.analytic, e.monte_carlo), (1.0, 1.0));

    let mut xn = link(10, 11, LinkKind::Xn, 200);
    xn.loss_prob = 0.01;
    let lossy = build(
        Variant::IabP2p,
        vec![
            node(10, NodeKind::AccessNode),
            node(11, NodeKind::AccessNode),
        ],
        vec![xn],
    );
    let e = reliability_estimate(&lossy, NodeId(10), NodeId(11), 3, 100_000, 1);
    assert_eq!(e.paths.len(), 1);
    assert!((e.analytic - 0.99).abs() < 1e-12);
    assert!(e.within_sigmas(3.0));

    // Two disjoint routes, each with one 10% lossy link.
    let mut direct = link(10, 11, LinkKind::Xn, 200);
    direct.loss_prob = 0.1;
    let mut detour = link(10, 12, LinkKind::Xn, 200);
    detour.loss_prob = 0.1;
    let two = build(
        Variant::IabP2p,
        vec![
            node(10, NodeKind::AccessNode),
            node(11, NodeKind::AccessNode),
            node(12, NodeKind::AccessNode),
        ],
        vec![direct, detour, link(12, 11, LinkKind::Xn, 200)],
    );
    let e = reliability_estimate(&two, NodeId(10), NodeId(11), 2, 100_000, 3);
    assert!((e.analytic - 0.99).abs() < 1e-12);
    assert!(e.within_sigmas(3.0));

    // Triangle, every link 1% lossy, k = 2.
    let mut spec_links = Vec::new();
    for (a, b) in [(10, 11), (10, 12), (12, 11)] {
        let mut l = link(a, b, LinkKind::Xn, 200);
        l.loss_prob = 0.01;
        spec_links.push(l);
    }
    let tri = build(
        Variant::IabP2p,
        vec![
            node(10, NodeKind::AccessNode),
            node(11, NodeKind::AccessNode),
            node(12, NodeKind::AccessNode),
        ],
        spec_links,
    );
    let e = reliability_estimate(&tri, NodeId(10), NodeId(11), 2, 100_000, 4);
    let expect = 1.0 - 0.01 * (1.0 - 0.99f64 * 0.99);
    assert!((e.analytic - expect).abs() < 1e-12);
    assert!(e.within_sigmas(3.0));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = common::random_spec(&mut rng, Variant::IabP2p, 6);
    let spec = common::with_random_loss(&mut rng, spec, 0.1);
    let topo = spec.build().unwrap();
    for k in 1..=3 {
        let e = reliability_estimate(&topo, NodeId(10), NodeId(11), k, 100_000, k as u64);
        assert!(e.within_sigmas(3.0), "k={k}: {e:?}");
    }
}

#[test]
fn reliability_grows_with_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..30 {
        let spec = common::random_spec(&mut rng, Variant::IabP2p, 8);
        let spec = common::with_random_loss(&mut rng, spec, 0.2);
        let topo = spec.build().unwrap();
        let a: Vec<f64> = (1..=3)
            .map(|k| reliability_estimate(&topo, NodeId(10), NodeId(11), k, 0, 0).analytic)
            .collect();
        assert!(a[0] <= a[1] + 1e-12 && a[1] <= a[2] + 1e-12, "{a:?}");
    }
}

#[test]
fn observed_loss_matches_link_loss() {
    // Only data crosses the lossy Xn link.
    let p = 0.1;
    let n = 4_000u64;
    let topo = mesh_split(p);
    let t = TrafficSpec {
        start_us: 100_000,
        interval_us: 100,
        count: n,
        size_bytes: 100,
    };
    let out = go(&topo, Approach::C, &one_session(t), 77, 1_000_000);
    let s = &out.metrics.sessions[0];
    assert_eq!(s.injected, n);
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    let lost = s.dropped_for(DropReason::LinkLoss) as f64;
    assert!((lost - n as f64 * p).abs() <= 3.0 * sigma, "lost {lost}");
    assert_eq!(s.delivered + s.dropped_total(), n);
}

fn random_workload<R: Rng>(rng: &mut R, topo: &Topology) -> Workload {
    let mut w = Workload::default();
    let mut pairs = vec![(UE1, UE2)];
    if rng.gen_bool(0.5) {
        pairs.push((UE2, UE1));
    }
    for (s, d) in pairs {
        let t = TrafficSpec {
            start_us: rng.gen_range(20_000..80_000),
            interval_us: rng.gen_range(200..5_000),
            count: rng.gen_range(0..60),
            size_bytes: rng.gen_range(1..1_500),
        };
        w.sessions
            .push(SessionSpec::new(s, d, rng.gen_range(0..10_000)).with_traffic(t));
    }
    let links: Vec<LinkId> = topo.link_ids().collect();
    for _ in 0..rng.gen_range(0..3) {
        let l = links[rng.gen_range(0..links.len())];
        let at = rng.gen_range(30_000..150_000);
        w.failures.push((at, FailureTarget::Link(l)));
        if rng.gen_bool(0.5) {
            w.recoveries.push((at + rng.gen_range(1..50_000), l));
        }
    }
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn packets_are_conserved(seed in any::<u64>(), ai in 0usize..3, vi in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let variant = [Variant::IabP2p, Variant::IabCoreInDu, Variant::IabCoreInCu, Variant::MeshUrllc][vi];
        let spec = common::random_spec(&mut rng, variant, 8);
        let spec = common::with_random_loss(&mut rng, spec, 0.05);
        let topo = spec.build().unwrap();
        let w = random_workload(&mut rng, &topo);
        let a = Approach::ALL[ai];
        let out = go(&topo, a, &w, seed, 200_000);
        for s in &out.metrics.sessions {
            prop_assert_eq!(s.injected, s.delivered + s.dropped_total());
            prop_assert_eq!(s.latencies_us.len() as u64, s.delivered);
        }
        for n in out.nodes.values() {
            prop_assert!(n.ledger.allocated() <= n.ledger.capacity());
        }
        let again = go(&topo, a, &w, seed, 200_000);
        prop_assert_eq!(out.trace, again.trace);
    }
}
