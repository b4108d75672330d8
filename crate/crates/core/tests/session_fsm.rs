mod common;

use common::harness::{routable, Harness};
use common::{build, link, node};
use meshran::protocol::{Body, MessageTag as T, ProtocolMessage, RejectReason, SessionId};
use meshran::session::{
    mesh_layer_step, Approach, FsmState, MeshComponent, MeshEvent, MeshState, Role, SourceBState,
    StateEffect, TargetBState, UeState, XnState,
};
use meshran::{LinkKind, NodeId, NodeKind, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const UE1: NodeId = NodeId(1);
const UE2: NodeId = NodeId(2);
const G1: NodeId = NodeId(10);
const G2: NodeId = NodeId(11);

fn transitions(effects: &[StateEffect]) -> Vec<(FsmState, FsmState)> {
    effects
        .iter()
        .filter_map(|e| match e {
            StateEffect::Transition { from, to, .. } => Some((*from, *to)),
            _ => None,
        })
        .collect()
}

#[test]
fn source_b_accepts_request_and_notifies_target() {
    let topo = common::pair(LinkKind::Uu, 300, 200);
    let mut h = Harness::new(&topo, Approach::B);
    h.start(UE1, UE2, 1);
    let req = h.pending.remove(0);
    assert_eq!(req.tag(), T::RrcSessionRequest);
    let out = h.inject(&req);
    let tags: Vec<_> = out.outgoing.iter().map(|m| m.tag()).collect();
    assert_eq!(tags, [T::RrcSessionResponse, T::GnbNotification]);
    match &out.outgoing[0].body {
        Body::RrcSessionResponse { result, .. } => assert_eq!(*result, Ok(SessionId(1))),
        b => panic!("unexpected {b:?}"),
    }
    use SourceBState::*;
    assert_eq!(
        transitions(&out.effects),
        [
            (FsmState::SourceB(Idle), FsmState::SourceB(ResourceChecked)),
            (
                FsmState::SourceB(ResourceChecked),
                FsmState::SourceB(AwaitTargetResponse)
            ),
        ]
    );
}

#[test]
fn b_happy_path_emission_order() {
    let topo = common::pair(LinkKind::Uu, 300, 200);
    let mut h = Harness::new(&topo, Approach::B);
    h.start(UE1, UE2, 1);
    h.run_fifo();
    let network: Vec<_> = h
        .emitted_tags()
        .into_iter()
        .filter(|t| *t != T::RrcSessionRequest)
        .collect();
    assert_eq!(
        network,
        [
            T::RrcSessionResponse,
            T::GnbNotification,
            T::GnbNotificationResponse,
            T::PathConfiguration,
            T::PathConfiguration,
            T::PathComplete,
            T::PathComplete,
        ]
    );
    assert!(h.established(UE1, UE2));
    h.check_cross_reference(UE1, UE2);
    assert!(h.violations.is_empty());
    // One mapping row per gNB.
    assert_eq!(h.nodes[&G1].mapping.len(), 1);
    assert_eq!(h.nodes[&G2].mapping.len(), 1);
}

#[test]
fn full_target_rejects_and_source_fails() {
    let mut nodes = vec![
        node(1, NodeKind::Ue),
        node(2, NodeKind::Ue),
        node(10, NodeKind::AccessNode),
        node(11, NodeKind::AccessNode),
    ];
    nodes[3].capacity_sessions = Some(0);
    let topo = build(
        Variant::IabP2p,
        nodes,
        vec![
            link(1, 10, LinkKind::Uu, 300),
            link(10, 11, LinkKind::Uu, 200),
            link(11, 2, LinkKind::Uu, 300),
        ],
    );
    let mut h = Harness::new(&topo, Approach::B);
    h.start(UE1, UE2, 1);
    h.deliver(0); // request at the source gNB
    let notif = h
        .pending
        .iter()
        .position(|m| m.tag() == T::GnbNotification)
        .unwrap();
    let out = h.deliver(notif);
    assert_eq!(out.outgoing.len(), 1);
    match &out.outgoing[0].body {
        Body::GnbNotificationResponse { accept, reason, .. } => {
            assert!(!accept);
            assert_eq!(*reason, Some(RejectReason::NoResources));
        }
        b => panic!("unexpected {b:?}"),
    }
    assert_eq!(
        out.after,
        Some(FsmState::TargetB(TargetBState::Failed(
            RejectReason::NoResources
        )))
    );
    let resp = h
        .pending
        .iter()
        .position(|m| m.tag() == T::GnbNotificationResponse)
        .unwrap();
    let out = h.deliver(resp);
    assert_eq!(
        out.after,
        Some(FsmState::SourceB(SourceBState::Failed(
            RejectReason::TargetRejected
        )))
    );
    h.run_fifo();
    assert!(!h.established(UE1, UE2));
    assert_eq!(h.nodes[&G1].ledger.allocated(), 0);
    assert_eq!(
        h.nodes[&UE1].ue_session(Role::Source, UE2).map(|s| s.state),
        None
    );
}

#[test]
fn c_happy_path_and_setup_after_activation() {
    let topo = common::pair(LinkKind::Xn, 300, 200);
    let mut h = Harness::new(&topo, Approach::C);
    h.start(UE1, UE2, 2);
    h.run_fifo();
    let network: Vec<_> = h
        .emitted_tags()
        .into_iter()
        .filter(|t| *t != T::RrcSessionRequest && *t != T::RrcSessionResponse)
        .collect();
    assert_eq!(
        network,
        [
            T::XnSetupRequest,
            T::XnSetupResponse,
            T::XnConnectionRequest,
            T::XnConnectionAck,
            T::RrcSessionConfig,
            T::RrcSessionConfig,
            T::RrcComplete,
            T::RrcComplete,
        ]
    );
    assert!(h.established(UE1, UE2));
    h.check_cross_reference(UE1, UE2);
    assert_eq!(
        h.nodes[&G1].xn_association(G2).unwrap().state,
        XnState::Active
    );

    // A second session reuses the cached association.
    let before = h.emitted.len();
    h.start(UE2, UE1, 1);
    h.run_fifo();
    let again: Vec<_> = h.emitted[before..].iter().map(|m| m.tag()).collect();
    assert!(!again.contains(&T::XnSetupRequest));
    assert!(h.established(UE2, UE1));

    // The association is in use: a fresh setup is out of order.
    let setup = ProtocolMessage::new(G2, G1, h.now, Body::XnSetupRequest);
    let out = h.inject(&setup);
    assert!(out.outgoing.is_empty());
    let v = out.violation().expect("violation");
    assert_eq!(v.tag, T::XnSetupRequest);
    assert_eq!(v.state, Some(FsmState::Xn(XnState::Active)));
}

#[test]
fn approach_a_mesh_components() {
    let topo = common::triangle();
    let mut h = Harness::new(&topo, Approach::A);
    h.start(UE1, UE2, 1);
    let auth = h.pending.remove(0);
    assert_eq!(auth.tag(), T::MeshAuthRequest);
    let ctx = h.ctx;
    let g1 = h.nodes.get_mut(&G1).unwrap();
    let ev = MeshEvent::Message(auth.clone());
    assert!(mesh_layer_step(g1, &ctx, MeshComponent::DynamicMgmt, &ev, 1).is_err());
    let (out, _) = mesh_layer_step(g1, &ctx, MeshComponent::AccessHandover, &ev, 1).unwrap();
    match &out.outgoing[0].body {
        Body::MeshAuthResponse { result, .. } => assert!(result.is_ok()),
        b => panic!("unexpected {b:?}"),
    }
    assert_eq!(out.after, Some(FsmState::Mesh(MeshState::Authenticated)));
    h.apply(G1, out);
    h.run_fifo();
    assert!(h.established(UE1, UE2));
    h.check_cross_reference(UE1, UE2);
    // Coreless topology: nothing went beyond gNBs and UEs.
    assert!(h.emitted.iter().all(|m| {
        [m.src(), m.dst()]
            .iter()
            .all(|n| matches!(topo.kind(*n), Some(NodeKind::Ue | NodeKind::AccessNode)))
    }));

    // Link failure next to gNB 10: updates go to the remaining neighbour.
    let l = topo.link_between(G1, G2).unwrap();
    let g1 = h.nodes.get_mut(&G1).unwrap();
    let (out, _) = mesh_layer_step(
        g1,
        &ctx,
        MeshComponent::DynamicMgmt,
        &MeshEvent::LinkChange { link: l, up: false },
        h.now,
    )
    .unwrap();
    let updates: Vec<_> = out
        .outgoing
        .iter()
        .filter(|m| m.tag() == T::MeshTopologyUpdate)
        .map(|m| m.dst())
        .collect();
    assert_eq!(updates, [NodeId(12)]);
    assert!(out.effects.iter().any(
        |e| matches!(e, StateEffect::RouteChanged { path, .. } if path.contains(&NodeId(12)))
    ));
}

#[test]
fn allow_list_rejects_unknown_ue() {
    let topo = common::triangle();
    let mut h = Harness::new(&topo, Approach::A);
    h.nodes
        .get_mut(&G1)
        .unwrap()
        .set_allow_list(Some([NodeId(99)].into()));
    h.start(UE1, UE2, 1);
    h.run_fifo();
    assert!(!h.established(UE1, UE2));
    assert!(h.emitted.iter().any(|m| matches!(
        m.body,
        Body::MeshAuthResponse {
            result: Err(RejectReason::NotAuthorized),
            ..
        }
    )));
}

#[test]
fn out_of_order_completion_is_rejected() {
    for approach in Approach::ALL {
        let topo = common::pair_both(300, 200);
        let mut h = Harness::new(&topo, approach);
        h.start(UE1, UE2, 1);
        h.deliver(0);
        // Completion before any configuration was sent.
        let tag_body = match approach {
            Approach::C => Body::RrcComplete {
                session_id: SessionId(1),
            },
            _ => Body::PathComplete {
                session_id: SessionId(1),
            },
        };
        let early = ProtocolMessage::new(UE1, G1, h.now, tag_body);
        let out = h.inject(&early);
        assert!(out.violation().is_some(), "{approach}");
        assert!(out.outgoing.is_empty(), "{approach}");
        assert!(out.after.is_some_and(|s| s.is_failed()), "{approach}");
        h.run_fifo();
        assert!(!h.established(UE1, UE2), "{approach}");
        h.check_ledgers();
    }
}

#[test]
fn release_frees_both_sides() {
    for approach in Approach::ALL {
        let topo = common::pair_both(300, 200);
        let mut h = Harness::new(&topo, approach);
        h.start(UE1, UE2, 1);
        h.run_fifo();
        assert!(h.established(UE1, UE2));
        h.now += 1;
        let out = h
            .nodes
            .get_mut(&UE1)
            .unwrap()
            .release_session(Role::Source, UE2, h.now);
        h.apply(UE1, out);
        h.run_fifo();
        h.check_ledgers();
        for g in [G1, G2] {
            assert_eq!(h.nodes[&g].ledger.allocated(), 0, "{approach}");
            assert!(h.nodes[&g].mapping.is_empty(), "{approach}");
        }
        assert_eq!(h.ue_state(UE2, Role::Target, UE1), None, "{approach}");
        assert!(h.violations.is_empty(), "{approach}: {:?}", h.violations);
    }
}

#[test]
fn duplicate_request_gets_the_same_answer() {
    let topo = common::pair(LinkKind::Uu, 300, 200);
    let mut h = Harness::new(&topo, Approach::B);
    h.start(UE1, UE2, 1);
    let req = h.pending[0].clone();
    h.deliver(0);
    let again = h.inject(&req);
    assert!(again.violation().is_none());
    assert_eq!(again.outgoing[0].tag(), T::RrcSessionResponse);
    h.run_fifo();
    assert!(h.established(UE1, UE2));
    h.check_ledgers();
}

#[test]
fn handle_message_is_pure() {
    let topo = common::pair(LinkKind::Xn, 300, 200);
    let mut h = Harness::new(&topo, Approach::C);
    h.start(UE1, UE2, 1);
    while !h.pending.is_empty() {
        let m = h.pending[0].clone();
        let state = h.nodes[&m.dst()].clone();
        let a = meshran::session::handle_message(&state, &h.ctx, &m, 77);
        let b = meshran::session::handle_message(&state, &h.ctx, &m, 77);
        assert_eq!(a.1, b.1);
        h.deliver(0);
    }
}

#[test]
fn random_interleavings_complete_consistently() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    for approach in Approach::ALL {
        for round in 0..300 {
            let variant = [Variant::IabP2p, Variant::IabCoreInDu, Variant::IabCoreInCu][round % 3];
            let topo = common::random_topology(&mut rng, variant, 10);
            let mut h = Harness::new(&topo, approach);
            let mut pairs = vec![(UE1, UE2)];
            if rng.gen_bool(0.5) {
                pairs.push((UE2, UE1));
            }
            for &(s, d) in &pairs {
                h.start(s, d, rng.gen_range(1..=3));
                // Let a few messages through before the next session starts.
                for _ in 0..rng.gen_range(0..4) {
                    if h.pending.is_empty() {
                        break;
                    }
                    let i = h.fifo_head(rng.gen_range(0..h.pending.len()));
                    h.deliver(i);
                    h.check_ledgers();
                }
            }
            h.run_random(&mut rng);
            assert!(
                h.violations.is_empty(),
                "{approach} round {round}: {:?}",
                h.violations
            );
            for &(s, d) in &pairs {
                if routable(&topo, approach, s, d) {
                    assert!(h.established(s, d), "{approach} round {round} {s}->{d}");
                    h.check_cross_reference(s, d);
                } else {
                    assert_ne!(h.ue_state(s, Role::Source, d), Some(UeState::Active));
                }
            }
        }
    }
}
