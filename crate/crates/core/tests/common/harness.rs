//! Message pump that drives node state machines without the simulator:
//! messages go straight to their destination, in an order the test picks.

use std::collections::BTreeMap;

use meshran::protocol::{MessageTag, PduSession, ProtocolMessage, QosProfile, SessionRequest};
use meshran::session::{
    Approach, Ctx, GnbSession, NodeState, ProtocolViolation, Role, StateEffect, StepOutput, UeState,
};
use meshran::{NodeId, Plane, Router, Topology};
use rand::Rng;

pub struct Harness<'a> {
    pub ctx: Ctx<'a>,
    pub nodes: BTreeMap<NodeId, NodeState>,
    pub pending: Vec<ProtocolMessage>,
    /// Every message sent, in emission order.
    pub emitted: Vec<ProtocolMessage>,
    /// Allocations minus releases seen in effects.
    pub net_allocated: i64,
    pub violations: Vec<(NodeId, ProtocolViolation)>,
    pub now: u64,
}

pub fn request(src: NodeId, dst: NodeId, cq: u8) -> SessionRequest {
    SessionRequest {
        user_id: src,
        qos: QosProfile::xurllc(1_000),
        destination_id: dst,
        channel_quality: cq,
    }
}

pub fn pdus(n: u8) -> Vec<PduSession> {
    (1..=n)
        .map(|id| PduSession {
            id,
            qos: QosProfile::xurllc(1_000),
        })
        .collect()
}

impl<'a> Harness<'a> {
    pub fn new(topo: &'a Topology, approach: Approach) -> Self {
        Harness {
            ctx: Ctx::new(topo, approach),
            nodes: topo
                .node_ids()
                .map(|id| (id, NodeState::new(topo, id).unwrap()))
                .collect(),
            pending: Vec::new(),
            emitted: Vec::new(),
            net_allocated: 0,
            violations: Vec::new(),
            now: 0,
        }
    }

    pub fn apply(&mut self, node: NodeId, out: StepOutput) -> StepOutput {
        for e in &out.effects {
            match e {
                StateEffect::Allocate(n) => self.net_allocated += *n as i64,
                StateEffect::Release(n) => self.net_allocated -= *n as i64,
                StateEffect::Violation(v) => self.violations.push((node, *v)),
                _ => {}
            }
        }
        self.pending.extend(out.outgoing.iter().cloned());
        self.emitted.extend(out.outgoing.iter().cloned());
        out
    }

    pub fn start(&mut self, src: NodeId, dst: NodeId, n_pdus: u8) -> StepOutput {
        self.start_with(src, dst, 10, n_pdus)
    }

    pub fn start_with(&mut self, src: NodeId, dst: NodeId, cq: u8, n_pdus: u8) -> StepOutput {
        self.now += 1;
        let ctx = self.ctx;
        let out = self.nodes.get_mut(&src).unwrap().start_session(
            &ctx,
            request(src, dst, cq),
            pdus(n_pdus),
            self.now,
        );
        self.apply(src, out)
    }

    /// Delivers `msg` to its destination immediately.
    pub fn inject(&mut self, msg: &ProtocolMessage) -> StepOutput {
        self.now += 1;
        let ctx = self.ctx;
        let dst = msg.dst();
        let out = self
            .nodes
            .get_mut(&dst)
            .unwrap()
            .handle_message(&ctx, msg, self.now);
        self.apply(dst, out)
    }

    pub fn deliver(&mut self, i: usize) -> StepOutput {
        let msg = self.pending.remove(i);
        self.inject(&msg)
    }

    pub fn run_fifo(&mut self) {
        while !self.pending.is_empty() {
            self.deliver(0);
            self.check_ledgers();
        }
    }

    /// Random interleaving over FIFO channels: pick a random message, then
    /// deliver the oldest one queued between the same two nodes.
    pub fn run_random<R: Rng>(&mut self, rng: &mut R) {
        while !self.pending.is_empty() {
            let i = self.fifo_head(rng.gen_range(0..self.pending.len()));
            self.deliver(i);
            self.check_ledgers();
        }
    }

    pub fn fifo_head(&self, i: usize) -> usize {
        let (s, d) = (self.pending[i].src(), self.pending[i].dst());
        self.pending
            .iter()
            .position(|m| m.src() == s && m.dst() == d)
            .unwrap()
    }

    pub fn emitted_tags(&self) -> Vec<MessageTag> {
        self.emitted.iter().map(|m| m.tag()).collect()
    }

    /// Ledger bounds and conservation across all nodes.
    pub fn check_ledgers(&self) {
        let mut sum = 0i64;
        for (id, n) in &self.nodes {
            let l = &n.ledger;
            assert!(
                l.allocated() <= l.capacity(),
                "ledger over capacity at {id}"
            );
            assert_eq!(
                l.allocated(),
                n.held_units(),
                "ledger vs held units at {id}"
            );
            sum += l.allocated() as i64;
        }
        assert_eq!(sum, self.net_allocated, "ledger conservation");
    }

    pub fn ue_state(&self, ue: NodeId, role: Role, peer: NodeId) -> Option<UeState> {
        self.nodes[&ue].ue_session(role, peer).map(|s| s.state)
    }

    pub fn established(&self, src: NodeId, dst: NodeId) -> bool {
        self.ue_state(src, Role::Source, dst) == Some(UeState::Active)
            && self.ue_state(dst, Role::Target, src) == Some(UeState::Active)
    }

    pub fn gnb_side(
        &self,
        gnb: NodeId,
        role: Role,
        local: NodeId,
        peer: NodeId,
    ) -> Option<&GnbSession> {
        self.nodes[&gnb]
            .sessions()
            .find(|s| s.role == role && s.local_ue == local && s.peer_ue == peer && s.is_live())
    }

    /// Both gNB sides are Active and their mapping rows point at each other.
    pub fn check_cross_reference(&self, src: NodeId, dst: NodeId) {
        let topo = self.ctx.topo;
        let (gs, gd) = (
            topo.serving_gnb(src).unwrap(),
            topo.serving_gnb(dst).unwrap(),
        );
        let s = self
            .gnb_side(gs, Role::Source, src, dst)
            .expect("source side");
        let t = self
            .gnb_side(gd, Role::Target, dst, src)
            .expect("target side");
        assert!(s.state.is_active() && t.state.is_active());
        assert_eq!(s.session_id, t.session_id);
        let ue_sid = self.nodes[&src]
            .ue_session(Role::Source, dst)
            .unwrap()
            .session_id;
        assert_eq!(ue_sid, s.session_id);
        let es = self.nodes[&gs]
            .mapping
            .get(s.session_id, src)
            .expect("source row");
        let et = self.nodes[&gd]
            .mapping
            .get(t.session_id, dst)
            .expect("target row");
        assert_eq!((es.peer_gnb, es.peer_ue), (gd, dst));
        assert_eq!((et.peer_gnb, et.peer_ue), (gs, src));
        assert_eq!(es.path, et.path);
        assert!(es.active && et.active);
        assert!(topo.link_between(gs, es.next_hop).is_some());
        assert!(topo.link_between(gd, et.next_hop).is_some());
    }
}

/// Whether a session between the two UEs can be routed under `approach`.
pub fn routable(topo: &Topology, approach: Approach, src: NodeId, dst: NodeId) -> bool {
    let r = Router::new(topo).with_mesh_interface(Some(approach.mesh_interface()));
    let (gs, gd) = (
        topo.serving_gnb(src).unwrap(),
        topo.serving_gnb(dst).unwrap(),
    );
    gs != gd && r.path(src, dst, Plane::Data).is_ok() && r.path(gs, gd, Plane::Signalling).is_ok()
}
