use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::ledger::{admission_control, ResourceLedger};
use super::mapping::{
    dtf_forward, DropReason, DtfAccounting, DtfDecision, MappingTable, MappingTableEntry, Packet,
};
use super::{
    resource_units, Approach, Ctx, FsmState, MeshState, ProtocolViolation, Role, SessionKey,
    SourceBState, StateEffect, StepOutput, TargetBState, TimerId, TimerSlot, UeState, XnState,
};
use crate::protocol::{
    AllocatedResources, BearerConfig, Body, MessageTag, PduSession, PduSessionList,
    ProtocolMessage, RejectReason, SessionConfig, SessionId, SessionRequest,
};
use crate::topology::{FailureSet, LinkId, NodeId, NodeKind, Plane, Router, Topology};

/// Conflict rejections a source absorbs by picking a fresh session id.
const MAX_REKEYS: u8 = 4;

/// One side of a session at a gNB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GnbSession {
    pub role: Role,
    pub state: FsmState,
    pub session_id: SessionId,
    pub local_ue: NodeId,
    pub peer_gnb: NodeId,
    pub peer_ue: NodeId,
    pub request: SessionRequest,
    /// PDU sessions held (Approach C); empty otherwise.
    pub pdus: Vec<PduSession>,
    /// UE-to-UE data route, source UE first.
    pub path: Vec<NodeId>,
    /// Ledger slots held by this session.
    pub units: u32,
    retries: u8,
    rekeys: u8,
    timer_gen: u32,
    timer_armed: bool,
    /// Sent again when the await timer expires.
    retransmit: Vec<ProtocolMessage>,
    /// Sent again when the triggering request is retransmitted.
    replies: Vec<ProtocolMessage>,
}

impl GnbSession {
    pub fn key(&self) -> SessionKey {
        SessionKey {
            session_id: self.session_id,
            local_ue: self.local_ue,
        }
    }

    pub fn src_ue(&self) -> NodeId {
        match self.role {
            Role::Source => self.local_ue,
            Role::Target => self.peer_ue,
        }
    }

    pub fn dst_ue(&self) -> NodeId {
        match self.role {
            Role::Source => self.peer_ue,
            Role::Target => self.local_ue,
        }
    }

    pub fn is_live(&self) -> bool {
        !self.state.is_failed()
    }
}

/// A UE's view of one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UeSession {
    pub role: Role,
    pub peer: NodeId,
    pub state: UeState,
    /// `SessionId::NONE` until the network assigned one.
    pub session_id: SessionId,
    pub serving: NodeId,
    retries: u8,
    timer_gen: u32,
    timer_armed: bool,
    last_request: Option<ProtocolMessage>,
}

impl UeSession {
    fn ends(&self, me: NodeId) -> (NodeId, NodeId) {
        match self.role {
            Role::Source => (me, self.peer),
            Role::Target => (self.peer, me),
        }
    }
}

/// Cached Xn association with one peer gNB.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct XnAssociation {
    pub state: XnState,
    /// We sent an XnSetupRequest that is not answered yet.
    pub outstanding: bool,
    /// A connection request crossed the association; a new setup request
    /// after that point is out of order.
    pub in_use: bool,
}

impl Default for XnAssociation {
    fn default() -> Self {
        XnAssociation {
            state: XnState::XnIdle,
            outstanding: false,
            in_use: false,
        }
    }
}

/// All protocol state held by one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeState {
    id: NodeId,
    kind: NodeKind,
    pub ledger: ResourceLedger,
    pub mapping: MappingTable,
    pub dtf: DtfAccounting,
    view: FailureSet,
    sessions: BTreeMap<SessionKey, GnbSession>,
    ue_sessions: BTreeMap<(Role, NodeId), UeSession>,
    xn: BTreeMap<NodeId, XnAssociation>,
    next_sid: u32,
    mesh_seq: u32,
    seen_updates: BTreeSet<(NodeId, u32)>,
    allow_list: Option<BTreeSet<NodeId>>,
}

fn restamp(m: &ProtocolMessage, now: u64) -> ProtocolMessage {
    let mut m = m.clone();
    m.header.sent_at_us = now;
    m
}

fn bearer_for(sid: SessionId) -> BearerConfig {
    BearerConfig {
        bearer_id: (sid.0 & 0xFFFF) as u16,
    }
}

fn initial_state(approach: Approach, role: Role) -> FsmState {
    match (approach, role) {
        (Approach::A, _) => FsmState::Mesh(MeshState::Idle),
        (Approach::B, Role::Source) => FsmState::SourceB(SourceBState::Idle),
        (Approach::B, Role::Target) => FsmState::TargetB(TargetBState::Idle),
        (Approach::C, _) => FsmState::Xn(XnState::XnIdle),
    }
}

fn failed_state(state: FsmState, r: RejectReason) -> FsmState {
    match state {
        FsmState::SourceB(_) => FsmState::SourceB(SourceBState::Failed(r)),
        FsmState::TargetB(_) => FsmState::TargetB(TargetBState::Failed(r)),
        FsmState::Xn(_) => FsmState::Xn(XnState::Failed(r)),
        FsmState::Mesh(_) => FsmState::Mesh(MeshState::Failed(r)),
        FsmState::Ue(_) => FsmState::Ue(UeState::Detached),
    }
}

/// State a session waits in for its local UE to confirm the configuration.
fn awaiting_completion(approach: Approach, role: Role) -> FsmState {
    match (approach, role) {
        (Approach::A, _) => FsmState::Mesh(MeshState::Scheduled),
        (Approach::B, Role::Source) => FsmState::SourceB(SourceBState::AwaitComplete),
        (Approach::B, Role::Target) => FsmState::TargetB(TargetBState::Configured),
        (Approach::C, _) => FsmState::Xn(XnState::Configured),
    }
}

fn active_state(approach: Approach, role: Role) -> FsmState {
    match (approach, role) {
        (Approach::A, _) => FsmState::Mesh(MeshState::Active),
        (Approach::B, Role::Source) => FsmState::SourceB(SourceBState::Active),
        (Approach::B, Role::Target) => FsmState::TargetB(TargetBState::Active),
        (Approach::C, _) => FsmState::Xn(XnState::Active),
    }
}

fn transition(rec: &mut GnbSession, to: FsmState, out: &mut StepOutput) {
    out.effects.push(StateEffect::Transition {
        key: Some(rec.key()),
        from: rec.state,
        to,
    });
    rec.state = to;
}

fn ue_transition(s: &mut UeSession, to: UeState, out: &mut StepOutput) {
    out.effects.push(StateEffect::Transition {
        key: None,
        from: FsmState::Ue(s.state),
        to: FsmState::Ue(to),
    });
    s.state = to;
}

fn arm(rec: &mut GnbSession, at_us: u64, out: &mut StepOutput) {
    rec.timer_gen += 1;
    rec.timer_armed = true;
    out.effects.push(StateEffect::ArmTimer {
        timer: TimerId {
            slot: TimerSlot::Session(rec.key()),
            generation: rec.timer_gen,
        },
        at_us,
    });
}

fn cancel(rec: &mut GnbSession, out: &mut StepOutput) {
    if rec.timer_armed {
        out.effects.push(StateEffect::CancelTimer(TimerId {
            slot: TimerSlot::Session(rec.key()),
            generation: rec.timer_gen,
        }));
        rec.timer_gen += 1;
        rec.timer_armed = false;
    }
}

fn ue_arm(s: &mut UeSession, at_us: u64, out: &mut StepOutput) {
    s.timer_gen += 1;
    s.timer_armed = true;
    out.effects.push(StateEffect::ArmTimer {
        timer: TimerId {
            slot: TimerSlot::Ue {
                role: s.role,
                peer: s.peer,
            },
            generation: s.timer_gen,
        },
        at_us,
    });
}

fn ue_cancel(s: &mut UeSession, out: &mut StepOutput) {
    if s.timer_armed {
        out.effects.push(StateEffect::CancelTimer(TimerId {
            slot: TimerSlot::Ue {
                role: s.role,
                peer: s.peer,
            },
            generation: s.timer_gen,
        }));
        s.timer_gen += 1;
        s.timer_armed = false;
    }
}

/// Whether every hop of `path` is usable under `router`.
fn path_usable(router: &Router<'_>, path: &[NodeId]) -> bool {
    path.iter().all(|n| router.node_usable(*n))
        && path.windows(2).all(|w| {
            router
                .topology()
                .link_between(w[0], w[1])
                .is_some_and(|l| router.link_usable(l))
        })
}

impl NodeState {
    /// Fresh state for node `id`, or `None` if the topology lacks it.
    pub fn new(topo: &Topology, id: NodeId) -> Option<Self> {
        let node = topo.node(id)?;
        Some(NodeState {
            id,
            kind: node.kind,
            ledger: ResourceLedger::new(node.capacity_sessions),
            mapping: MappingTable::new(),
            dtf: DtfAccounting::default(),
            view: FailureSet::default(),
            sessions: BTreeMap::new(),
            ue_sessions: BTreeMap::new(),
            xn: BTreeMap::new(),
            next_sid: 1,
            mesh_seq: 0,
            seen_updates: BTreeSet::new(),
            allow_list: None,
        })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn kind(&self) -> NodeKind {
        self.kind
    }

    /// Failures this node knows about.
    pub fn view(&self) -> &FailureSet {
        &self.view
    }

    pub fn set_view(&mut self, view: FailureSet) {
        self.view = view;
    }

    /// Restricts mesh authentication to the listed UEs.
    pub fn set_allow_list(&mut self, ues: Option<BTreeSet<NodeId>>) {
        self.allow_list = ues;
    }

    pub fn sessions(&self) -> impl Iterator<Item = &GnbSession> {
        self.sessions.values()
    }

    pub fn session(&self, key: SessionKey) -> Option<&GnbSession> {
        self.sessions.get(&key)
    }

    pub fn ue_sessions(&self) -> impl Iterator<Item = &UeSession> {
        self.ue_sessions.values()
    }

    pub fn ue_session(&self, role: Role, peer: NodeId) -> Option<&UeSession> {
        self.ue_sessions.get(&(role, peer))
    }

    pub fn xn_association(&self, peer: NodeId) -> Option<&XnAssociation> {
        self.xn.get(&peer)
    }

    /// Slots held by live sessions; equals `ledger.allocated()` when the
    /// books balance.
    pub fn held_units(&self) -> u32 {
        self.sessions.values().map(|s| s.units).sum()
    }

    fn router<'s>(&'s self, ctx: &Ctx<'s>) -> Router<'s> {
        Router::new(ctx.topo)
            .with_failures(&self.view)
            .with_mesh_interface(Some(ctx.approach.mesh_interface()))
    }

    fn mk(&self, dst: NodeId, now: u64, body: Body) -> ProtocolMessage {
        ProtocolMessage::new(self.id, dst, now, body)
    }

    fn peer_deadline(&self, ctx: &Ctx<'_>, peer: NodeId, now: u64) -> u64 {
        let rtt = self
            .router(ctx)
            .path(self.id, peer, Plane::Signalling)
            .map(|p| 2 * (p.total_latency_us + ctx.timers.per_relay_us * p.hops.len() as u64))
            .unwrap_or(0);
        now + ctx.timers.base_us + rtt
    }

    fn ue_deadline(&self, ctx: &Ctx<'_>, ue: NodeId, now: u64) -> u64 {
        let uu = ctx
            .topo
            .link_between(self.id, ue)
            .map_or(0, |l| ctx.topo.link(l).latency_us);
        now + ctx.timers.base_us + 2 * (uu + ctx.timers.per_relay_us)
    }

    fn alloc_sid(&mut self, local_ue: NodeId) -> SessionId {
        loop {
            let sid = SessionId(self.next_sid);
            self.next_sid = self.next_sid.wrapping_add(1).max(1);
            if !self.sessions.contains_key(&SessionKey {
                session_id: sid,
                local_ue,
            }) {
                return sid;
            }
        }
    }

    fn find_source(&self, sid: SessionId, peer: NodeId) -> Option<SessionKey> {
        self.sessions
            .values()
            .find(|r| r.role == Role::Source && r.session_id == sid && r.peer_gnb == peer)
            .map(GnbSession::key)
    }

    /// Best guess at which session a stray message refers to.
    fn locate(&self, msg: &ProtocolMessage) -> Option<SessionKey> {
        let sid = msg.body.session_id()?;
        let direct = SessionKey {
            session_id: sid,
            local_ue: msg.src(),
        };
        if self.sessions.contains_key(&direct) {
            return Some(direct);
        }
        self.sessions
            .values()
            .find(|r| r.session_id == sid && r.peer_gnb == msg.src())
            .map(GnbSession::key)
    }

    /// Frees everything the session holds and moves it to `Failed(reason)`.
    fn teardown(&mut self, rec: &mut GnbSession, reason: RejectReason, out: &mut StepOutput) {
        cancel(rec, out);
        if rec.units > 0 {
            self.ledger.release(rec.units);
            out.effects.push(StateEffect::Release(rec.units));
            rec.units = 0;
        }
        if self.mapping.remove(rec.session_id, rec.local_ue).is_some() {
            out.effects.push(StateEffect::MappingDelete(rec.key()));
        }
        rec.retransmit.clear();
        transition(rec, failed_state(rec.state, reason), out);
        out.effects.push(StateEffect::SessionEnded {
            src_ue: rec.src_ue(),
            dst_ue: rec.dst_ue(),
            session_id: rec.session_id,
            reason,
        });
    }

    fn violation(&mut self, key: Option<SessionKey>, tag: MessageTag, out: &mut StepOutput) {
        let rec = key.and_then(|k| self.sessions.remove(&k));
        out.effects.push(StateEffect::Violation(ProtocolViolation {
            state: rec.as_ref().map(|r| r.state),
            tag,
        }));
        if let Some(mut rec) = rec {
            out.before = Some(rec.state);
            if rec.is_live() {
                self.teardown(&mut rec, RejectReason::ProtocolViolation, out);
            }
            out.after = Some(rec.state);
            self.sessions.insert(rec.key(), rec);
        }
    }

    /// Processes one message addressed to this node.
    pub fn handle_message(&mut self, ctx: &Ctx<'_>, msg: &ProtocolMessage, now: u64) -> StepOutput {
        let mut out = StepOutput::default();
        if msg.dst() != self.id || msg.validate().is_err() {
            self.violation(None, msg.tag(), &mut out);
            return out;
        }
        match self.kind {
            NodeKind::Ue => self.ue_message(ctx, msg, now, &mut out),
            NodeKind::AccessNode => self.gnb_message(ctx, msg, now, &mut out),
            NodeKind::DonorNode if msg.tag() == MessageTag::MeshTopologyUpdate => {
                self.gnb_message(ctx, msg, now, &mut out)
            }
            _ => self.violation(None, msg.tag(), &mut out),
        }
        out
    }

    fn gnb_message(
        &mut self,
        ctx: &Ctx<'_>,
        msg: &ProtocolMessage,
        now: u64,
        out: &mut StepOutput,
    ) {
        use MessageTag as T;
        let a = ctx.approach;
        let tag = msg.tag();
        let allowed = match tag {
            T::RrcSessionRequest => a != Approach::A,
            T::GnbNotification | T::GnbNotificationResponse => a == Approach::B,
            T::PathComplete => a != Approach::C,
            T::XnSetupRequest
            | T::XnSetupResponse
            | T::XnConnectionRequest
            | T::XnConnectionAck
            | T::RrcComplete => a == Approach::C,
            T::MeshAuthRequest
            | T::MeshScheduleRequest
            | T::MeshScheduleResponse
            | T::MeshTopologyUpdate => a == Approach::A,
            T::SessionRelease => true,
            _ => false,
        };
        if !allowed {
            let key = self.locate(msg);
            return self.violation(key, tag, out);
        }
        match tag {
            T::RrcSessionRequest | T::MeshAuthRequest => self.on_ue_request(ctx, msg, now, out),
            T::GnbNotification | T::XnConnectionRequest | T::MeshScheduleRequest => {
                self.on_peer_request(ctx, msg, now, out)
            }
            T::GnbNotificationResponse | T::MeshScheduleResponse => {
                self.on_peer_verdict(ctx, msg, now, out)
            }
            T::XnConnectionAck => self.on_ack(ctx, msg, now, out),
            T::PathComplete | T::RrcComplete => self.on_complete(msg, out),
            T::XnSetupRequest => self.on_xn_setup_request(ctx, msg, now, out),
            T::XnSetupResponse => self.on_xn_setup_response(ctx, msg, now, out),
            T::SessionRelease => self.on_release(ctx, msg, now, out),
            T::MeshTopologyUpdate => self.on_topology_update(ctx, msg, now, out),
            _ => unreachable!("filtered above"),
        }
    }

    fn on_ue_request(
        &mut self,
        ctx: &Ctx<'_>,
        msg: &ProtocolMessage,
        now: u64,
        out: &mut StepOutput,
    ) {
        let ue = msg.src();
        let (request, pdus) = match &msg.body {
            Body::RrcSessionRequest {
                request,
                pdu_sessions,
            } => (*request, pdu_sessions.clone()),
            Body::MeshAuthRequest { request } => (*request, Vec::new()),
            _ => unreachable!(),
        };
        if request.user_id != ue || ctx.topo.serving_gnb(ue) != Some(self.id) {
            return self.violation(None, msg.tag(), out);
        }
        let dst_ue = request.destination_id;
        // A retransmitted request while setup is in progress gets the same
        // answer again.
        let existing = self
            .sessions
            .values()
            .find(|r| {
                r.role == Role::Source && r.local_ue == ue && r.peer_ue == dst_ue && r.is_live()
            })
            .map(|r| (r.key(), r.state));
        if let Some((key, state)) = existing {
            if state.is_active() {
                return self.violation(Some(key), msg.tag(), out);
            }
            out.before = Some(state);
            out.after = Some(state);
            let rec = &self.sessions[&key];
            out.outgoing.extend(
                rec.replies
                    .iter()
                    .filter(|m| m.dst() == ue)
                    .map(|m| restamp(m, now)),
            );
            return;
        }

        let sid = self.alloc_sid(ue);
        let mut rec = GnbSession {
            role: Role::Source,
            state: initial_state(ctx.approach, Role::Source),
            session_id: sid,
            local_ue: ue,
            peer_gnb: self.id,
            peer_ue: dst_ue,
            request,
            pdus: Vec::new(),
            path: Vec::new(),
            units: 0,
            retries: 0,
            rekeys: 0,
            timer_gen: 0,
            timer_armed: false,
            retransmit: Vec::new(),
            replies: Vec::new(),
        };
        out.before = Some(rec.state);

        let verdict = self.check_new_session(ctx, &mut rec, &pdus, out);
        if let Err(reason) = verdict {
            let reply = match ctx.approach {
                Approach::A => Body::MeshAuthResponse {
                    destination_id: dst_ue,
                    result: Err(reason),
                },
                Approach::B => Body::RrcSessionResponse {
                    destination_id: dst_ue,
                    result: Err(reason),
                },
                Approach::C => Body::SessionRelease {
                    session_id: sid,
                    src_ue: ue,
                    dst_ue,
                    reason,
                },
            };
            let reply = self.mk(ue, now, reply);
            self.teardown(&mut rec, reason, out);
            out.outgoing.push(reply.clone());
            rec.replies = vec![reply];
            out.after = Some(rec.state);
            self.sessions.insert(rec.key(), rec);
            return;
        }

        let peer = rec.peer_gnb;
        match ctx.approach {
            Approach::B => {
                let resp = self.mk(
                    ue,
                    now,
                    Body::RrcSessionResponse {
                        destination_id: dst_ue,
                        result: Ok(sid),
                    },
                );
                let notif = self.mk(
                    peer,
                    now,
                    Body::GnbNotification {
                        session_id: sid,
                        request,
                        path: rec.path.clone(),
                    },
                );
                transition(
                    &mut rec,
                    FsmState::SourceB(SourceBState::AwaitTargetResponse),
                    out,
                );
                out.outgoing.push(resp.clone());
                out.outgoing.push(notif.clone());
                rec.replies = vec![resp];
                rec.retransmit = vec![notif];
                arm(&mut rec, self.peer_deadline(ctx, peer, now), out);
            }
            Approach::A => {
                let resp = self.mk(
                    ue,
                    now,
                    Body::MeshAuthResponse {
                        destination_id: dst_ue,
                        result: Ok(sid),
                    },
                );
                let sched = self.mk(
                    peer,
                    now,
                    Body::MeshScheduleRequest {
                        session_id: sid,
                        request,
                        path: rec.path.clone(),
                    },
                );
                transition(&mut rec, FsmState::Mesh(MeshState::Authenticated), out);
                out.outgoing.push(resp.clone());
                out.outgoing.push(sched.clone());
                rec.replies = vec![resp];
                rec.retransmit = vec![sched];
                arm(&mut rec, self.peer_deadline(ctx, peer, now), out);
            }
            Approach::C => self.xn_dispatch(ctx, &mut rec, now, out),
        }
        out.after = Some(rec.state);
        self.sessions.insert(rec.key(), rec);
    }

    /// Authorization, routing and local admission for a new source session.
    /// On success the session holds its slots, its route and its peer.
    fn check_new_session(
        &mut self,
        ctx: &Ctx<'_>,
        rec: &mut GnbSession,
        pdus: &[PduSession],
        out: &mut StepOutput,
    ) -> Result<(), RejectReason> {
        if ctx.approach == Approach::A {
            if let Some(allow) = &self.allow_list {
                if !allow.contains(&rec.local_ue) {
                    return Err(RejectReason::NotAuthorized);
                }
            }
        }
        let peer = ctx
            .topo
            .serving_gnb(rec.peer_ue)
            .filter(|g| *g != self.id)
            .ok_or(RejectReason::NoRoute)?;
        let router = self.router(ctx);
        let path = router
            .path(rec.local_ue, rec.peer_ue, Plane::Data)
            .map_err(|_| RejectReason::NoRoute)?;
        router
            .path(self.id, peer, Plane::Signalling)
            .map_err(|_| RejectReason::NoRoute)?;
        rec.peer_gnb = peer;
        rec.path = path.hops;
        match ctx.approach {
            Approach::A | Approach::B => {
                if !self.ledger.try_allocate(1) {
                    return Err(RejectReason::NoResources);
                }
                rec.units = 1;
                out.effects.push(StateEffect::Allocate(1));
                if ctx.approach == Approach::B {
                    transition(rec, FsmState::SourceB(SourceBState::ResourceChecked), out);
                }
            }
            Approach::C => {
                let list = admission_control(&mut self.ledger, pdus);
                if list.admitted.is_empty() {
                    return Err(RejectReason::NoResources);
                }
                rec.units = list.admitted.len() as u32;
                out.effects.push(StateEffect::Allocate(rec.units));
                rec.pdus = list.admitted;
            }
        }
        Ok(())
    }

    fn xn_connection_request(&self, rec: &GnbSession, now: u64) -> ProtocolMessage {
        self.mk(
            rec.peer_gnb,
            now,
            Body::XnConnectionRequest {
                session_id: rec.session_id,
                request: rec.request,
                requested: rec.pdus.clone(),
                path: rec.path.clone(),
            },
        )
    }

    /// Sends the connection request now, or after the association is up.
    fn xn_dispatch(&mut self, ctx: &Ctx<'_>, rec: &mut GnbSession, now: u64, out: &mut StepOutput) {
        let peer = rec.peer_gnb;
        let assoc = self.xn.entry(peer).or_default();
        match assoc.state {
            XnState::Active => {
                assoc.in_use = true;
                let req = self.xn_connection_request(rec, now);
                out.outgoing.push(req.clone());
                rec.retransmit = vec![req];
                transition(rec, FsmState::Xn(XnState::AwaitAck), out);
            }
            XnState::XnSetup => {
                rec.retransmit = vec![self.mk(peer, now, Body::XnSetupRequest)];
                transition(rec, FsmState::Xn(XnState::XnSetup), out);
            }
            _ => {
                assoc.state = XnState::XnSetup;
                assoc.outstanding = true;
                let req = self.mk(peer, now, Body::XnSetupRequest);
                out.outgoing.push(req.clone());
                rec.retransmit = vec![req];
                transition(rec, FsmState::Xn(XnState::XnSetup), out);
            }
        }
        cancel(rec, out);
        arm(rec, self.peer_deadline(ctx, peer, now), out);
    }

    fn on_peer_request(
        &mut self,
        ctx: &Ctx<'_>,
        msg: &ProtocolMessage,
        now: u64,
        out: &mut StepOutput,
    ) {
        let peer = msg.src();
        let (sid, request, requested, path) = match &msg.body {
            Body::GnbNotification {
                session_id,
                request,
                path,
            }
            | Body::MeshScheduleRequest {
                session_id,
                request,
                path,
            } => (*session_id, *request, Vec::new(), path.clone()),
            Body::XnConnectionRequest {
                session_id,
                request,
                requested,
                path,
            } => (*session_id, *request, requested.clone(), path.clone()),
            _ => unreachable!(),
        };
        if ctx.approach == Approach::C {
            match self.xn.get_mut(&peer) {
                Some(a) if a.state == XnState::Active => a.in_use = true,
                other => {
                    let state = other.map_or(XnState::XnIdle, |a| a.state);
                    out.before = Some(FsmState::Xn(state));
                    out.after = Some(FsmState::Xn(state));
                    out.effects.push(StateEffect::Violation(ProtocolViolation {
                        state: Some(FsmState::Xn(state)),
                        tag: msg.tag(),
                    }));
                    return;
                }
            }
        }
        let local_ue = request.destination_id;
        let key = SessionKey {
            session_id: sid,
            local_ue,
        };
        if let Some(rec) = self.sessions.get(&key) {
            if rec.role == Role::Target && rec.peer_gnb == peer && rec.request == request {
                out.before = Some(rec.state);
                out.after = Some(rec.state);
                out.outgoing.extend(
                    rec.replies
                        .iter()
                        .filter(|m| m.dst() == peer)
                        .map(|m| restamp(m, now)),
                );
                return;
            }
            if rec.is_live() {
                out.before = Some(rec.state);
                out.after = Some(rec.state);
                let reply = self.target_reject(
                    ctx,
                    peer,
                    sid,
                    &request,
                    &requested,
                    RejectReason::Conflict,
                    now,
                );
                out.outgoing.push(reply);
                return;
            }
        }

        let mut rec = GnbSession {
            role: Role::Target,
            state: initial_state(ctx.approach, Role::Target),
            session_id: sid,
            local_ue,
            peer_gnb: peer,
            peer_ue: request.user_id,
            request,
            pdus: requested.clone(),
            path: path.clone(),
            units: 0,
            retries: 0,
            rekeys: 0,
            timer_gen: 0,
            timer_armed: false,
            retransmit: Vec::new(),
            replies: Vec::new(),
        };
        out.before = Some(rec.state);
        if ctx.approach == Approach::B {
            transition(&mut rec, FsmState::TargetB(TargetBState::Evaluating), out);
        }

        let pos = path.iter().rposition(|n| *n == self.id);
        let route_ok = ctx.topo.serving_gnb(local_ue) == Some(self.id)
            && path.first() == Some(&request.user_id)
            && path.last() == Some(&local_ue)
            && pos.is_some_and(|p| p > 0);
        let mut list = PduSessionList::default();
        let verdict = if !route_ok {
            Err(RejectReason::NoRoute)
        } else if ctx.approach == Approach::C {
            list = admission_control(&mut self.ledger, &requested);
            if list.admitted.is_empty() {
                Err(RejectReason::NoResources)
            } else {
                rec.units = list.admitted.len() as u32;
                Ok(())
            }
        } else if self.ledger.try_allocate(1) {
            rec.units = 1;
            Ok(())
        } else {
            Err(RejectReason::NoResources)
        };

        if let Err(reason) = verdict {
            let reply = if ctx.approach == Approach::C && reason == RejectReason::NoResources {
                self.mk(
                    peer,
                    now,
                    Body::XnConnectionAck {
                        session_id: sid,
                        pdu: list,
                    },
                )
            } else {
                self.target_reject(ctx, peer, sid, &request, &requested, reason, now)
            };
            self.teardown(&mut rec, reason, out);
            out.outgoing.push(reply.clone());
            rec.replies = vec![reply];
            out.after = Some(rec.state);
            self.sessions.insert(rec.key(), rec);
            return;
        }

        out.effects.push(StateEffect::Allocate(rec.units));
        let entry = MappingTableEntry {
            session_id: sid,
            local_ue,
            peer_gnb: peer,
            peer_ue: request.user_id,
            bearer_id: bearer_for(sid).bearer_id,
            next_hop: path[pos.unwrap() - 1],
            qos: request.qos,
            path: path.clone(),
            active: false,
        };
        // The key is new or belonged to a failed session, whose row is gone.
        self.mapping.remove(sid, local_ue);
        self.mapping
            .upsert(entry.clone())
            .expect("fresh mapping key");
        out.effects.push(StateEffect::MappingWrite(entry));

        let verdict_msg = match ctx.approach {
            Approach::A => Body::MeshScheduleResponse {
                session_id: sid,
                accept: true,
                reason: None,
            },
            Approach::B => Body::GnbNotificationResponse {
                session_id: sid,
                accept: true,
                reason: None,
            },
            Approach::C => {
                rec.pdus = list.admitted.clone();
                Body::XnConnectionAck {
                    session_id: sid,
                    pdu: list,
                }
            }
        };
        let verdict_msg = self.mk(peer, now, verdict_msg);
        let cfg = self.ue_config(ctx, &rec, now);
        out.outgoing.push(verdict_msg.clone());
        out.outgoing.push(cfg.clone());
        rec.replies = vec![verdict_msg];
        rec.retransmit = vec![cfg];
        transition(
            &mut rec,
            awaiting_completion(ctx.approach, Role::Target),
            out,
        );
        arm(&mut rec, self.ue_deadline(ctx, local_ue, now), out);
        out.after = Some(rec.state);
        self.sessions.insert(rec.key(), rec);
    }

    #[allow(clippy::too_many_arguments)]
    fn target_reject(
        &self,
        ctx: &Ctx<'_>,
        peer: NodeId,
        sid: SessionId,
        request: &SessionRequest,
        requested: &[PduSession],
        reason: RejectReason,
        now: u64,
    ) -> ProtocolMessage {
        let body = match ctx.approach {
            Approach::A => Body::MeshScheduleResponse {
                session_id: sid,
                accept: false,
                reason: Some(reason),
            },
            Approach::B => Body::GnbNotificationResponse {
                session_id: sid,
                accept: false,
                reason: Some(reason),
            },
            Approach::C if reason == RejectReason::NoResources => Body::XnConnectionAck {
                session_id: sid,
                pdu: PduSessionList {
                    requested: requested.to_vec(),
                    admitted: Vec::new(),
                    not_admitted: requested.to_vec(),
                },
            },
            Approach::C => Body::SessionRelease {
                session_id: sid,
                src_ue: request.user_id,
                dst_ue: request.destination_id,
                reason,
            },
        };
        self.mk(peer, now, body)
    }

    /// Configuration for the local UE of `rec`.
    fn ue_config(&self, ctx: &Ctx<'_>, rec: &GnbSession, now: u64) -> ProtocolMessage {
        let cfg = SessionConfig {
            session_id: rec.session_id,
            src_ue: rec.src_ue(),
            dst_ue: rec.dst_ue(),
            bearer: bearer_for(rec.session_id),
            path: rec.path.clone(),
            resources: AllocatedResources {
                reserved_sessions: rec.units.min(u16::MAX as u32) as u16,
                resource_units: resource_units(rec.request.channel_quality),
            },
        };
        let body = match ctx.approach {
            Approach::C => Body::RrcSessionConfig(cfg),
            _ => Body::PathConfiguration(cfg),
        };
        self.mk(rec.local_ue, now, body)
    }

    /// Installs the source-side mapping row and configures the local UE.
    fn source_configure(
        &mut self,
        ctx: &Ctx<'_>,
        rec: &mut GnbSession,
        now: u64,
        out: &mut StepOutput,
    ) {
        let pos = rec.path.iter().position(|n| *n == self.id).unwrap_or(0);
        let entry = MappingTableEntry {
            session_id: rec.session_id,
            local_ue: rec.local_ue,
            peer_gnb: rec.peer_gnb,
            peer_ue: rec.peer_ue,
            bearer_id: bearer_for(rec.session_id).bearer_id,
            next_hop: rec.path.get(pos + 1).copied().unwrap_or(rec.peer_gnb),
            qos: rec.request.qos,
            path: rec.path.clone(),
            active: false,
        };
        self.mapping.remove(rec.session_id, rec.local_ue);
        self.mapping
            .upsert(entry.clone())
            .expect("fresh mapping key");
        out.effects.push(StateEffect::MappingWrite(entry));
        let cfg = self.ue_config(ctx, rec, now);
        out.outgoing.push(cfg.clone());
        rec.retransmit = vec![cfg];
        transition(rec, awaiting_completion(ctx.approach, Role::Source), out);
        cancel(rec, out);
        arm(rec, self.ue_deadline(ctx, rec.local_ue, now), out);
    }

    fn on_peer_verdict(
        &mut self,
        ctx: &Ctx<'_>,
        msg: &ProtocolMessage,
        now: u64,
        out: &mut StepOutput,
    ) {
        let (sid, accept, reason) = match &msg.body {
            Body::GnbNotificationResponse {
                session_id,
                accept,
                reason,
            }
            | Body::MeshScheduleResponse {
                session_id,
                accept,
                reason,
            } => (*session_id, *accept, *reason),
            _ => unreachable!(),
        };
        let Some(key) = self.find_source(sid, msg.src()) else {
            return self.violation(None, msg.tag(), out);
        };
        let expected = match ctx.approach {
            Approach::B => FsmState::SourceB(SourceBState::AwaitTargetResponse),
            _ => FsmState::Mesh(MeshState::Authenticated),
        };
        if self.sessions[&key].state != expected {
            return self.violation(Some(key), msg.tag(), out);
        }
        let mut rec = self.sessions.remove(&key).unwrap();
        out.before = Some(rec.state);
        if accept {
            if ctx.approach == Approach::B {
                transition(&mut rec, FsmState::SourceB(SourceBState::PathSetup), out);
            }
            rec.retries = 0;
            self.source_configure(ctx, &mut rec, now, out);
        } else if reason == Some(RejectReason::Conflict) && rec.rekeys < MAX_REKEYS {
            return self.rekey(ctx, rec, now, out);
        } else {
            self.teardown(&mut rec, RejectReason::TargetRejected, out);
            out.outgoing.push(self.release_msg(
                &rec,
                rec.local_ue,
                RejectReason::TargetRejected,
                now,
            ));
        }
        out.after = Some(rec.state);
        self.sessions.insert(rec.key(), rec);
    }

    fn release_msg(
        &self,
        rec: &GnbSession,
        to: NodeId,
        reason: RejectReason,
        now: u64,
    ) -> ProtocolMessage {
        self.mk(
            to,
            now,
            Body::SessionRelease {
                session_id: rec.session_id,
                src_ue: rec.src_ue(),
                dst_ue: rec.dst_ue(),
                reason,
            },
        )
    }

    /// Retries the peer request under a fresh session id after the target
    /// reported a key collision.
    fn rekey(&mut self, ctx: &Ctx<'_>, mut rec: GnbSession, now: u64, out: &mut StepOutput) {
        cancel(&mut rec, out);
        let old = rec.session_id;
        // Two gNBs that collided pick from disjoint residues so they cannot
        // collide again on the retry.
        let parity = u32::from(self.id.0 > rec.peer_gnb.0);
        rec.session_id = loop {
            let sid = self.alloc_sid(rec.local_ue);
            if sid.0 % 2 == parity {
                break sid;
            }
        };
        rec.rekeys += 1;
        rec.retries = 0;
        let sid = rec.session_id;
        let peer = rec.peer_gnb;
        let req = match ctx.approach {
            Approach::A => Body::MeshScheduleRequest {
                session_id: sid,
                request: rec.request,
                path: rec.path.clone(),
            },
            Approach::B => Body::GnbNotification {
                session_id: sid,
                request: rec.request,
                path: rec.path.clone(),
            },
            Approach::C => Body::XnConnectionRequest {
                session_id: sid,
                request: rec.request,
                requested: rec.pdus.clone(),
                path: rec.path.clone(),
            },
        };
        let req = self.mk(peer, now, req);
        for r in &mut rec.replies {
            if let Body::RrcSessionResponse { result, .. } | Body::MeshAuthResponse { result, .. } =
                &mut r.body
            {
                if *result == Ok(old) {
                    *result = Ok(sid);
                }
            }
        }
        out.outgoing.push(req.clone());
        rec.retransmit = vec![req];
        arm(&mut rec, self.peer_deadline(ctx, peer, now), out);
        out.after = Some(rec.state);
        self.sessions.insert(rec.key(), rec);
    }

    fn on_ack(&mut self, ctx: &Ctx<'_>, msg: &ProtocolMessage, now: u64, out: &mut StepOutput) {
        let Body::XnConnectionAck { session_id, pdu } = &msg.body else {
            unreachable!()
        };
        let Some(key) = self.find_source(*session_id, msg.src()) else {
            return self.violation(None, msg.tag(), out);
        };
        let rec = &self.sessions[&key];
        if rec.state != FsmState::Xn(XnState::AwaitAck)
            || !pdu.is_partition()
            || pdu.requested != rec.pdus
        {
            return self.violation(Some(key), msg.tag(), out);
        }
        let mut rec = self.sessions.remove(&key).unwrap();
        out.before = Some(rec.state);
        if pdu.admitted.is_empty() {
            self.teardown(&mut rec, RejectReason::TargetRejected, out);
            out.outgoing.push(self.release_msg(
                &rec,
                rec.local_ue,
                RejectReason::TargetRejected,
                now,
            ));
        } else {
            let refused = pdu.not_admitted.len() as u32;
            if refused > 0 {
                self.ledger.release(refused);
                rec.units -= refused;
                out.effects.push(StateEffect::Release(refused));
            }
            rec.pdus = pdu.admitted.clone();
            rec.retries = 0;
            self.source_configure(ctx, &mut rec, now, out);
        }
        out.after = Some(rec.state);
        self.sessions.insert(rec.key(), rec);
    }

    fn on_complete(&mut self, msg: &ProtocolMessage, out: &mut StepOutput) {
        let sid = msg.body.session_id().expect("completion carries a session");
        let key = SessionKey {
            session_id: sid,
            local_ue: msg.src(),
        };
        let Some(mut rec) = self.sessions.remove(&key) else {
            return self.violation(None, msg.tag(), out);
        };
        let approach = match rec.state {
            FsmState::SourceB(_) | FsmState::TargetB(_) => Approach::B,
            FsmState::Xn(_) => Approach::C,
            _ => Approach::A,
        };
        if rec.state != awaiting_completion(approach, rec.role) {
            self.sessions.insert(key, rec);
            return self.violation(Some(key), msg.tag(), out);
        }
        out.before = Some(rec.state);
        cancel(&mut rec, out);
        rec.retransmit.clear();
        if let Some(e) = self.mapping.get_mut(sid, rec.local_ue) {
            e.active = true;
            out.effects.push(StateEffect::MappingWrite(e.clone()));
        }
        let active = active_state(approach, rec.role);
        transition(&mut rec, active, out);
        out.effects.push(StateEffect::GnbActive {
            key,
            role: rec.role,
        });
        out.after = Some(rec.state);
        self.sessions.insert(key, rec);
    }

    fn on_xn_setup_request(
        &mut self,
        ctx: &Ctx<'_>,
        msg: &ProtocolMessage,
        now: u64,
        out: &mut StepOutput,
    ) {
        let peer = msg.src();
        let assoc = self.xn.entry(peer).or_default();
        let before = assoc.state;
        out.before = Some(FsmState::Xn(before));
        match before {
            XnState::Active if assoc.in_use => {
                assoc.state = XnState::Failed(RejectReason::ProtocolViolation);
                assoc.outstanding = false;
                out.after = Some(FsmState::Xn(assoc.state));
                out.effects.push(StateEffect::Violation(ProtocolViolation {
                    state: Some(FsmState::Xn(before)),
                    tag: msg.tag(),
                }));
                return;
            }
            XnState::Active => {}
            _ => {
                // Covers crossing setups: both ends answer and both go up.
                assoc.state = XnState::Active;
                assoc.in_use = false;
            }
        }
        out.effects.push(StateEffect::Transition {
            key: None,
            from: FsmState::Xn(before),
            to: FsmState::Xn(XnState::Active),
        });
        out.after = Some(FsmState::Xn(XnState::Active));
        out.outgoing.push(self.mk(peer, now, Body::XnSetupResponse));
        self.flush_xn_waiters(ctx, peer, now, out);
    }

    fn on_xn_setup_response(
        &mut self,
        ctx: &Ctx<'_>,
        msg: &ProtocolMessage,
        now: u64,
        out: &mut StepOutput,
    ) {
        let peer = msg.src();
        let assoc = self.xn.entry(peer).or_default();
        let before = assoc.state;
        out.before = Some(FsmState::Xn(before));
        let ok = assoc.outstanding && matches!(before, XnState::XnSetup | XnState::Active);
        if !ok {
            assoc.state = XnState::Failed(RejectReason::ProtocolViolation);
            assoc.outstanding = false;
            out.after = Some(FsmState::Xn(assoc.state));
            out.effects.push(StateEffect::Violation(ProtocolViolation {
                state: Some(FsmState::Xn(before)),
                tag: msg.tag(),
            }));
            return;
        }
        assoc.outstanding = false;
        assoc.state = XnState::Active;
        out.effects.push(StateEffect::Transition {
            key: None,
            from: FsmState::Xn(before),
            to: FsmState::Xn(XnState::Active),
        });
        out.after = Some(FsmState::Xn(XnState::Active));
        self.flush_xn_waiters(ctx, peer, now, out);
    }

    /// Sessions parked on the association proceed once it is up.
    fn flush_xn_waiters(&mut self, ctx: &Ctx<'_>, peer: NodeId, now: u64, out: &mut StepOutput) {
        let waiting: Vec<SessionKey> = self
            .sessions
            .values()
            .filter(|r| {
                r.peer_gnb == peer
                    && r.role == Role::Source
                    && r.state == FsmState::Xn(XnState::XnSetup)
            })
            .map(GnbSession::key)
            .collect();
        for key in waiting {
            let mut rec = self.sessions.remove(&key).unwrap();
            rec.retries = 0;
            self.xn_dispatch(ctx, &mut rec, now, out);
            self.sessions.insert(key, rec);
        }
    }

    fn on_release(&mut self, ctx: &Ctx<'_>, msg: &ProtocolMessage, now: u64, out: &mut StepOutput) {
        let Body::SessionRelease {
            session_id,
            src_ue,
            dst_ue,
            reason,
        } = msg.body
        else {
            unreachable!()
        };
        let from = msg.src();
        let from_local_ue = from == src_ue || from == dst_ue;
        let local_ue = if from_local_ue {
            from
        } else if ctx.topo.serving_gnb(src_ue) == Some(self.id) {
            src_ue
        } else {
            dst_ue
        };
        let key = SessionKey {
            session_id,
            local_ue,
        };
        // Releases are cleanup: unknown or finished sessions are ignored.
        let Some(mut rec) = self.sessions.remove(&key) else {
            return;
        };
        out.before = Some(rec.state);
        let counterpart_ok = if from_local_ue {
            true
        } else {
            rec.peer_gnb == from
        };
        if !rec.is_live() || !counterpart_ok {
            out.after = Some(rec.state);
            self.sessions.insert(key, rec);
            return;
        }
        if reason == RejectReason::Conflict
            && !from_local_ue
            && rec.role == Role::Source
            && rec.state == FsmState::Xn(XnState::AwaitAck)
            && rec.rekeys < MAX_REKEYS
        {
            return self.rekey(ctx, rec, now, out);
        }
        self.teardown(&mut rec, reason, out);
        let to = if from_local_ue {
            rec.peer_gnb
        } else {
            rec.local_ue
        };
        out.outgoing.push(self.release_msg(&rec, to, reason, now));
        out.after = Some(rec.state);
        self.sessions.insert(key, rec);
    }

    /// Timer expiry. Stale timers (cancelled or re-armed since) do nothing.
    pub fn on_timer(&mut self, ctx: &Ctx<'_>, timer: TimerId, now: u64) -> StepOutput {
        let mut out = StepOutput::default();
        match timer.slot {
            TimerSlot::Session(key) => {
                self.session_timer(ctx, key, timer.generation, now, &mut out)
            }
            TimerSlot::Ue { role, peer } => {
                self.ue_timer(ctx, role, peer, timer.generation, now, &mut out)
            }
        }
        out
    }

    fn session_timer(
        &mut self,
        ctx: &Ctx<'_>,
        key: SessionKey,
        gen: u32,
        now: u64,
        out: &mut StepOutput,
    ) {
        let Some(mut rec) = self.sessions.remove(&key) else {
            return;
        };
        if !rec.timer_armed || rec.timer_gen != gen || !rec.is_live() || rec.state.is_active() {
            self.sessions.insert(key, rec);
            return;
        }
        rec.timer_armed = false;
        out.before = Some(rec.state);
        if rec.retries < ctx.timers.retries {
            rec.retries += 1;
            let again: Vec<ProtocolMessage> =
                rec.retransmit.iter().map(|m| restamp(m, now)).collect();
            let waits_on_ue = again.iter().any(|m| m.dst() == rec.local_ue);
            let deadline = if waits_on_ue {
                self.ue_deadline(ctx, rec.local_ue, now)
            } else {
                self.peer_deadline(ctx, rec.peer_gnb, now)
            };
            out.outgoing.extend(again);
            arm(&mut rec, deadline, out);
        } else {
            let was_xn_setup = rec.state == FsmState::Xn(XnState::XnSetup);
            self.teardown(&mut rec, RejectReason::Timeout, out);
            out.outgoing
                .push(self.release_msg(&rec, rec.local_ue, RejectReason::Timeout, now));
            if rec.peer_gnb != self.id {
                out.outgoing
                    .push(self.release_msg(&rec, rec.peer_gnb, RejectReason::Timeout, now));
            }
            if was_xn_setup {
                if let Some(a) = self.xn.get_mut(&rec.peer_gnb) {
                    if a.state == XnState::XnSetup {
                        a.state = XnState::Failed(RejectReason::Timeout);
                        a.outstanding = false;
                    }
                }
            }
        }
        out.after = Some(rec.state);
        self.sessions.insert(key, rec);
    }

    /// Drops a session locally without signalling, as when a failure makes
    /// its route unusable and the whole session is abandoned.
    pub fn abort_session(
        &mut self,
        session_id: SessionId,
        src_ue: NodeId,
        dst_ue: NodeId,
        reason: RejectReason,
    ) -> StepOutput {
        let mut out = StepOutput::default();
        if self.kind == NodeKind::Ue {
            let key = if self.id == src_ue {
                (Role::Source, dst_ue)
            } else {
                (Role::Target, src_ue)
            };
            if let Some(mut s) = self.ue_sessions.remove(&key) {
                out.before = Some(FsmState::Ue(s.state));
                ue_cancel(&mut s, &mut out);
                ue_transition(&mut s, UeState::Detached, &mut out);
                out.effects.push(StateEffect::SessionEnded {
                    src_ue,
                    dst_ue,
                    session_id: s.session_id,
                    reason,
                });
                out.after = Some(FsmState::Ue(UeState::Detached));
            }
            return out;
        }
        for local_ue in [src_ue, dst_ue] {
            let key = SessionKey {
                session_id,
                local_ue,
            };
            if let Some(mut rec) = self.sessions.remove(&key) {
                out.before = Some(rec.state);
                if rec.is_live() {
                    self.teardown(&mut rec, reason, &mut out);
                }
                out.after = Some(rec.state);
                self.sessions.insert(key, rec);
            }
        }
        out
    }

    // ---- UE side ----

    /// Starts a session from this UE toward `request.destination_id`.
    pub fn start_session(
        &mut self,
        ctx: &Ctx<'_>,
        request: SessionRequest,
        pdu_sessions: Vec<PduSession>,
        now: u64,
    ) -> StepOutput {
        let mut out = StepOutput::default();
        let peer = request.destination_id;
        let serving = ctx.topo.serving_gnb(self.id);
        let usable = self.kind == NodeKind::Ue
            && request.user_id == self.id
            && serving.is_some()
            && !self.ue_sessions.contains_key(&(Role::Source, peer));
        if !usable {
            out.effects.push(StateEffect::SessionEnded {
                src_ue: self.id,
                dst_ue: peer,
                session_id: SessionId::NONE,
                reason: RejectReason::Conflict,
            });
            return out;
        }
        let serving = serving.unwrap();
        let body = match ctx.approach {
            Approach::A => Body::MeshAuthRequest { request },
            _ => Body::RrcSessionRequest {
                request,
                pdu_sessions,
            },
        };
        let req = self.mk(serving, now, body);
        let mut s = UeSession {
            role: Role::Source,
            peer,
            state: UeState::Detached,
            session_id: SessionId::NONE,
            serving,
            retries: 0,
            timer_gen: 0,
            timer_armed: false,
            last_request: Some(req.clone()),
        };
        out.before = Some(FsmState::Ue(s.state));
        ue_transition(&mut s, UeState::Requested, &mut out);
        ue_arm(&mut s, now + ctx.timers.ue_guard_us, &mut out);
        out.outgoing.push(req);
        out.after = Some(FsmState::Ue(s.state));
        self.ue_sessions.insert((Role::Source, peer), s);
        out
    }

    /// Ends this UE's session with `peer` and tells the network.
    pub fn release_session(&mut self, role: Role, peer: NodeId, now: u64) -> StepOutput {
        let mut out = StepOutput::default();
        let Some(mut s) = self.ue_sessions.remove(&(role, peer)) else {
            return out;
        };
        out.before = Some(FsmState::Ue(s.state));
        ue_cancel(&mut s, &mut out);
        let (src_ue, dst_ue) = s.ends(self.id);
        if !s.session_id.is_none() {
            out.outgoing.push(self.mk(
                s.serving,
                now,
                Body::SessionRelease {
                    session_id: s.session_id,
                    src_ue,
                    dst_ue,
                    reason: RejectReason::Released,
                },
            ));
        }
        ue_transition(&mut s, UeState::Detached, &mut out);
        out.effects.push(StateEffect::SessionEnded {
            src_ue,
            dst_ue,
            session_id: s.session_id,
            reason: RejectReason::Released,
        });
        out.after = Some(FsmState::Ue(UeState::Detached));
        out
    }

    fn ue_violation(&mut self, key: Option<(Role, NodeId)>, tag: MessageTag, out: &mut StepOutput) {
        let s = key.and_then(|k| self.ue_sessions.remove(&k));
        out.effects.push(StateEffect::Violation(ProtocolViolation {
            state: s.as_ref().map(|s| FsmState::Ue(s.state)),
            tag,
        }));
        if let Some(mut s) = s {
            out.before = Some(FsmState::Ue(s.state));
            ue_cancel(&mut s, out);
            let (src_ue, dst_ue) = s.ends(self.id);
            ue_transition(&mut s, UeState::Detached, out);
            out.effects.push(StateEffect::SessionEnded {
                src_ue,
                dst_ue,
                session_id: s.session_id,
                reason: RejectReason::ProtocolViolation,
            });
            out.after = Some(FsmState::Ue(UeState::Detached));
        }
    }

    fn ue_message(&mut self, ctx: &Ctx<'_>, msg: &ProtocolMessage, now: u64, out: &mut StepOutput) {
        let a = ctx.approach;
        let from_serving = ctx.topo.serving_gnb(self.id) == Some(msg.src());
        match &msg.body {
            Body::RrcSessionResponse {
                destination_id,
                result,
            } if a == Approach::B && from_serving => {
                self.ue_response(*destination_id, *result, msg.tag(), out)
            }
            Body::MeshAuthResponse {
                destination_id,
                result,
            } if a == Approach::A && from_serving => {
                self.ue_response(*destination_id, *result, msg.tag(), out)
            }
            Body::PathConfiguration(cfg) if a != Approach::C && from_serving => {
                self.ue_on_config(cfg, msg.src(), msg.tag(), now, out)
            }
            Body::RrcSessionConfig(cfg) if a == Approach::C && from_serving => {
                self.ue_on_config(cfg, msg.src(), msg.tag(), now, out)
            }
            Body::SessionRelease {
                session_id,
                src_ue,
                dst_ue,
                reason,
            } if from_serving => {
                let key = if *src_ue == self.id {
                    (Role::Source, *dst_ue)
                } else {
                    (Role::Target, *src_ue)
                };
                let matches = self
                    .ue_sessions
                    .get(&key)
                    .is_some_and(|s| s.session_id == *session_id || s.session_id.is_none());
                if !matches {
                    return;
                }
                let mut s = self.ue_sessions.remove(&key).unwrap();
                out.before = Some(FsmState::Ue(s.state));
                ue_cancel(&mut s, out);
                ue_transition(&mut s, UeState::Detached, out);
                out.effects.push(StateEffect::SessionEnded {
                    src_ue: *src_ue,
                    dst_ue: *dst_ue,
                    session_id: *session_id,
                    reason: *reason,
                });
                out.after = Some(FsmState::Ue(UeState::Detached));
            }
            _ => {
                let key = self.ue_key_for(msg);
                self.ue_violation(key, msg.tag(), out)
            }
        }
    }

    fn ue_key_for(&self, msg: &ProtocolMessage) -> Option<(Role, NodeId)> {
        match &msg.body {
            Body::RrcSessionResponse { destination_id, .. }
            | Body::MeshAuthResponse { destination_id, .. } => {
                Some((Role::Source, *destination_id))
            }
            Body::PathConfiguration(c) | Body::RrcSessionConfig(c) => {
                Some(if c.src_ue == self.id {
                    (Role::Source, c.dst_ue)
                } else {
                    (Role::Target, c.src_ue)
                })
            }
            _ => {
                let sid = msg.body.session_id()?;
                self.ue_sessions
                    .iter()
                    .find(|(_, s)| s.session_id == sid)
                    .map(|(k, _)| *k)
            }
        }
        .filter(|k| self.ue_sessions.contains_key(k))
    }

    fn ue_response(
        &mut self,
        dest: NodeId,
        result: Result<SessionId, RejectReason>,
        tag: MessageTag,
        out: &mut StepOutput,
    ) {
        let key = (Role::Source, dest);
        let ok = self.ue_sessions.get(&key).is_some_and(|s| {
            s.state == UeState::Requested
                && (s.session_id.is_none() || result.is_err() || result == Ok(s.session_id))
        });
        if !ok {
            let key = self.ue_sessions.contains_key(&key).then_some(key);
            return self.ue_violation(key, tag, out);
        }
        let s = self.ue_sessions.get_mut(&key).unwrap();
        out.before = Some(FsmState::Ue(s.state));
        match result {
            Ok(sid) => {
                s.session_id = sid;
                out.after = Some(FsmState::Ue(s.state));
            }
            Err(reason) => {
                let mut s = self.ue_sessions.remove(&key).unwrap();
                ue_cancel(&mut s, out);
                ue_transition(&mut s, UeState::Detached, out);
                out.effects.push(StateEffect::SessionEnded {
                    src_ue: self.id,
                    dst_ue: dest,
                    session_id: s.session_id,
                    reason,
                });
                out.after = Some(FsmState::Ue(UeState::Detached));
            }
        }
    }

    fn ue_on_config(
        &mut self,
        cfg: &SessionConfig,
        serving: NodeId,
        tag: MessageTag,
        now: u64,
        out: &mut StepOutput,
    ) {
        let key = if cfg.src_ue == self.id {
            (Role::Source, cfg.dst_ue)
        } else if cfg.dst_ue == self.id {
            (Role::Target, cfg.src_ue)
        } else {
            return self.ue_violation(None, tag, out);
        };
        let completion = |me: &Self, to: NodeId| {
            let body = if tag == MessageTag::RrcSessionConfig {
                Body::RrcComplete {
                    session_id: cfg.session_id,
                }
            } else {
                Body::PathComplete {
                    session_id: cfg.session_id,
                }
            };
            me.mk(to, now, body)
        };
        let existing = self.ue_sessions.get(&key).map(|s| (s.state, s.session_id));
        match (key.0, existing) {
            // Duplicate configuration: confirm again.
            (_, Some((UeState::Active, sid))) if sid == cfg.session_id => {
                out.before = Some(FsmState::Ue(UeState::Active));
                out.after = Some(FsmState::Ue(UeState::Active));
                let to = self.ue_sessions[&key].serving;
                out.outgoing.push(completion(self, to));
            }
            (Role::Source, Some((UeState::Requested, _))) | (Role::Target, None) => {
                let mut s = self.ue_sessions.remove(&key).unwrap_or(UeSession {
                    role: Role::Target,
                    peer: key.1,
                    state: UeState::Detached,
                    session_id: cfg.session_id,
                    serving,
                    retries: 0,
                    timer_gen: 0,
                    timer_armed: false,
                    last_request: None,
                });
                out.before = Some(FsmState::Ue(s.state));
                ue_cancel(&mut s, out);
                s.session_id = cfg.session_id;
                ue_transition(&mut s, UeState::Configured, out);
                out.outgoing.push(completion(self, s.serving));
                ue_transition(&mut s, UeState::Active, out);
                out.effects.push(StateEffect::UeActive {
                    ue: self.id,
                    peer: key.1,
                    role: key.0,
                    session_id: cfg.session_id,
                });
                out.after = Some(FsmState::Ue(s.state));
                self.ue_sessions.insert(key, s);
            }
            _ => {
                let key = existing.map(|_| key);
                self.ue_violation(key, tag, out)
            }
        }
    }

    fn ue_timer(
        &mut self,
        ctx: &Ctx<'_>,
        role: Role,
        peer: NodeId,
        gen: u32,
        now: u64,
        out: &mut StepOutput,
    ) {
        let key = (role, peer);
        let Some(s) = self.ue_sessions.get_mut(&key) else {
            return;
        };
        if !s.timer_armed || s.timer_gen != gen || s.state != UeState::Requested {
            return;
        }
        s.timer_armed = false;
        out.before = Some(FsmState::Ue(s.state));
        if s.retries < ctx.timers.retries {
            s.retries += 1;
            if let Some(m) = &s.last_request {
                out.outgoing.push(restamp(m, now));
            }
            ue_arm(s, now + ctx.timers.ue_guard_us, out);
            out.after = Some(FsmState::Ue(s.state));
            return;
        }
        let mut s = self.ue_sessions.remove(&key).unwrap();
        let (src_ue, dst_ue) = s.ends(self.id);
        if !s.session_id.is_none() {
            out.outgoing.push(self.mk(
                s.serving,
                now,
                Body::SessionRelease {
                    session_id: s.session_id,
                    src_ue,
                    dst_ue,
                    reason: RejectReason::Timeout,
                },
            ));
        }
        ue_transition(&mut s, UeState::Detached, out);
        out.effects.push(StateEffect::SessionEnded {
            src_ue,
            dst_ue,
            session_id: s.session_id,
            reason: RejectReason::Timeout,
        });
        out.after = Some(FsmState::Ue(UeState::Detached));
    }

    // ---- mesh layer (Approach A) ----

    fn flood(
        &self,
        ctx: &Ctx<'_>,
        body: &Body,
        except: Option<NodeId>,
        now: u64,
        out: &mut StepOutput,
    ) {
        let router = self.router(ctx);
        for (l, n) in ctx.topo.neighbors(self.id) {
            let ran = ctx.topo.kind(*n).is_some_and(NodeKind::is_ran);
            if ran && Some(*n) != except && router.link_usable(*l) && router.node_usable(*n) {
                out.outgoing.push(self.mk(*n, now, body.clone()));
            }
        }
    }

    fn apply_link_state(&mut self, link: LinkId, up: bool) {
        if up {
            self.view.links.remove(&link);
        } else {
            self.view.links.insert(link);
        }
    }

    /// A link next to this node changed state (DynamicMgmt): update the
    /// local view, tell the other RAN neighbours and repair routes.
    pub fn on_link_change(
        &mut self,
        ctx: &Ctx<'_>,
        link: LinkId,
        up: bool,
        now: u64,
    ) -> StepOutput {
        let mut out = StepOutput::default();
        self.apply_link_state(link, up);
        if !self.kind.is_ran() || ctx.approach != Approach::A {
            return out;
        }
        self.mesh_seq += 1;
        self.seen_updates.insert((self.id, self.mesh_seq));
        let l = ctx.topo.link(link);
        let body = Body::MeshTopologyUpdate {
            origin: self.id,
            seq: self.mesh_seq,
            a: l.a,
            b: l.b,
            up,
        };
        self.flood(ctx, &body, None, now, &mut out);
        self.reroute(ctx, up, &mut out);
        out
    }

    fn on_topology_update(
        &mut self,
        ctx: &Ctx<'_>,
        msg: &ProtocolMessage,
        now: u64,
        out: &mut StepOutput,
    ) {
        let Body::MeshTopologyUpdate {
            origin,
            seq,
            a,
            b,
            up,
        } = msg.body
        else {
            unreachable!()
        };
        if !self.seen_updates.insert((origin, seq)) {
            return;
        }
        let Some(link) = ctx.topo.link_between(a, b) else {
            return self.violation(None, msg.tag(), out);
        };
        self.apply_link_state(link, up);
        self.flood(ctx, &msg.body, Some(msg.src()), now, out);
        self.reroute(ctx, up, out);
    }

    /// Recomputes routes of mapping rows whose route broke, or of every row
    /// after a link came back.
    fn reroute(&mut self, ctx: &Ctx<'_>, all: bool, out: &mut StepOutput) {
        let view = self.view.clone();
        let router = Router::new(ctx.topo)
            .with_failures(&view)
            .with_mesh_interface(Some(ctx.approach.mesh_interface()));
        let me = self.id;
        let mut changed = Vec::new();
        for e in self.mapping.entries_mut() {
            if !all && path_usable(&router, &e.path) {
                continue;
            }
            let (src, dst) = (e.path[0], *e.path.last().unwrap());
            let key = SessionKey {
                session_id: e.session_id,
                local_ue: e.local_ue,
            };
            match router.path(src, dst, Plane::Data) {
                Ok(p) if p.hops != e.path => {
                    let outbound = src == e.local_ue;
                    let next = if outbound {
                        p.hops
                            .iter()
                            .position(|n| *n == me)
                            .and_then(|i| p.hops.get(i + 1))
                    } else {
                        p.hops
                            .iter()
                            .rposition(|n| *n == me)
                            .and_then(|i| i.checked_sub(1).map(|j| &p.hops[j]))
                    };
                    if let Some(n) = next {
                        e.next_hop = *n;
                    }
                    e.path = p.hops.clone();
                    changed.push((key, p.hops));
                }
                Ok(_) => {}
                Err(_) => out.effects.push(StateEffect::RouteLost(key)),
            }
        }
        for (key, path) in changed {
            if let Some(rec) = self.sessions.get_mut(&key) {
                rec.path = path.clone();
            }
            out.effects.push(StateEffect::RouteChanged { key, path });
        }
    }

    /// DTF: forwards or drops a packet at this gNB, updating usage counters.
    pub fn forward_packet(
        &mut self,
        ctx: &Ctx<'_>,
        packet: &Packet,
        now: u64,
    ) -> Result<DtfDecision, DropReason> {
        let d = dtf_forward(&self.mapping, packet, now)?;
        if d.outbound {
            let e = self
                .mapping
                .get(d.session_id, d.local_ue)
                .expect("looked up");
            if !path_usable(&self.router(ctx), &e.path) {
                return Err(DropReason::NoRoute);
            }
        }
        self.dtf.apply(&d);
        Ok(d)
    }
}

/// Pure form of [`NodeState::handle_message`]: the input state is untouched.
pub fn handle_message(
    state: &NodeState,
    ctx: &Ctx<'_>,
    msg: &ProtocolMessage,
    now_us: u64,
) -> (NodeState, StepOutput) {
    let mut next = state.clone();
    let out = next.handle_message(ctx, msg, now_us);
    (next, out)
}

/// The four mesh-layer functions of Approach A.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshComponent {
    AccessHandover,
    ResourceQos,
    DynamicMgmt,
    DataForwarding,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MeshEvent {
    Message(ProtocolMessage),
    LinkChange { link: LinkId, up: bool },
    Packet(Packet),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MeshStepError {
    #[error("{component:?} does not handle this event")]
    WrongComponent { component: MeshComponent },
    #[error("mesh layer requires Approach A")]
    NotMesh,
    #[error("packet dropped: {0}")]
    Dropped(DropReason),
}

/// Routes one mesh-layer event to the component responsible for it.
pub fn mesh_layer_step(
    state: &mut NodeState,
    ctx: &Ctx<'_>,
    component: MeshComponent,
    event: &MeshEvent,
    now_us: u64,
) -> Result<(StepOutput, Option<DtfDecision>), MeshStepError> {
    use MessageTag as T;
    if ctx.approach != Approach::A {
        return Err(MeshStepError::NotMesh);
    }
    let wrong = Err(MeshStepError::WrongComponent { component });
    match (component, event) {
        (MeshComponent::AccessHandover, MeshEvent::Message(m)) if m.tag() == T::MeshAuthRequest => {
            Ok((state.handle_message(ctx, m, now_us), None))
        }
        (MeshComponent::ResourceQos, MeshEvent::Message(m))
            if matches!(
                m.tag(),
                T::MeshScheduleRequest
                    | T::MeshScheduleResponse
                    | T::PathComplete
                    | T::SessionRelease
            ) =>
        {
            Ok((state.handle_message(ctx, m, now_us), None))
        }
        (MeshComponent::DynamicMgmt, MeshEvent::Message(m)) if m.tag() == T::MeshTopologyUpdate => {
            Ok((state.handle_message(ctx, m, now_us), None))
        }
        (MeshComponent::DynamicMgmt, MeshEvent::LinkChange { link, up }) => {
            Ok((state.on_link_change(ctx, *link, *up, now_us), None))
        }
        (MeshComponent::DataForwarding, MeshEvent::Packet(p)) => state
            .forward_packet(ctx, p, now_us)
            .map(|d| (StepOutput::default(), Some(d)))
            .map_err(MeshStepError::Dropped),
        _ => wrong,
    }
}
