//! Deterministic discrete-event engine.
//!
//! Events run in `(time_us, seq)` order, with `seq` assigned at insertion.
//! Frames move hop by hop: each link traversal costs its latency (plus
//! serialization when the link has a bandwidth) and each relay adds its
//! processing delay. Loss draws come from a ChaCha8 generator seeded with
//! the run seed, one stream per link (`set_stream(link index)`), so runs are
//! reproducible across platforms.

mod metrics;
mod reliability;
mod trace;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::protocol::{
    decode, encode, MessageTag, PduSession, ProtocolMessage, QosProfile, RejectReason,
    SessionRequest,
};
use crate::session::{
    Approach, Ctx, DropReason, NodeState, Packet, Role, StateEffect, StepOutput, TimerConfig,
    TimerId,
};
use crate::topology::{FailureSet, LinkId, NodeId, NodeKind, Plane, Router, Topology};

pub use metrics::{percentile, FailureRecord, Metrics, SessionMetrics, SignallingCounts};
pub use reliability::{reliability_estimate, ReliabilityEstimate};
pub use trace::{format_path, TraceLine, TraceLog};

/// Delay and timer knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Calibration {
    /// Processing delay at a relaying access or donor node.
    pub proc_ran_us: u64,
    /// Processing delay at a relaying aggregation or core site.
    pub proc_core_us: u64,
    /// Delay before a session broken by a failure is requested again
    /// (Approaches B and C).
    pub reinject_delay_us: u64,
    pub timers: TimerConfig,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            proc_ran_us: 50,
            proc_core_us: 200,
            reinject_delay_us: 1_000,
            timers: TimerConfig::default(),
        }
    }
}

impl Calibration {
    pub fn processing_us(&self, kind: NodeKind) -> u64 {
        match kind {
            NodeKind::Ue => 0,
            NodeKind::AccessNode | NodeKind::DonorNode => self.proc_ran_us,
            NodeKind::AggregationSite | NodeKind::CoreSite => self.proc_core_us,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrafficSpec {
    pub start_us: u64,
    pub interval_us: u64,
    pub count: u64,
    pub size_bytes: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSpec {
    pub src_ue: NodeId,
    pub dst_ue: NodeId,
    pub at_us: u64,
    pub qos: QosProfile,
    pub channel_quality: u8,
    /// PDU sessions requested (used by Approach C admission).
    pub pdu_sessions: u8,
    pub traffic: Option<TrafficSpec>,
}

impl SessionSpec {
    pub fn new(src_ue: NodeId, dst_ue: NodeId, at_us: u64) -> Self {
        SessionSpec {
            src_ue,
            dst_ue,
            at_us,
            qos: QosProfile::xurllc(1_000),
            channel_quality: 10,
            pdu_sessions: 1,
            traffic: None,
        }
    }

    pub fn with_traffic(mut self, t: TrafficSpec) -> Self {
        self.traffic = Some(t);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureTarget {
    Link(LinkId),
    Node(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Workload {
    pub sessions: Vec<SessionSpec>,
    pub failures: Vec<(u64, FailureTarget)>,
    pub recoveries: Vec<(u64, LinkId)>,
    /// Source UE releases the session with `(src_ue, dst_ue)` at the time.
    pub releases: Vec<(u64, NodeId, NodeId)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunConfig {
    pub seed: u64,
    pub horizon_us: u64,
    pub calibration: Calibration,
}

impl RunConfig {
    pub fn new(seed: u64, horizon_us: u64) -> Self {
        RunConfig {
            seed,
            horizon_us,
            calibration: Calibration::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub trace: TraceLog,
    /// Node states at the end of the run, for inspection.
    pub nodes: BTreeMap<NodeId, NodeState>,
}

#[derive(Debug, Clone)]
struct Frame {
    bytes: Vec<u8>,
    tag: MessageTag,
    route: Vec<NodeId>,
    /// Index into `route` of the node the frame is arriving at.
    idx: usize,
    link: LinkId,
    epoch: u64,
}

#[derive(Debug, Clone)]
struct DataFrame {
    packet: Packet,
    session: usize,
    route: Vec<NodeId>,
    idx: usize,
    link: LinkId,
    epoch: u64,
    /// Nodes actually visited so far.
    visited: Vec<NodeId>,
}

#[derive(Debug, Clone)]
enum EventKind {
    Frame(Frame),
    Data(DataFrame),
    Timer(NodeId, TimerId),
    Fail(FailureTarget),
    Recover(LinkId),
    Inject(usize),
    Traffic { session: usize, seq_no: u64 },
    Release(usize),
}

#[derive(Debug)]
struct Scheduled {
    time: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default)]
struct SessionRun {
    src_active: bool,
    dst_active: bool,
    inject_at: Option<u64>,
    established: bool,
    /// Set when a failure broke the session; cleared on repair.
    broken_by: Option<usize>,
    released: bool,
    reinject_pending: bool,
    metrics: SessionMetrics,
}

struct Engine<'a> {
    topo: &'a Topology,
    approach: Approach,
    cfg: RunConfig,
    workload: &'a Workload,
    queue: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    now: u64,
    nodes: BTreeMap<NodeId, NodeState>,
    failures: FailureSet,
    epochs: Vec<u64>,
    streams: Vec<ChaCha8Rng>,
    runs: Vec<SessionRun>,
    by_pair: BTreeMap<(NodeId, NodeId), usize>,
    metrics: Metrics,
    trace: TraceLog,
}

fn state_label(s: Option<crate::session::FsmState>) -> String {
    s.map_or_else(|| "-".to_string(), |s| s.to_string())
}

/// Runs `workload` on `topology` under `approach` until `horizon_us`.
pub fn run(
    topology: &Topology,
    approach: Approach,
    workload: &Workload,
    cfg: &RunConfig,
) -> Result<RunOutput, SimError> {
    validate_workload(topology, workload, cfg)?;
    let mut e = Engine::new(topology, approach, workload, *cfg);
    e.seed_events();
    e.run_loop();
    Ok(e.finish())
}

fn validate_workload(topo: &Topology, w: &Workload, cfg: &RunConfig) -> Result<(), SimError> {
    let err = |m: String| Err(SimError::Config(m));
    if cfg.horizon_us == 0 {
        return err("horizon_us must be positive".into());
    }
    let mut pairs = std::collections::BTreeSet::new();
    for (i, s) in w.sessions.iter().enumerate() {
        for ue in [s.src_ue, s.dst_ue] {
            if topo.kind(ue) != Some(NodeKind::Ue) {
                return err(format!(
                    "sessions[{i}]: node {ue} is not a UE in the topology"
                ));
            }
        }
        if s.src_ue == s.dst_ue {
            return err(format!("sessions[{i}]: src_ue equals dst_ue"));
        }
        if !pairs.insert((s.src_ue, s.dst_ue)) {
            return err(format!(
                "sessions[{i}]: duplicate session {} -> {}",
                s.src_ue, s.dst_ue
            ));
        }
        if s.pdu_sessions == 0 {
            return err(format!("sessions[{i}]: pdu_sessions must be at least 1"));
        }
        if !s.qos.is_valid() {
            return err(format!("sessions[{i}]: invalid qos"));
        }
        if s.channel_quality > crate::protocol::MAX_CHANNEL_QUALITY {
            return err(format!("sessions[{i}]: channel_quality above 15"));
        }
        if let Some(t) = s.traffic {
            if t.count > 0 && t.interval_us == 0 {
                return err(format!(
                    "sessions[{i}]: traffic interval_us must be positive"
                ));
            }
            if t.size_bytes == 0 {
                return err(format!(
                    "sessions[{i}]: traffic size_bytes must be at least 1"
                ));
            }
        }
    }
    for (at, t) in &w.failures {
        match t {
            FailureTarget::Link(l) if l.0 >= topo.links().len() => {
                return err(format!("failure at {at}: unknown link {l}"))
            }
            FailureTarget::Node(n) if topo.node(*n).is_none() => {
                return err(format!("failure at {at}: unknown node {n}"))
            }
            _ => {}
        }
    }
    for (at, l) in &w.recoveries {
        if l.0 >= topo.links().len() {
            return err(format!("recovery at {at}: unknown link {l}"));
        }
    }
    for (at, s, d) in &w.releases {
        if !pairs.contains(&(*s, *d)) {
            return err(format!("release at {at}: no session {s} -> {d}"));
        }
    }
    Ok(())
}

impl<'a> Engine<'a> {
    fn new(topo: &'a Topology, approach: Approach, workload: &'a Workload, cfg: RunConfig) -> Self {
        let nodes = topo
            .node_ids()
            .map(|id| (id, NodeState::new(topo, id).expect("node from topology")))
            .collect();
        let streams = (0..topo.links().len())
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
                r.set_stream(i as u64);
                r
            })
            .collect();
        let runs = workload
            .sessions
            .iter()
            .map(|s| SessionRun {
                metrics: SessionMetrics {
                    src_ue: s.src_ue,
                    dst_ue: s.dst_ue,
                    ..Default::default()
                },
                ..Default::default()
            })
            .collect();
        let by_pair = workload
            .sessions
            .iter()
            .enumerate()
            .map(|(i, s)| ((s.src_ue, s.dst_ue), i))
            .collect();
        Engine {
            topo,
            approach,
            cfg,
            workload,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            nodes,
            failures: FailureSet::default(),
            epochs: vec![0; topo.links().len()],
            streams,
            runs,
            by_pair,
            metrics: Metrics::default(),
            trace: TraceLog::default(),
        }
    }

    fn ctx(&self) -> Ctx<'a> {
        let c = &self.cfg.calibration;
        let mut timers = c.timers;
        // The round-trip estimate must cover the slowest relay.
        timers.per_relay_us = timers.per_relay_us.max(c.proc_ran_us).max(c.proc_core_us);
        Ctx {
            topo: self.topo,
            approach: self.approach,
            timers,
        }
    }

    fn schedule(&mut self, time: u64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled {
            time,
            seq: self.seq,
            kind,
        }));
    }

    fn seed_events(&mut self) {
        let w = self.workload;
        for (i, s) in w.sessions.iter().enumerate() {
            self.schedule(s.at_us, EventKind::Inject(i));
            if let Some(t) = s.traffic {
                for k in 0..t.count {
                    self.schedule(
                        t.start_us + k * t.interval_us,
                        EventKind::Traffic {
                            session: i,
                            seq_no: k,
                        },
                    );
                }
            }
        }
        for (at, t) in &w.failures {
            self.schedule(*at, EventKind::Fail(*t));
        }
        for (at, l) in &w.recoveries {
            self.schedule(*at, EventKind::Recover(*l));
        }
        for (at, s, d) in &w.releases {
            let i = self.by_pair[&(*s, *d)];
            self.schedule(*at, EventKind::Release(i));
        }
    }

    fn run_loop(&mut self) {
        while let Some(Reverse(ev)) = self.queue.pop() {
            if ev.time > self.cfg.horizon_us {
                break;
            }
            debug_assert!(ev.time >= self.now, "event scheduled in the past");
            self.now = ev.time;
            self.metrics.events_processed += 1;
            match ev.kind {
                EventKind::Frame(f) => self.on_frame(f),
                EventKind::Data(d) => self.on_data(d),
                EventKind::Timer(n, t) => self.on_timer(n, t),
                EventKind::Fail(t) => self.on_fail(t),
                EventKind::Recover(l) => self.on_recover(l),
                EventKind::Inject(i) => self.on_inject(i),
                EventKind::Traffic { session, seq_no } => self.on_traffic(session, seq_no),
                EventKind::Release(i) => self.on_release(i),
            }
        }
    }

    fn finish(mut self) -> RunOutput {
        let mut sessions = Vec::with_capacity(self.runs.len());
        for r in &mut self.runs {
            let m = &mut r.metrics;
            let in_flight = m.injected - m.delivered - m.dropped_total();
            if in_flight > 0 {
                *m.dropped.entry(DropReason::Horizon).or_default() += in_flight;
            }
            sessions.push(m.clone());
        }
        self.metrics.sessions = sessions;
        RunOutput {
            metrics: self.metrics,
            trace: self.trace,
            nodes: self.nodes,
        }
    }

    fn node_alive(&self, n: NodeId) -> bool {
        !self.failures.nodes.contains(&n)
    }

    fn link_alive(&self, l: LinkId) -> bool {
        let link = self.topo.link(l);
        !self.failures.links.contains(&l) && self.node_alive(link.a) && self.node_alive(link.b)
    }

    fn trace_line(
        &mut self,
        node: NodeId,
        out: Option<&StepOutput>,
        tag: String,
        path: Vec<NodeId>,
    ) {
        let (before, after) = match out {
            Some(o) => (state_label(o.before), state_label(o.after)),
            None => ("-".to_string(), "-".to_string()),
        };
        self.trace.push(TraceLine {
            time_us: self.now,
            node,
            before,
            after,
            tag,
            path,
        });
    }

    /// Link loss draw on the link's own stream.
    fn lost_on(&mut self, l: LinkId) -> bool {
        let p = self.topo.link(l).loss_prob;
        if p <= 0.0 {
            return false;
        }
        if p >= 1.0 {
            return true;
        }
        self.streams[l.0].gen::<f64>() < p
    }

    // ---- signalling ----

    fn signalling_route(&self, msg: &ProtocolMessage) -> Option<Vec<NodeId>> {
        let (src, dst) = (msg.src(), msg.dst());
        let direct = msg.tag() == MessageTag::MeshTopologyUpdate
            || self.topo.kind(src) == Some(NodeKind::Ue)
            || self.topo.kind(dst) == Some(NodeKind::Ue);
        if direct {
            return self.topo.link_between(src, dst).map(|_| vec![src, dst]);
        }
        let view = self.nodes[&src].view();
        Router::new(self.topo)
            .with_failures(view)
            .with_mesh_interface(Some(self.approach.mesh_interface()))
            .path(src, dst, Plane::Signalling)
            .ok()
            .map(|p| p.hops)
    }

    fn classify(&mut self, route: &[NodeId]) {
        let kinds: Vec<NodeKind> = route.iter().filter_map(|n| self.topo.kind(*n)).collect();
        let s = &mut self.metrics.signalling;
        if kinds.contains(&NodeKind::CoreSite) {
            s.core += 1;
        } else if kinds.contains(&NodeKind::AggregationSite) {
            s.agg += 1;
        } else {
            s.ran += 1;
        }
        if route.len() > 2 {
            s.donor_hops += kinds[1..kinds.len() - 1]
                .iter()
                .filter(|k| **k == NodeKind::DonorNode)
                .count() as u64;
        }
    }

    fn send(&mut self, msg: ProtocolMessage) {
        let from = msg.src();
        let Some(route) = self.signalling_route(&msg) else {
            self.metrics.signalling.lost += 1;
            self.trace_line(
                from,
                None,
                format!("NOROUTE:{}", msg.tag()),
                vec![from, msg.dst()],
            );
            return;
        };
        self.classify(&route);
        let frame = Frame {
            bytes: encode(&msg),
            tag: msg.tag(),
            route,
            idx: 0,
            link: LinkId(0),
            epoch: 0,
        };
        self.forward_frame(frame, self.now);
    }

    /// Puts the frame on the link after `route[idx]`, departing at `at`.
    fn forward_frame(&mut self, mut f: Frame, at: u64) {
        let (here, next) = (f.route[f.idx], f.route[f.idx + 1]);
        let Some(l) = self.topo.link_between(here, next) else {
            self.metrics.signalling.lost += 1;
            return;
        };
        if !self.link_alive(l) || self.lost_on(l) {
            self.metrics.signalling.lost += 1;
            let tag = format!("LOST:{}", f.tag);
            let path = f.route[..=f.idx + 1].to_vec();
            self.trace_line(here, None, tag, path);
            return;
        }
        let link = self.topo.link(l);
        let arrive = at + link.latency_us + link.transmission_us(f.bytes.len());
        f.idx += 1;
        f.link = l;
        f.epoch = self.epochs[l.0];
        self.schedule(arrive, EventKind::Frame(f));
    }

    fn on_frame(&mut self, f: Frame) {
        let here = f.route[f.idx];
        if self.epochs[f.link.0] != f.epoch || !self.node_alive(here) {
            self.metrics.signalling.lost += 1;
            let path = f.route[..=f.idx].to_vec();
            self.trace_line(here, None, format!("LOST:{}", f.tag), path);
            return;
        }
        if f.idx + 1 < f.route.len() {
            let at = self.now
                + self
                    .cfg
                    .calibration
                    .processing_us(self.topo.kind(here).unwrap());
            return self.forward_frame(f, at);
        }
        let msg = match decode(&f.bytes) {
            Ok(m) => m,
            Err(e) => panic!("engine produced an undecodable frame: {e}"),
        };
        let ctx = self.ctx();
        let node = self.nodes.get_mut(&here).expect("known node");
        let out = node.handle_message(&ctx, &msg, self.now);
        self.trace_line(here, Some(&out), msg.tag().to_string(), f.route.clone());
        self.apply(here, out);
    }

    fn on_timer(&mut self, n: NodeId, t: TimerId) {
        if !self.node_alive(n) {
            return;
        }
        let ctx = self.ctx();
        let out = self.nodes.get_mut(&n).unwrap().on_timer(&ctx, t, self.now);
        if out.before.is_some() || !out.outgoing.is_empty() {
            self.trace_line(n, Some(&out), "TIMER".into(), vec![]);
        }
        self.apply(n, out);
    }

    /// Sends the outgoing messages and books the effects of a step.
    fn apply(&mut self, node: NodeId, out: StepOutput) {
        for e in &out.effects {
            match e {
                StateEffect::ArmTimer { timer, at_us } => {
                    self.schedule(*at_us, EventKind::Timer(node, *timer));
                }
                StateEffect::UeActive { ue, peer, role, .. } => {
                    let pair = match role {
                        Role::Source => (*ue, *peer),
                        Role::Target => (*peer, *ue),
                    };
                    if let Some(&i) = self.by_pair.get(&pair) {
                        let now = self.now;
                        let r = &mut self.runs[i];
                        match role {
                            Role::Source => r.src_active = true,
                            Role::Target => r.dst_active = true,
                        }
                        if r.src_active && r.dst_active {
                            if !r.established {
                                r.established = true;
                                if r.metrics.establishment_us.is_none() {
                                    r.metrics.establishment_us = r.inject_at.map(|t| now - t);
                                }
                            }
                            if let Some(f) = r.broken_by.take() {
                                self.metrics.failures[f].repaired_at.insert(i, now);
                            }
                        }
                    }
                }
                StateEffect::SessionEnded {
                    src_ue,
                    dst_ue,
                    reason,
                    ..
                } => {
                    if let Some(&i) = self.by_pair.get(&(*src_ue, *dst_ue)) {
                        let r = &mut self.runs[i];
                        r.metrics.last_failure = Some(*reason);
                        if node == *src_ue {
                            r.src_active = false;
                        }
                        if node == *dst_ue {
                            r.dst_active = false;
                        }
                        if !r.src_active || !r.dst_active {
                            r.established = false;
                        }
                    }
                }
                StateEffect::RouteChanged { key, .. } => {
                    let src_side = self.nodes[&node]
                        .session(*key)
                        .map(|s| (s.src_ue(), s.dst_ue(), s.role));
                    if let Some((s, d, Role::Source)) = src_side {
                        if let Some(&i) = self.by_pair.get(&(s, d)) {
                            let now = self.now;
                            if let Some(f) = self.runs[i].broken_by.take() {
                                self.metrics.failures[f].repaired_at.insert(i, now);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        for m in out.outgoing {
            self.send(m);
        }
    }

    // ---- workload ----

    fn on_inject(&mut self, i: usize) {
        let s = &self.workload.sessions[i];
        if !self.node_alive(s.src_ue) {
            return;
        }
        self.runs[i].reinject_pending = false;
        if self.runs[i].inject_at.is_none() {
            self.runs[i].inject_at = Some(self.now);
        }
        let request = SessionRequest {
            user_id: s.src_ue,
            qos: s.qos,
            destination_id: s.dst_ue,
            channel_quality: s.channel_quality,
        };
        let pdus = (1..=s.pdu_sessions)
            .map(|id| PduSession { id, qos: s.qos })
            .collect();
        let ctx = self.ctx();
        let src = s.src_ue;
        let out = self
            .nodes
            .get_mut(&src)
            .unwrap()
            .start_session(&ctx, request, pdus, self.now);
        self.trace_line(src, Some(&out), "INJECT".into(), vec![s.src_ue, s.dst_ue]);
        self.apply(src, out);
    }

    fn on_release(&mut self, i: usize) {
        let s = &self.workload.sessions[i];
        let (src, dst) = (s.src_ue, s.dst_ue);
        self.runs[i].released = true;
        if !self.node_alive(src) {
            return;
        }
        let out = self
            .nodes
            .get_mut(&src)
            .unwrap()
            .release_session(Role::Source, dst, self.now);
        self.trace_line(src, Some(&out), "RELEASE".into(), vec![src, dst]);
        self.apply(src, out);
    }

    fn drop_packet(&mut self, session: usize, reason: DropReason, at: NodeId, path: Vec<NodeId>) {
        *self.runs[session]
            .metrics
            .dropped
            .entry(reason)
            .or_default() += 1;
        self.trace_line(at, None, format!("DROP:{reason}"), path);
    }

    fn on_traffic(&mut self, i: usize, seq_no: u64) {
        let s = &self.workload.sessions[i];
        let t = s.traffic.expect("traffic event implies a traffic spec");
        let (src, dst) = (s.src_ue, s.dst_ue);
        self.runs[i].metrics.injected += 1;
        let ue = self.nodes[&src].ue_session(Role::Source, dst).cloned();
        let active = ue
            .as_ref()
            .filter(|u| u.state == crate::session::UeState::Active);
        let Some(u) = active else {
            let reason = match self.runs[i].metrics.last_failure {
                Some(RejectReason::NoRoute) => DropReason::NoRoute,
                _ => DropReason::NotEstablished,
            };
            return self.drop_packet(i, reason, src, vec![src]);
        };
        let packet = Packet {
            session_id: u.session_id,
            seq_no,
            size_bytes: t.size_bytes,
            created_at_us: self.now,
            src_ue: src,
            dst_ue: dst,
        };
        let d = DataFrame {
            packet,
            session: i,
            route: vec![src, u.serving],
            idx: 0,
            link: LinkId(0),
            epoch: 0,
            visited: vec![src],
        };
        self.forward_data(d, self.now);
    }

    fn forward_data(&mut self, mut d: DataFrame, at: u64) {
        let (here, next) = (d.route[d.idx], d.route[d.idx + 1]);
        let Some(l) = self.topo.link_between(here, next) else {
            return self.drop_packet(d.session, DropReason::NoRoute, here, d.visited);
        };
        if !self.link_alive(l) {
            let mut path = d.visited;
            path.push(next);
            return self.drop_packet(d.session, DropReason::LinkDown, here, path);
        }
        if self.lost_on(l) {
            let mut path = d.visited;
            path.push(next);
            return self.drop_packet(d.session, DropReason::LinkLoss, here, path);
        }
        let link = self.topo.link(l);
        let arrive = at + link.latency_us + link.transmission_us(d.packet.size_bytes as usize);
        d.idx += 1;
        d.link = l;
        d.epoch = self.epochs[l.0];
        self.schedule(arrive, EventKind::Data(d));
    }

    fn on_data(&mut self, mut d: DataFrame) {
        let here = d.route[d.idx];
        d.visited.push(here);
        if self.epochs[d.link.0] != d.epoch {
            return self.drop_packet(d.session, DropReason::LinkDown, here, d.visited);
        }
        if !self.node_alive(here) {
            return self.drop_packet(d.session, DropReason::NodeDown, here, d.visited);
        }
        if here == d.packet.dst_ue {
            let latency = self.now - d.packet.created_at_us;
            let m = &mut self.runs[d.session].metrics;
            m.delivered += 1;
            m.latencies_us.push(latency);
            self.trace_line(here, None, "DATA".into(), d.visited);
            return;
        }
        let kind = self.topo.kind(here).unwrap();
        // DTF runs once on the way out (first arrival from the source UE)
        // and once on the way in (next hop is the destination UE). Hairpin
        // routes may pass the serving gNBs more than once.
        let from_src_ue = d.idx == 1 && d.route[0] == d.packet.src_ue;
        let to_dst_ue = d.route.get(d.idx + 1) == Some(&d.packet.dst_ue);
        if from_src_ue || to_dst_ue {
            let ctx = self.ctx();
            let node = self.nodes.get_mut(&here).unwrap();
            match node.forward_packet(&ctx, &d.packet, self.now) {
                Ok(dec) => {
                    if dec.delta.qos_violations > 0 {
                        self.runs[d.session].metrics.qos_violations += 1;
                    }
                    if from_src_ue && dec.outbound {
                        let entry = node.mapping.get(dec.session_id, dec.local_ue).unwrap();
                        let pos = entry.path.iter().position(|n| *n == here).unwrap_or(0);
                        d.route = entry.path[pos..].to_vec();
                        d.idx = 0;
                    }
                }
                Err(reason) => return self.drop_packet(d.session, reason, here, d.visited),
            }
        }
        if d.idx + 1 >= d.route.len() {
            return self.drop_packet(d.session, DropReason::NoRoute, here, d.visited);
        }
        let at = self.now + self.cfg.calibration.processing_us(kind);
        self.forward_data(d, at);
    }

    // ---- failures ----

    fn on_fail(&mut self, target: FailureTarget) {
        let (label, links): (String, Vec<LinkId>) = match target {
            FailureTarget::Link(l) => {
                self.failures.links.insert(l);
                (format!("FAIL_LINK:{l}"), vec![l])
            }
            FailureTarget::Node(n) => {
                self.failures.nodes.insert(n);
                let ls = self.topo.neighbors(n).iter().map(|(l, _)| *l).collect();
                (format!("FAIL_NODE:{n}"), ls)
            }
        };
        for l in &links {
            self.epochs[l.0] += 1;
        }
        let path = match target {
            FailureTarget::Link(l) => {
                let link = self.topo.link(l);
                vec![link.a, link.b]
            }
            FailureTarget::Node(n) => vec![n],
        };
        let at_node = path[0];
        self.trace_line(at_node, None, label.clone(), path);

        let affected = self.sessions_using(&links, target);
        let fidx = self.metrics.failures.len();
        self.metrics.failures.push(FailureRecord {
            at_us: self.now,
            target: label,
            affected: affected.clone(),
            repaired_at: BTreeMap::new(),
        });
        for &i in &affected {
            self.runs[i].broken_by = Some(fidx);
        }

        match self.approach {
            Approach::A => {
                for l in links {
                    let link = self.topo.link(l);
                    for end in [link.a, link.b] {
                        let ran = self.topo.kind(end).is_some_and(NodeKind::is_ran);
                        if ran && self.node_alive(end) {
                            self.link_event(end, l, false);
                        }
                    }
                }
            }
            Approach::B | Approach::C => {
                self.broadcast_view();
                for i in affected {
                    self.abort_and_reinject(i);
                }
            }
        }
    }

    fn link_event(&mut self, node: NodeId, l: LinkId, up: bool) {
        let ctx = self.ctx();
        let out = self
            .nodes
            .get_mut(&node)
            .unwrap()
            .on_link_change(&ctx, l, up, self.now);
        let tag = if up { "LINK_UP" } else { "LINK_DOWN" };
        let link = self.topo.link(l);
        self.trace_line(node, Some(&out), format!("{tag}:{l}"), vec![link.a, link.b]);
        self.apply(node, out);
    }

    fn broadcast_view(&mut self) {
        let view = self.failures.clone();
        for n in self.nodes.values_mut() {
            n.set_view(view.clone());
        }
    }

    /// Sessions whose current route crosses any of `links` or the failed node.
    fn sessions_using(&self, links: &[LinkId], target: FailureTarget) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, s) in self.workload.sessions.iter().enumerate() {
            let Some(gnb) = self.topo.serving_gnb(s.src_ue) else {
                continue;
            };
            let route = self.nodes[&gnb]
                .sessions()
                .find(|r| {
                    r.role == Role::Source
                        && r.local_ue == s.src_ue
                        && r.peer_ue == s.dst_ue
                        && r.is_live()
                })
                .map(|r| {
                    self.nodes[&gnb]
                        .mapping
                        .get(r.session_id, r.local_ue)
                        .map_or_else(|| r.path.clone(), |e| e.path.clone())
                });
            let Some(route) = route else { continue };
            let hits_node = matches!(target, FailureTarget::Node(n) if route.contains(&n));
            let hits_link = route.windows(2).any(|w| {
                self.topo
                    .link_between(w[0], w[1])
                    .is_some_and(|l| links.contains(&l))
            });
            if hits_node || hits_link {
                out.push(i);
            }
        }
        out
    }

    /// Approaches B and C: tear the session down everywhere and request it
    /// again shortly.
    fn abort_and_reinject(&mut self, i: usize) {
        let s = &self.workload.sessions[i];
        let (src, dst) = (s.src_ue, s.dst_ue);
        let gnbs: Vec<NodeId> = [src, dst]
            .iter()
            .filter_map(|u| self.topo.serving_gnb(*u))
            .collect();
        let sid = gnbs
            .first()
            .and_then(|g| {
                self.nodes[g]
                    .sessions()
                    .find(|r| {
                        r.role == Role::Source
                            && r.local_ue == src
                            && r.peer_ue == dst
                            && r.is_live()
                    })
                    .map(|r| r.session_id)
            })
            .unwrap_or_default();
        for n in gnbs.into_iter().chain([src, dst]) {
            let out = self.nodes.get_mut(&n).unwrap().abort_session(
                sid,
                src,
                dst,
                RejectReason::PathFailure,
            );
            if out.before.is_some() {
                self.trace_line(n, Some(&out), "ABORT".into(), vec![src, dst]);
            }
            self.apply(n, out);
        }
        self.schedule_reinject(i);
    }

    fn schedule_reinject(&mut self, i: usize) {
        let at = self.now + self.cfg.calibration.reinject_delay_us;
        self.runs[i].reinject_pending = true;
        self.schedule(at, EventKind::Inject(i));
    }

    /// Sessions a failure took down and nobody is bringing back yet.
    fn retry_broken(&mut self) {
        for i in 0..self.runs.len() {
            let r = &self.runs[i];
            if r.broken_by.is_none() || r.established || r.released || r.reinject_pending {
                continue;
            }
            let s = &self.workload.sessions[i];
            if self.nodes[&s.src_ue]
                .ue_session(Role::Source, s.dst_ue)
                .is_none()
            {
                self.schedule_reinject(i);
            }
        }
    }

    fn on_recover(&mut self, l: LinkId) {
        if !self.failures.links.remove(&l) {
            return;
        }
        let link = self.topo.link(l);
        self.trace_line(
            link.a,
            None,
            format!("RECOVER_LINK:{l}"),
            vec![link.a, link.b],
        );
        match self.approach {
            Approach::A => {
                for end in [link.a, link.b] {
                    let ran = self.topo.kind(end).is_some_and(NodeKind::is_ran);
                    if ran && self.node_alive(end) {
                        self.link_event(end, l, true);
                    }
                }
            }
            Approach::B | Approach::C => {
                self.broadcast_view();
                self.retry_broken();
            }
        }
    }
}
