//! Per-node session state machines for the three establishment approaches,
//! admission control, mapping tables and the data transfer function (DTF).
//!
//! * Approach A runs in a mesh layer on the gNBs: authentication, resource
//!   scheduling, topology flooding and forwarding.
//! * Approach B reuses RRC: the source gNB notifies the target gNB directly
//!   and both configure their own UE.
//! * Approach C reuses XnAP: a cached Xn association per gNB pair carries
//!   connection requests with admitted/not-admitted PDU session lists.
//!
//! Every handler is a deterministic function of the node state, the routing
//! context, the input and the current time. The simulator owns all state.

mod ledger;
mod mapping;
mod node;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::protocol::{MessageTag, RejectReason, SessionId};
use crate::topology::{LinkKind, NodeId, Topology};

pub use ledger::{admission_control, ResourceLedger};
pub use mapping::{
    dtf_forward, mapping_table_update, DropReason, DtfAccounting, DtfCounters, DtfDecision,
    InconsistentEntry, MappingTable, MappingTableEntry, Packet,
};
pub use node::{
    handle_message, mesh_layer_step, GnbSession, MeshComponent, MeshEvent, MeshStepError,
    NodeState, UeSession, XnAssociation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Approach {
    /// Mesh layer in the RAN nodes.
    A,
    /// RRC-based peer-to-peer signalling.
    B,
    /// XnAP-based signalling.
    C,
}

impl Approach {
    pub const ALL: [Approach; 3] = [Approach::A, Approach::B, Approach::C];

    /// Interface that carries gNB-to-gNB traffic under this approach.
    pub fn mesh_interface(self) -> LinkKind {
        match self {
            Approach::B => LinkKind::Uu,
            Approach::A | Approach::C => LinkKind::Xn,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Approach::A => "A",
            Approach::B => "B",
            Approach::C => "C",
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.label())
    }
}

impl std::str::FromStr for Approach {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Approach::A),
            "B" | "b" => Ok(Approach::B),
            "C" | "c" => Ok(Approach::C),
            _ => Err(format!("unknown approach `{s}` (expected A, B or C)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceBState {
    Idle,
    ResourceChecked,
    AwaitTargetResponse,
    PathSetup,
    AwaitComplete,
    Active,
    Failed(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetBState {
    Idle,
    Evaluating,
    Configured,
    Active,
    Failed(RejectReason),
}

/// Approach C session states. The association with a peer uses the subset
/// `XnIdle`, `XnSetup`, `Active`, `Failed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum XnState {
    XnIdle,
    XnSetup,
    AwaitAck,
    Configured,
    Active,
    Failed(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MeshState {
    Idle,
    Authenticated,
    Scheduled,
    Active,
    Failed(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UeState {
    Detached,
    Requested,
    Configured,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FsmState {
    SourceB(SourceBState),
    TargetB(TargetBState),
    Xn(XnState),
    Mesh(MeshState),
    Ue(UeState),
}

impl FsmState {
    pub fn is_active(self) -> bool {
        matches!(
            self,
            FsmState::SourceB(SourceBState::Active)
                | FsmState::TargetB(TargetBState::Active)
                | FsmState::Xn(XnState::Active)
                | FsmState::Mesh(MeshState::Active)
                | FsmState::Ue(UeState::Active)
        )
    }

    pub fn failure(self) -> Option<RejectReason> {
        match self {
            FsmState::SourceB(SourceBState::Failed(r))
            | FsmState::TargetB(TargetBState::Failed(r))
            | FsmState::Xn(XnState::Failed(r))
            | FsmState::Mesh(MeshState::Failed(r)) => Some(r),
            _ => None,
        }
    }

    pub fn is_failed(self) -> bool {
        self.failure().is_some()
    }
}

impl fmt::Display for FsmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FsmState::SourceB(s) => fmt::Debug::fmt(s, f),
            FsmState::TargetB(s) => fmt::Debug::fmt(s, f),
            FsmState::Xn(s) => fmt::Debug::fmt(s, f),
            FsmState::Mesh(s) => fmt::Debug::fmt(s, f),
            FsmState::Ue(s) => fmt::Debug::fmt(s, f),
        }
    }
}

/// Identifies one side of a session at a gNB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionKey {
    pub session_id: SessionId,
    pub local_ue: NodeId,
}

impl fmt::Display for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.session_id, self.local_ue)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TimerSlot {
    Session(SessionKey),
    /// UE-side guard for a session with `peer`.
    Ue {
        role: Role,
        peer: NodeId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimerId {
    pub slot: TimerSlot,
    pub generation: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolViolation {
    pub state: Option<FsmState>,
    pub tag: MessageTag,
}

impl fmt::Display for ProtocolViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.state {
            Some(s) => write!(f, "{} not expected in state {s}", self.tag),
            None => write!(f, "{} matches no session", self.tag),
        }
    }
}

/// Side effects of one step, in the order they happened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StateEffect {
    Transition {
        key: Option<SessionKey>,
        from: FsmState,
        to: FsmState,
    },
    MappingWrite(MappingTableEntry),
    MappingDelete(SessionKey),
    Allocate(u32),
    Release(u32),
    ArmTimer {
        timer: TimerId,
        at_us: u64,
    },
    CancelTimer(TimerId),
    /// A gNB side reached Active.
    GnbActive {
        key: SessionKey,
        role: Role,
    },
    /// A UE finished configuration for its session with `peer`.
    UeActive {
        ue: NodeId,
        peer: NodeId,
        role: Role,
        session_id: SessionId,
    },
    /// A session ended before or after activation at this node.
    SessionEnded {
        src_ue: NodeId,
        dst_ue: NodeId,
        session_id: SessionId,
        reason: RejectReason,
    },
    RouteChanged {
        key: SessionKey,
        path: Vec<NodeId>,
    },
    /// The routing view no longer contains a usable route for the session.
    RouteLost(SessionKey),
    Violation(ProtocolViolation),
}

/// Everything one handler call produced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepOutput {
    pub outgoing: Vec<crate::protocol::ProtocolMessage>,
    pub effects: Vec<StateEffect>,
    /// State of the session the input concerned, before and after.
    pub before: Option<FsmState>,
    pub after: Option<FsmState>,
}

impl StepOutput {
    pub fn violation(&self) -> Option<ProtocolViolation> {
        self.effects.iter().find_map(|e| match e {
            StateEffect::Violation(v) => Some(*v),
            _ => None,
        })
    }

    pub fn allocated_delta(&self) -> i64 {
        self.effects
            .iter()
            .map(|e| match e {
                StateEffect::Allocate(n) => *n as i64,
                StateEffect::Release(n) => -(*n as i64),
                _ => 0,
            })
            .sum()
    }
}

/// Timer calibration. Awaiting states wait `base_us` plus the estimated
/// round trip of the message they wait on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimerConfig {
    pub base_us: u64,
    /// Extra per-relay allowance in the round-trip estimate.
    pub per_relay_us: u64,
    /// UE wait for its serving gNB before one retry.
    pub ue_guard_us: u64,
    /// Retransmissions allowed before a session fails with `Timeout`.
    pub retries: u8,
}

impl Default for TimerConfig {
    fn default() -> Self {
        TimerConfig {
            base_us: 10_000,
            per_relay_us: 200,
            ue_guard_us: 250_000,
            retries: 1,
        }
    }
}

/// Read-only environment shared by every node of one run.
#[derive(Debug, Clone, Copy)]
pub struct Ctx<'a> {
    pub topo: &'a Topology,
    pub approach: Approach,
    pub timers: TimerConfig,
}

impl<'a> Ctx<'a> {
    pub fn new(topo: &'a Topology, approach: Approach) -> Self {
        Ctx {
            topo,
            approach,
            timers: TimerConfig::default(),
        }
    }
}

/// Resource units granted for a channel quality index: better channels get
/// proportionally more. Index 0 still gets one unit.
pub fn resource_units(channel_quality: u8) -> u16 {
    (channel_quality as u16).max(1)
}
