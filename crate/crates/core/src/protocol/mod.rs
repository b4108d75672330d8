//! Signalling messages for the three session-establishment approaches and
//! their fixed-layout binary framing.
//!
//! Frame layout (all integers big-endian):
//!
//! ```text
//! 0      2       3     4        6                      22
//! +------+-------+-----+--------+----------------------+-----------+
//! | 4D45 | ver=1 | tag | length | src u32 dst u32 t u64| payload   |
//! +------+-------+-----+--------+----------------------+-----------+
//! ```
//!
//! `length` counts payload bytes only, so a frame is `22 + length` bytes.

mod codec;
pub mod sample;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::topology::NodeId;

pub use codec::{decode, decode_stream, encode, CodecError, FrameReader, FRAME_OVERHEAD};

pub const MAGIC: [u8; 2] = [0x4D, 0x45];
pub const VERSION: u8 = 1;

/// Session identifier allocated by the source gNB; 0 means "no session".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SessionId(pub u32);

impl SessionId {
    pub const NONE: SessionId = SessionId(0);

    pub fn is_none(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ServiceType {
    Xurllc = 1,
    Embb = 2,
    Mmtc = 3,
}

impl ServiceType {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(ServiceType::Xurllc),
            2 => Some(ServiceType::Embb),
            3 => Some(ServiceType::Mmtc),
            _ => None,
        }
    }
}

/// QoS requirements derived from the service type. The error-rate target is
/// `10^-reliability_exp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QosProfile {
    pub max_latency_us: u32,
    pub reliability_exp: u8,
    pub service_type: ServiceType,
}

impl QosProfile {
    pub fn xurllc(max_latency_us: u32) -> Self {
        QosProfile {
            max_latency_us,
            reliability_exp: 5,
            service_type: ServiceType::Xurllc,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.max_latency_us >= 1 && (3..=9).contains(&self.reliability_exp)
    }

    pub fn error_rate(&self) -> f64 {
        10f64.powi(-(self.reliability_exp as i32))
    }
}

pub const MAX_CHANNEL_QUALITY: u8 = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SessionRequest {
    pub user_id: NodeId,
    pub qos: QosProfile,
    pub destination_id: NodeId,
    /// Abstract CQI-like index, 0..=15.
    pub channel_quality: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PduSession {
    pub id: u8,
    pub qos: QosProfile,
}

/// Requested PDU sessions and, once admission control ran, their split into
/// admitted and not admitted.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PduSessionList {
    pub requested: Vec<PduSession>,
    pub admitted: Vec<PduSession>,
    pub not_admitted: Vec<PduSession>,
}

impl PduSessionList {
    /// `admitted` and `not_admitted` are disjoint and together equal
    /// `requested`.
    pub fn is_partition(&self) -> bool {
        if self.admitted.len() + self.not_admitted.len() != self.requested.len() {
            return false;
        }
        let mut remaining: Vec<&PduSession> = self.requested.iter().collect();
        for p in self.admitted.iter().chain(&self.not_admitted) {
            match remaining.iter().position(|r| *r == p) {
                Some(i) => {
                    remaining.swap_remove(i);
                }
                None => return false,
            }
        }
        remaining.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct BearerConfig {
    pub bearer_id: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct AllocatedResources {
    pub reserved_sessions: u16,
    pub resource_units: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RejectReason {
    NoResources = 1,
    NoRoute = 2,
    NotAuthorized = 3,
    Conflict = 4,
    Timeout = 5,
    PathFailure = 6,
    Released = 7,
    TargetRejected = 8,
    ProtocolViolation = 9,
    Superseded = 10,
}

impl RejectReason {
    pub fn from_u8(v: u8) -> Option<Self> {
        use RejectReason::*;
        Some(match v {
            1 => NoResources,
            2 => NoRoute,
            3 => NotAuthorized,
            4 => Conflict,
            5 => Timeout,
            6 => PathFailure,
            7 => Released,
            8 => TargetRejected,
            9 => ProtocolViolation,
            10 => Superseded,
            _ => return None,
        })
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Contents of PathConfiguration (RRC-based) and RrcSessionConfig (Xn-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionConfig {
    pub session_id: SessionId,
    pub src_ue: NodeId,
    pub dst_ue: NodeId,
    pub bearer: BearerConfig,
    /// Path forwarding info: the UE-to-UE route installed in the mapping tables.
    pub path: Vec<NodeId>,
    pub resources: AllocatedResources,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Header {
    pub src: NodeId,
    pub dst: NodeId,
    pub sent_at_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    // RRC-based peer-to-peer connection.
    RrcSessionRequest {
        request: SessionRequest,
        pdu_sessions: Vec<PduSession>,
    },
    RrcSessionResponse {
        destination_id: NodeId,
        result: Result<SessionId, RejectReason>,
    },
    GnbNotification {
        session_id: SessionId,
        request: SessionRequest,
        path: Vec<NodeId>,
    },
    GnbNotificationResponse {
        session_id: SessionId,
        accept: bool,
        reason: Option<RejectReason>,
    },
    PathConfiguration(SessionConfig),
    PathComplete {
        session_id: SessionId,
    },
    // XnAP-based connection.
    XnSetupRequest,
    XnSetupResponse,
    XnConnectionRequest {
        session_id: SessionId,
        request: SessionRequest,
        requested: Vec<PduSession>,
        path: Vec<NodeId>,
    },
    XnConnectionAck {
        session_id: SessionId,
        pdu: PduSessionList,
    },
    RrcSessionConfig(SessionConfig),
    RrcComplete {
        session_id: SessionId,
    },
    // Shared.
    SessionRelease {
        session_id: SessionId,
        src_ue: NodeId,
        dst_ue: NodeId,
        reason: RejectReason,
    },
    // Mesh layer.
    MeshTopologyUpdate {
        origin: NodeId,
        seq: u32,
        a: NodeId,
        b: NodeId,
        up: bool,
    },
    MeshAuthRequest {
        request: SessionRequest,
    },
    MeshAuthResponse {
        destination_id: NodeId,
        result: Result<SessionId, RejectReason>,
    },
    MeshScheduleRequest {
        session_id: SessionId,
        request: SessionRequest,
        path: Vec<NodeId>,
    },
    MeshScheduleResponse {
        session_id: SessionId,
        accept: bool,
        reason: Option<RejectReason>,
    },
}

/// Wire tag of each message type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageTag {
    RrcSessionRequest = 0x01,
    RrcSessionResponse = 0x02,
    GnbNotification = 0x03,
    GnbNotificationResponse = 0x04,
    PathConfiguration = 0x05,
    PathComplete = 0x06,
    XnSetupRequest = 0x07,
    XnSetupResponse = 0x08,
    XnConnectionRequest = 0x09,
    XnConnectionAck = 0x0A,
    RrcSessionConfig = 0x0B,
    RrcComplete = 0x0C,
    SessionRelease = 0x0E,
    MeshTopologyUpdate = 0x0F,
    MeshAuthRequest = 0x10,
    MeshAuthResponse = 0x11,
    MeshScheduleRequest = 0x12,
    MeshScheduleResponse = 0x13,
}

impl MessageTag {
    pub const ALL: [MessageTag; 18] = [
        MessageTag::RrcSessionRequest,
        MessageTag::RrcSessionResponse,
        MessageTag::GnbNotification,
        MessageTag::GnbNotificationResponse,
        MessageTag::PathConfiguration,
        MessageTag::PathComplete,
        MessageTag::XnSetupRequest,
        MessageTag::XnSetupResponse,
        MessageTag::XnConnectionRequest,
        MessageTag::XnConnectionAck,
        MessageTag::RrcSessionConfig,
        MessageTag::RrcComplete,
        MessageTag::SessionRelease,
        MessageTag::MeshTopologyUpdate,
        MessageTag::MeshAuthRequest,
        MessageTag::MeshAuthResponse,
        MessageTag::MeshScheduleRequest,
        MessageTag::MeshScheduleResponse,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        MessageTag::ALL.into_iter().find(|t| *t as u8 == v)
    }

    pub fn name(self) -> &'static str {
        use MessageTag::*;
        match self {
            RrcSessionRequest => "RrcSessionRequest",
            RrcSessionResponse => "RrcSessionResponse",
            GnbNotification => "GnbNotification",
            GnbNotificationResponse => "GnbNotificationResponse",
            PathConfiguration => "PathConfiguration",
            PathComplete => "PathComplete",
            XnSetupRequest => "XnSetupRequest",
            XnSetupResponse => "XnSetupResponse",
            XnConnectionRequest => "XnConnectionRequest",
            XnConnectionAck => "XnConnectionAck",
            RrcSessionConfig => "RrcSessionConfig",
            RrcComplete => "RrcComplete",
            SessionRelease => "SessionRelease",
            MeshTopologyUpdate => "MeshTopologyUpdate",
            MeshAuthRequest => "MeshAuthRequest",
            MeshAuthResponse => "MeshAuthResponse",
            MeshScheduleRequest => "MeshScheduleRequest",
            MeshScheduleResponse => "MeshScheduleResponse",
        }
    }
}

impl fmt::Display for MessageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Body {
    pub fn tag(&self) -> MessageTag {
        use MessageTag as T;
        match self {
            Body::RrcSessionRequest { .. } => T::RrcSessionRequest,
            Body::RrcSessionResponse { .. } => T::RrcSessionResponse,
            Body::GnbNotification { .. } => T::GnbNotification,
            Body::GnbNotificationResponse { .. } => T::GnbNotificationResponse,
            Body::PathConfiguration(_) => T::PathConfiguration,
            Body::PathComplete { .. } => T::PathComplete,
            Body::XnSetupRequest => T::XnSetupRequest,
            Body::XnSetupResponse => T::XnSetupResponse,
            Body::XnConnectionRequest { .. } => T::XnConnectionRequest,
            Body::XnConnectionAck { .. } => T::XnConnectionAck,
            Body::RrcSessionConfig(_) => T::RrcSessionConfig,
            Body::RrcComplete { .. } => T::RrcComplete,
            Body::SessionRelease { .. } => T::SessionRelease,
            Body::MeshTopologyUpdate { .. } => T::MeshTopologyUpdate,
            Body::MeshAuthRequest { .. } => T::MeshAuthRequest,
            Body::MeshAuthResponse { .. } => T::MeshAuthResponse,
            Body::MeshScheduleRequest { .. } => T::MeshScheduleRequest,
            Body::MeshScheduleResponse { .. } => T::MeshScheduleResponse,
        }
    }

    /// Session the message refers to, when it carries one.
    pub fn session_id(&self) -> Option<SessionId> {
        match self {
            Body::RrcSessionResponse { result, .. } | Body::MeshAuthResponse { result, .. } => {
                result.ok()
            }
            Body::GnbNotification { session_id, .. }
            | Body::GnbNotificationResponse { session_id, .. }
            | Body::PathComplete { session_id }
            | Body::XnConnectionRequest { session_id, .. }
            | Body::XnConnectionAck { session_id, .. }
            | Body::RrcComplete { session_id }
            | Body::SessionRelease { session_id, .. }
            | Body::MeshScheduleRequest { session_id, .. }
            | Body::MeshScheduleResponse { session_id, .. } => Some(*session_id),
            Body::PathConfiguration(c) | Body::RrcSessionConfig(c) => Some(c.session_id),
            Body::RrcSessionRequest { .. }
            | Body::XnSetupRequest
            | Body::XnSetupResponse
            | Body::MeshTopologyUpdate { .. }
            | Body::MeshAuthRequest { .. } => None,
        }
    }
}

/// A signalling message with its routing header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolMessage {
    pub header: Header,
    pub body: Body,
}

impl ProtocolMessage {
    pub fn new(src: NodeId, dst: NodeId, sent_at_us: u64, body: Body) -> Self {
        ProtocolMessage {
            header: Header {
                src,
                dst,
                sent_at_us,
            },
            body,
        }
    }

    pub fn tag(&self) -> MessageTag {
        self.body.tag()
    }

    pub fn src(&self) -> NodeId {
        self.header.src
    }

    pub fn dst(&self) -> NodeId {
        self.header.dst
    }

    /// Checks every field-level invariant that the decoder enforces.
    pub fn validate(&self) -> Result<(), CodecError> {
        codec::validate_body(&self.body)
    }
}
