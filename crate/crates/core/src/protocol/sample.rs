//! Random well-formed messages, for fuzzing the codec and driving tests.
#![doc(hidden)]

use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    AllocatedResources, BearerConfig, Body, MessageTag, PduSession, PduSessionList,
    ProtocolMessage, QosProfile, RejectReason, ServiceType, SessionConfig, SessionId,
    SessionRequest, MAX_CHANNEL_QUALITY,
};
use crate::topology::NodeId;

fn node<R: Rng>(rng: &mut R) -> NodeId {
    NodeId(rng.gen())
}

fn sid<R: Rng>(rng: &mut R) -> SessionId {
    SessionId(rng.gen_range(1..=u32::MAX))
}

pub fn qos<R: Rng>(rng: &mut R) -> QosProfile {
    QosProfile {
        max_latency_us: rng.gen_range(1..=u32::MAX),
        reliability_exp: rng.gen_range(3..=9),
        service_type: *[ServiceType::Xurllc, ServiceType::Embb, ServiceType::Mmtc]
            .choose(rng)
            .unwrap(),
    }
}

pub fn request<R: Rng>(rng: &mut R) -> SessionRequest {
    let user_id = node(rng);
    let mut destination_id = node(rng);
    if destination_id == user_id {
        destination_id = NodeId(user_id.0.wrapping_add(1));
    }
    SessionRequest {
        user_id,
        qos: qos(rng),
        destination_id,
        channel_quality: rng.gen_range(0..=MAX_CHANNEL_QUALITY),
    }
}

pub fn reason<R: Rng>(rng: &mut R) -> RejectReason {
    RejectReason::from_u8(rng.gen_range(1..=10)).unwrap()
}

/// Distinct PDU session ids.
pub fn pdus<R: Rng>(rng: &mut R, max: usize) -> Vec<PduSession> {
    let mut ids: Vec<u8> = (0..=u8::MAX).collect();
    ids.shuffle(rng);
    let n = rng.gen_range(0..=max.min(ids.len()));
    ids[..n]
        .iter()
        .map(|&id| PduSession { id, qos: qos(rng) })
        .collect()
}

fn path<R: Rng>(rng: &mut R) -> Vec<NodeId> {
    let n = rng.gen_range(0..=12);
    (0..n).map(|_| node(rng)).collect()
}

fn config<R: Rng>(rng: &mut R) -> SessionConfig {
    let src_ue = node(rng);
    let mut dst_ue = node(rng);
    if dst_ue == src_ue {
        dst_ue = NodeId(src_ue.0.wrapping_add(1));
    }
    SessionConfig {
        session_id: sid(rng),
        src_ue,
        dst_ue,
        bearer: BearerConfig {
            bearer_id: rng.gen(),
        },
        path: path(rng),
        resources: AllocatedResources {
            reserved_sessions: rng.gen(),
            resource_units: rng.gen(),
        },
    }
}

fn outcome<R: Rng>(rng: &mut R) -> Result<SessionId, RejectReason> {
    if rng.gen_bool(0.7) {
        Ok(sid(rng))
    } else {
        Err(reason(rng))
    }
}

fn verdict<R: Rng>(rng: &mut R) -> (bool, Option<RejectReason>) {
    if rng.gen_bool(0.7) {
        (true, None)
    } else {
        (false, Some(reason(rng)))
    }
}

pub fn body_with_tag<R: Rng>(rng: &mut R, tag: MessageTag) -> Body {
    use MessageTag as T;
    match tag {
        T::RrcSessionRequest => Body::RrcSessionRequest {
            request: request(rng),
            pdu_sessions: pdus(rng, 8),
        },
        T::RrcSessionResponse => Body::RrcSessionResponse {
            destination_id: node(rng),
            result: outcome(rng),
        },
        T::GnbNotification => Body::GnbNotification {
            session_id: sid(rng),
            request: request(rng),
            path: path(rng),
        },
        T::GnbNotificationResponse => {
            let (accept, reason) = verdict(rng);
            Body::GnbNotificationResponse {
                session_id: sid(rng),
                accept,
                reason,
            }
        }
        T::PathConfiguration => Body::PathConfiguration(config(rng)),
        T::PathComplete => Body::PathComplete {
            session_id: sid(rng),
        },
        T::XnSetupRequest => Body::XnSetupRequest,
        T::XnSetupResponse => Body::XnSetupResponse,
        T::XnConnectionRequest => Body::XnConnectionRequest {
            session_id: sid(rng),
            request: request(rng),
            requested: pdus(rng, 8),
            path: path(rng),
        },
        T::XnConnectionAck => {
            let requested = pdus(rng, 8);
            let mut admitted = Vec::new();
            let mut not_admitted = Vec::new();
            for p in &requested {
                if rng.gen_bool(0.5) {
                    admitted.push(*p);
                } else {
                    not_admitted.push(*p);
                }
            }
            Body::XnConnectionAck {
                session_id: sid(rng),
                pdu: PduSessionList {
                    requested,
                    admitted,
                    not_admitted,
                },
            }
        }
        T::RrcSessionConfig => Body::RrcSessionConfig(config(rng)),
        T::RrcComplete => Body::RrcComplete {
            session_id: sid(rng),
        },
        T::SessionRelease => {
            let c = config(rng);
            Body::SessionRelease {
                session_id: c.session_id,
                src_ue: c.src_ue,
                dst_ue: c.dst_ue,
                reason: reason(rng),
            }
        }
        T::MeshTopologyUpdate => {
            let a = node(rng);
            Body::MeshTopologyUpdate {
                origin: node(rng),
                seq: rng.gen(),
                a,
                b: NodeId(a.0.wrapping_add(rng.gen_range(1..=1000))),
                up: rng.gen(),
            }
        }
        T::MeshAuthRequest => Body::MeshAuthRequest {
            request: request(rng),
        },
        T::MeshAuthResponse => Body::MeshAuthResponse {
            destination_id: node(rng),
            result: outcome(rng),
        },
        T::MeshScheduleRequest => Body::MeshScheduleRequest {
            session_id: sid(rng),
            request: request(rng),
            path: path(rng),
        },
        T::MeshScheduleResponse => {
            let (accept, reason) = verdict(rng);
            Body::MeshScheduleResponse {
                session_id: sid(rng),
                accept,
                reason,
            }
        }
    }
}

/// A valid message of a uniformly chosen type.
pub fn message<R: Rng>(rng: &mut R) -> ProtocolMessage {
    let tag = *MessageTag::ALL.choose(rng).unwrap();
    message_with_tag(rng, tag)
}

pub fn message_with_tag<R: Rng>(rng: &mut R, tag: MessageTag) -> ProtocolMessage {
    let body = body_with_tag(rng, tag);
    ProtocolMessage::new(node(rng), node(rng), rng.gen(), body)
}
