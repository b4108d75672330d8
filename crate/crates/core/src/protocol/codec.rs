use thiserror::Error;

use super::{
    AllocatedResources, BearerConfig, Body, Header, MessageTag, PduSession, PduSessionList,
    ProtocolMessage, QosProfile, RejectReason, ServiceType, SessionConfig, SessionId,
    SessionRequest, MAGIC, MAX_CHANNEL_QUALITY, VERSION,
};
use crate::topology::NodeId;

/// Preamble (6 bytes) plus header (16 bytes).
pub const FRAME_OVERHEAD: usize = 22;
const PREAMBLE: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message tag 0x{0:02X}")]
    UnknownTag(u8),
    #[error("frame truncated")]
    Truncated,
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("invariant violated: {0}")]
    InvariantViolated(String),
}

fn violated(msg: impl Into<String>) -> CodecError {
    CodecError::InvariantViolated(msg.into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn node(&mut self, n: NodeId) {
        self.u32(n.0);
    }
    fn sid(&mut self, s: SessionId) {
        self.u32(s.0);
    }
    fn bool(&mut self, b: bool) {
        self.u8(b as u8);
    }
    fn qos(&mut self, q: &QosProfile) {
        self.u32(q.max_latency_us);
        self.u8(q.reliability_exp);
        self.u8(q.service_type as u8);
    }
    fn request(&mut self, r: &SessionRequest) {
        self.node(r.user_id);
        self.qos(&r.qos);
        self.node(r.destination_id);
        self.u8(r.channel_quality);
    }
    fn pdus(&mut self, list: &[PduSession]) {
        self.u8(list.len() as u8);
        for p in list {
            self.u8(p.id);
            self.qos(&p.qos);
        }
    }
    fn path(&mut self, path: &[NodeId]) {
        self.u8(path.len() as u8);
        for n in path {
            self.node(*n);
        }
    }
    fn reason(&mut self, r: Option<RejectReason>) {
        self.u8(r.map_or(0, |r| r as u8));
    }
    fn outcome(&mut self, r: &Result<SessionId, RejectReason>) {
        match r {
            Ok(s) => {
                self.u8(0);
                self.sid(*s);
            }
            Err(reason) => {
                self.u8(1);
                self.u8(*reason as u8);
            }
        }
    }
    fn config(&mut self, c: &SessionConfig) {
        self.sid(c.session_id);
        self.node(c.src_ue);
        self.node(c.dst_ue);
        self.u16(c.bearer.bearer_id);
        self.path(&c.path);
        self.u16(c.resources.reserved_sessions);
        self.u16(c.resources.resource_units);
    }
}

/// Serializes a message into one frame.
pub fn encode(msg: &ProtocolMessage) -> Vec<u8> {
    debug_assert!(msg.validate().is_ok(), "encoding invalid message {msg:?}");
    let mut p = Writer(Vec::with_capacity(32));
    match &msg.body {
        Body::RrcSessionRequest {
            request,
            pdu_sessions,
        } => {
            p.request(request);
            p.pdus(pdu_sessions);
        }
        Body::RrcSessionResponse {
            destination_id,
            result,
        }
        | Body::MeshAuthResponse {
            destination_id,
            result,
        } => {
            p.node(*destination_id);
            p.outcome(result);
        }
        Body::GnbNotification {
            session_id,
            request,
            path,
        }
        | Body::MeshScheduleRequest {
            session_id,
            request,
            path,
        } => {
            p.sid(*session_id);
            p.request(request);
            p.path(path);
        }
        Body::GnbNotificationResponse {
            session_id,
            accept,
            reason,
        }
        | Body::MeshScheduleResponse {
            session_id,
            accept,
            reason,
        } => {
            p.sid(*session_id);
            p.bool(*accept);
            p.reason(*reason);
        }
        Body::PathConfiguration(c) | Body::RrcSessionConfig(c) => p.config(c),
        Body::PathComplete { session_id } | Body::RrcComplete { session_id } => p.sid(*session_id),
        Body::XnSetupRequest | Body::XnSetupResponse => {}
        Body::XnConnectionRequest {
            session_id,
            request,
            requested,
            path,
        } => {
            p.sid(*session_id);
            p.request(request);
            p.pdus(requested);
            p.path(path);
        }
        Body::XnConnectionAck { session_id, pdu } => {
            p.sid(*session_id);
            p.pdus(&pdu.requested);
            p.pdus(&pdu.admitted);
            p.pdus(&pdu.not_admitted);
        }
        Body::SessionRelease {
            session_id,
            src_ue,
            dst_ue,
            reason,
        } => {
            p.sid(*session_id);
            p.node(*src_ue);
            p.node(*dst_ue);
            p.u8(*reason as u8);
        }
        Body::MeshTopologyUpdate {
            origin,
            seq,
            a,
            b,
            up,
        } => {
            p.node(*origin);
            p.u32(*seq);
            p.node(*a);
            p.node(*b);
            p.bool(*up);
        }
        Body::MeshAuthRequest { request } => p.request(request),
    }
    let payload = p.0;
    let mut w = Writer(Vec::with_capacity(FRAME_OVERHEAD + payload.len()));
    w.0.extend_from_slice(&MAGIC);
    w.u8(VERSION);
    w.u8(msg.tag() as u8);
    w.u16(payload.len() as u16);
    w.node(msg.header.src);
    w.node(msg.header.dst);
    w.u64(msg.header.sent_at_us);
    w.0.extend_from_slice(&payload);
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).ok_or(CodecError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CodecError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn node(&mut self) -> Result<NodeId, CodecError> {
        self.u32().map(NodeId)
    }
    fn sid(&mut self) -> Result<SessionId, CodecError> {
        self.u32().map(SessionId)
    }
    fn bool(&mut self) -> Result<bool, CodecError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(violated(format!("flag byte {v} is not 0 or 1"))),
        }
    }
    fn qos(&mut self) -> Result<QosProfile, CodecError> {
        let max_latency_us = self.u32()?;
        let reliability_exp = self.u8()?;
        let st = self.u8()?;
        let service_type =
            ServiceType::from_u8(st).ok_or_else(|| violated(format!("service type {st}")))?;
        Ok(QosProfile {
            max_latency_us,
            reliability_exp,
            service_type,
        })
    }
    fn request(&mut self) -> Result<SessionRequest, CodecError> {
        Ok(SessionRequest {
            user_id: self.node()?,
            qos: self.qos()?,
            destination_id: self.node()?,
            channel_quality: self.u8()?,
        })
    }
    fn pdus(&mut self) -> Result<Vec<PduSession>, CodecError> {
        let n = self.u8()?;
        (0..n)
            .map(|_| {
                Ok(PduSession {
                    id: self.u8()?,
                    qos: self.qos()?,
                })
            })
            .collect()
    }
    fn path(&mut self) -> Result<Vec<NodeId>, CodecError> {
        let n = self.u8()?;
        (0..n).map(|_| self.node()).collect()
    }
    fn reason(&mut self) -> Result<RejectReason, CodecError> {
        let v = self.u8()?;
        RejectReason::from_u8(v).ok_or_else(|| violated(format!("reject reason {v}")))
    }
    fn opt_reason(&mut self) -> Result<Option<RejectReason>, CodecError> {
        match self.u8()? {
            0 => Ok(None),
            v => RejectReason::from_u8(v)
                .map(Some)
                .ok_or_else(|| violated(format!("reject reason {v}"))),
        }
    }
    fn outcome(&mut self) -> Result<Result<SessionId, RejectReason>, CodecError> {
        match self.u8()? {
            0 => Ok(Ok(self.sid()?)),
            1 => Ok(Err(self.reason()?)),
            v => Err(violated(format!("outcome byte {v}"))),
        }
    }
    fn config(&mut self) -> Result<SessionConfig, CodecError> {
        Ok(SessionConfig {
            session_id: self.sid()?,
            src_ue: self.node()?,
            dst_ue: self.node()?,
            bearer: BearerConfig {
                bearer_id: self.u16()?,
            },
            path: self.path()?,
            resources: AllocatedResources {
                reserved_sessions: self.u16()?,
                resource_units: self.u16()?,
            },
        })
    }
}

fn decode_body(tag: MessageTag, r: &mut Reader<'_>) -> Result<Body, CodecError> {
    use MessageTag as T;
    Ok(match tag {
        T::RrcSessionRequest => Body::RrcSessionRequest {
            request: r.request()?,
            pdu_sessions: r.pdus()?,
        },
        T::RrcSessionResponse => Body::RrcSessionResponse {
            destination_id: r.node()?,
            result: r.outcome()?,
        },
        T::MeshAuthResponse => Body::MeshAuthResponse {
            destination_id: r.node()?,
            result: r.outcome()?,
        },
        T::GnbNotification => Body::GnbNotification {
            session_id: r.sid()?,
            request: r.request()?,
            path: r.path()?,
        },
        T::MeshScheduleRequest => Body::MeshScheduleRequest {
            session_id: r.sid()?,
            request: r.request()?,
            path: r.path()?,
        },
        T::GnbNotificationResponse => Body::GnbNotificationResponse {
            session_id: r.sid()?,
            accept: r.bool()?,
            reason: r.opt_reason()?,
        },
        T::MeshScheduleResponse => Body::MeshScheduleResponse {
            session_id: r.sid()?,
            accept: r.bool()?,
            reason: r.opt_reason()?,
        },
        T::PathConfiguration => Body::PathConfiguration(r.config()?),
        T::RrcSessionConfig => Body::RrcSessionConfig(r.config()?),
        T::PathComplete => Body::PathComplete {
            session_id: r.sid()?,
        },
        T::RrcComplete => Body::RrcComplete {
            session_id: r.sid()?,
        },
        T::XnSetupRequest => Body::XnSetupRequest,
        T::XnSetupResponse => Body::XnSetupResponse,
        T::XnConnectionRequest => Body::XnConnectionRequest {
            session_id: r.sid()?,
            request: r.request()?,
            requested: r.pdus()?,
            path: r.path()?,
        },
        T::XnConnectionAck => Body::XnConnectionAck {
            session_id: r.sid()?,
            pdu: PduSessionList {
                requested: r.pdus()?,
                admitted: r.pdus()?,
                not_admitted: r.pdus()?,
            },
        },
        T::SessionRelease => Body::SessionRelease {
            session_id: r.sid()?,
            src_ue: r.node()?,
            dst_ue: r.node()?,
            reason: r.reason()?,
        },
        T::MeshTopologyUpdate => Body::MeshTopologyUpdate {
            origin: r.node()?,
            seq: r.u32()?,
            a: r.node()?,
            b: r.node()?,
            up: r.bool()?,
        },
        T::MeshAuthRequest => Body::MeshAuthRequest {
            request: r.request()?,
        },
    })
}

fn check_sid(s: SessionId) -> Result<(), CodecError> {
    if s.is_none() {
        Err(violated("session id 0 is reserved"))
    } else {
        Ok(())
    }
}

fn check_request(r: &SessionRequest) -> Result<(), CodecError> {
    if r.channel_quality > MAX_CHANNEL_QUALITY {
        return Err(violated(format!(
            "channel_quality {} > {MAX_CHANNEL_QUALITY}",
            r.channel_quality
        )));
    }
    if r.user_id == r.destination_id {
        return Err(violated("user_id equals destination_id"));
    }
    check_qos(&r.qos)
}

fn check_qos(q: &QosProfile) -> Result<(), CodecError> {
    if q.is_valid() {
        Ok(())
    } else {
        Err(violated(format!(
            "qos max_latency_us={} reliability_exp={}",
            q.max_latency_us, q.reliability_exp
        )))
    }
}

fn check_pdus(list: &[PduSession]) -> Result<(), CodecError> {
    if list.len() > u8::MAX as usize {
        return Err(violated("more than 255 PDU sessions"));
    }
    for (i, p) in list.iter().enumerate() {
        check_qos(&p.qos)?;
        if list[..i].iter().any(|q| q.id == p.id) {
            return Err(violated(format!("duplicate PDU session id {}", p.id)));
        }
    }
    Ok(())
}

fn check_path(path: &[NodeId]) -> Result<(), CodecError> {
    if path.len() > u8::MAX as usize {
        Err(violated("path longer than 255 hops"))
    } else {
        Ok(())
    }
}

fn check_verdict(accept: bool, reason: Option<RejectReason>) -> Result<(), CodecError> {
    if accept == reason.is_none() {
        Ok(())
    } else {
        Err(violated(
            "reject reason must be present exactly when not accepted",
        ))
    }
}

pub(super) fn validate_body(body: &Body) -> Result<(), CodecError> {
    match body {
        Body::RrcSessionRequest {
            request,
            pdu_sessions,
        } => {
            check_request(request)?;
            check_pdus(pdu_sessions)
        }
        Body::RrcSessionResponse { result, .. } | Body::MeshAuthResponse { result, .. } => {
            match result {
                Ok(s) => check_sid(*s),
                Err(_) => Ok(()),
            }
        }
        Body::GnbNotification {
            session_id,
            request,
            path,
        }
        | Body::MeshScheduleRequest {
            session_id,
            request,
            path,
        } => {
            check_sid(*session_id)?;
            check_request(request)?;
            check_path(path)
        }
        Body::GnbNotificationResponse {
            session_id,
            accept,
            reason,
        }
        | Body::MeshScheduleResponse {
            session_id,
            accept,
            reason,
        } => {
            check_sid(*session_id)?;
            check_verdict(*accept, *reason)
        }
        Body::PathConfiguration(c) | Body::RrcSessionConfig(c) => {
            check_sid(c.session_id)?;
            if c.src_ue == c.dst_ue {
                return Err(violated("config src_ue equals dst_ue"));
            }
            check_path(&c.path)
        }
        Body::PathComplete { session_id } | Body::RrcComplete { session_id } => {
            check_sid(*session_id)
        }
        Body::XnSetupRequest | Body::XnSetupResponse => Ok(()),
        Body::XnConnectionRequest {
            session_id,
            request,
            requested,
            path,
        } => {
            check_sid(*session_id)?;
            check_request(request)?;
            check_pdus(requested)?;
            check_path(path)
        }
        Body::XnConnectionAck { session_id, pdu } => {
            check_sid(*session_id)?;
            check_pdus(&pdu.requested)?;
            if !pdu.is_partition() {
                return Err(violated(
                    "admitted and not_admitted must partition the requested PDU sessions",
                ));
            }
            Ok(())
        }
        Body::SessionRelease {
            session_id,
            src_ue,
            dst_ue,
            ..
        } => {
            check_sid(*session_id)?;
            if src_ue == dst_ue {
                return Err(violated("release src_ue equals dst_ue"));
            }
            Ok(())
        }
        Body::MeshTopologyUpdate { a, b, .. } => {
            if a == b {
                Err(violated("topology update names a self loop"))
            } else {
                Ok(())
            }
        }
        Body::MeshAuthRequest { request } => check_request(request),
    }
}

/// Length of the frame at the start of `bytes`, once the preamble is
/// readable.
fn frame_len(bytes: &[u8]) -> Result<(MessageTag, usize), CodecError> {
    if bytes.len() < 2 {
        return Err(CodecError::Truncated);
    }
    if bytes[..2] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    let version = *bytes.get(2).ok_or(CodecError::Truncated)?;
    if version != VERSION {
        return Err(CodecError::BadVersion(version));
    }
    let raw_tag = *bytes.get(3).ok_or(CodecError::Truncated)?;
    let tag = MessageTag::from_u8(raw_tag).ok_or(CodecError::UnknownTag(raw_tag))?;
    let len_bytes = bytes.get(4..PREAMBLE).ok_or(CodecError::Truncated)?;
    let payload_len = u16::from_be_bytes([len_bytes[0], len_bytes[1]]) as usize;
    Ok((tag, FRAME_OVERHEAD + payload_len))
}

fn decode_frame(frame: &[u8], tag: MessageTag) -> Result<ProtocolMessage, CodecError> {
    let mut r = Reader {
        buf: frame,
        pos: PREAMBLE,
    };
    let header = Header {
        src: r.node()?,
        dst: r.node()?,
        sent_at_us: r.u64()?,
    };
    let body = decode_body(tag, &mut r)?;
    if r.pos != frame.len() {
        return Err(CodecError::TrailingBytes(frame.len() - r.pos));
    }
    validate_body(&body)?;
    Ok(ProtocolMessage { header, body })
}

/// Parses exactly one frame; bytes beyond the declared length are rejected.
pub fn decode(bytes: &[u8]) -> Result<ProtocolMessage, CodecError> {
    let (tag, len) = frame_len(bytes)?;
    if bytes.len() < len {
        return Err(CodecError::Truncated);
    }
    if bytes.len() > len {
        return Err(CodecError::TrailingBytes(bytes.len() - len));
    }
    decode_frame(bytes, tag)
}

/// Iterates over back-to-back frames, as stored in trace files.
pub struct FrameReader<'a> {
    buf: &'a [u8],
    failed: bool,
}

impl<'a> FrameReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        FrameReader { buf, failed: false }
    }
}

impl Iterator for FrameReader<'_> {
    type Item = Result<ProtocolMessage, CodecError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.buf.is_empty() || self.failed {
            return None;
        }
        let res = frame_len(self.buf).and_then(|(tag, len)| {
            let frame = self.buf.get(..len).ok_or(CodecError::Truncated)?;
            let msg = decode_frame(frame, tag)?;
            self.buf = &self.buf[len..];
            Ok(msg)
        });
        self.failed = res.is_err();
        Some(res)
    }
}

pub fn decode_stream(bytes: &[u8]) -> Result<Vec<ProtocolMessage>, CodecError> {
    FrameReader::new(bytes).collect()
}
