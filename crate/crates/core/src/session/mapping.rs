use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::protocol::{QosProfile, SessionId};
use crate::topology::NodeId;

/// Forwarding state a gNB installs for one side of a peer-to-peer session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingTableEntry {
    pub session_id: SessionId,
    pub local_ue: NodeId,
    pub peer_gnb: NodeId,
    pub peer_ue: NodeId,
    pub bearer_id: u16,
    /// Adjacent node toward the peer gNB.
    pub next_hop: NodeId,
    pub qos: QosProfile,
    /// Full UE-to-UE route, source UE first.
    pub path: Vec<NodeId>,
    /// Set once the local UE confirmed its configuration.
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("mapping for session {session_id} at UE {local_ue} already points to {existing_peer}, not {new_peer}")]
pub struct InconsistentEntry {
    pub session_id: SessionId,
    pub local_ue: NodeId,
    pub existing_peer: NodeId,
    pub new_peer: NodeId,
}

/// Per-gNB table keyed by `(session_id, local_ue)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MappingTable {
    entries: BTreeMap<(SessionId, NodeId), MappingTableEntry>,
}

impl MappingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, session_id: SessionId, local_ue: NodeId) -> Option<&MappingTableEntry> {
        self.entries.get(&(session_id, local_ue))
    }

    pub(crate) fn get_mut(
        &mut self,
        session_id: SessionId,
        local_ue: NodeId,
    ) -> Option<&mut MappingTableEntry> {
        self.entries.get_mut(&(session_id, local_ue))
    }

    pub fn entries(&self) -> impl Iterator<Item = &MappingTableEntry> {
        self.entries.values()
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = &mut MappingTableEntry> {
        self.entries.values_mut()
    }

    /// Inserts or replaces the entry for its key. Replacing is refused when
    /// the existing row names a different peer.
    pub fn upsert(&mut self, entry: MappingTableEntry) -> Result<(), InconsistentEntry> {
        let key = (entry.session_id, entry.local_ue);
        if let Some(old) = self.entries.get(&key) {
            if old.peer_gnb != entry.peer_gnb || old.peer_ue != entry.peer_ue {
                return Err(InconsistentEntry {
                    session_id: entry.session_id,
                    local_ue: entry.local_ue,
                    existing_peer: old.peer_gnb,
                    new_peer: entry.peer_gnb,
                });
            }
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    pub fn remove(&mut self, session_id: SessionId, local_ue: NodeId) -> Option<MappingTableEntry> {
        self.entries.remove(&(session_id, local_ue))
    }
}

/// Functional form of [`MappingTable::upsert`].
pub fn mapping_table_update(
    table: &MappingTable,
    entry: MappingTableEntry,
) -> Result<MappingTable, InconsistentEntry> {
    let mut t = table.clone();
    t.upsert(entry)?;
    Ok(t)
}

/// A user-plane packet between two UEs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub session_id: SessionId,
    pub seq_no: u64,
    pub size_bytes: u32,
    pub created_at_us: u64,
    pub src_ue: NodeId,
    pub dst_ue: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DropReason {
    NoMapping,
    SessionNotActive,
    /// The sending UE had no active session at generation time.
    NotEstablished,
    /// No usable route from the forwarding node.
    NoRoute,
    /// Random loss on a link.
    LinkLoss,
    /// The link failed before or while the frame crossed it.
    LinkDown,
    NodeDown,
    /// Still in flight when the run ended.
    Horizon,
}

impl DropReason {
    pub const ALL: [DropReason; 8] = [
        DropReason::NoMapping,
        DropReason::SessionNotActive,
        DropReason::NotEstablished,
        DropReason::NoRoute,
        DropReason::LinkLoss,
        DropReason::LinkDown,
        DropReason::NodeDown,
        DropReason::Horizon,
    ];
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Usage counters for one session at one gNB.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DtfCounters {
    pub packets_forwarded: u64,
    pub bytes_forwarded: u64,
    pub qos_violations: u64,
}

impl DtfCounters {
    pub fn add(&mut self, d: &DtfCounters) {
        self.packets_forwarded += d.packets_forwarded;
        self.bytes_forwarded += d.bytes_forwarded;
        self.qos_violations += d.qos_violations;
    }
}

/// Per-session DTF usage at one gNB, keyed like the mapping table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DtfAccounting {
    counters: BTreeMap<(SessionId, NodeId), DtfCounters>,
}

impl DtfAccounting {
    pub fn get(&self, session_id: SessionId, local_ue: NodeId) -> DtfCounters {
        self.counters
            .get(&(session_id, local_ue))
            .copied()
            .unwrap_or_default()
    }

    pub fn apply(&mut self, d: &DtfDecision) {
        self.counters
            .entry((d.session_id, d.local_ue))
            .or_default()
            .add(&d.delta);
    }

    pub fn total(&self) -> DtfCounters {
        let mut t = DtfCounters::default();
        for c in self.counters.values() {
            t.add(c);
        }
        t
    }
}

/// Result of a successful DTF lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DtfDecision {
    pub next_hop: NodeId,
    pub session_id: SessionId,
    pub local_ue: NodeId,
    /// True at the gNB serving the sender, false at the receiver's gNB.
    pub outbound: bool,
    pub delta: DtfCounters,
}

/// Looks up where `packet` goes next. The sender's gNB forwards toward the
/// peer; the receiver's gNB hands the packet to its UE.
pub fn dtf_forward(
    table: &MappingTable,
    packet: &Packet,
    now_us: u64,
) -> Result<DtfDecision, DropReason> {
    let (entry, outbound) = match table.get(packet.session_id, packet.src_ue) {
        Some(e) if e.peer_ue == packet.dst_ue => (e, true),
        _ => match table.get(packet.session_id, packet.dst_ue) {
            Some(e) if e.peer_ue == packet.src_ue => (e, false),
            _ => return Err(DropReason::NoMapping),
        },
    };
    if !entry.active {
        return Err(DropReason::SessionNotActive);
    }
    let age = now_us.saturating_sub(packet.created_at_us);
    Ok(DtfDecision {
        next_hop: if outbound {
            entry.next_hop
        } else {
            entry.local_ue
        },
        session_id: entry.session_id,
        local_ue: entry.local_ue,
        outbound,
        delta: DtfCounters {
            packets_forwarded: 1,
            bytes_forwarded: packet.size_bytes as u64,
            qos_violations: (age > entry.qos.max_latency_us as u64) as u64,
        },
    })
}
