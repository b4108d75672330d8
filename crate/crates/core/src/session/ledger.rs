use serde::{Deserialize, Serialize};

use crate::protocol::{PduSession, PduSessionList};

/// Session-slot accounting for one node. `allocated` never exceeds
/// `capacity_sessions`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceLedger {
    capacity_sessions: u32,
    allocated: u32,
}

impl ResourceLedger {
    pub fn new(capacity_sessions: u32) -> Self {
        ResourceLedger {
            capacity_sessions,
            allocated: 0,
        }
    }

    pub fn capacity(&self) -> u32 {
        self.capacity_sessions
    }

    pub fn allocated(&self) -> u32 {
        self.allocated
    }

    pub fn available(&self) -> u32 {
        self.capacity_sessions - self.allocated
    }

    /// Takes `n` slots if all of them fit.
    pub fn try_allocate(&mut self, n: u32) -> bool {
        if n <= self.available() {
            self.allocated += n;
            true
        } else {
            false
        }
    }

    /// Returns `n` slots. Releasing more than is held clamps at zero and
    /// reports the shortfall.
    pub fn release(&mut self, n: u32) -> u32 {
        let freed = n.min(self.allocated);
        self.allocated -= freed;
        n - freed
    }
}

/// Greedy admission in list order: each request takes one slot while any
/// remain.
pub fn admission_control(ledger: &mut ResourceLedger, requested: &[PduSession]) -> PduSessionList {
    let mut list = PduSessionList {
        requested: requested.to_vec(),
        ..Default::default()
    };
    for p in requested {
        if ledger.try_allocate(1) {
            list.admitted.push(*p);
        } else {
            list.not_admitted.push(*p);
        }
    }
    list
}
