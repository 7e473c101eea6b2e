// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use serde::{Serialize, Serializer};

/// Anything that can be a party to a shared region or the subject of a
/// notification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityId {
    Os,
    Enclave(u32),
    Peripheral(u32),
}

impl EntityId {
    pub const WIRE_LEN: usize = 5;

    /// One tag byte followed by the id as big-endian u32.
    pub fn to_wire(self) -> [u8; 5] {
        let (tag, id) = match self {
            EntityId::Os => (0u8, 0u32),
            EntityId::Enclave(id) => (1, id),
            EntityId::Peripheral(id) => (2, id),
        };
        let mut out = [0u8; 5];
        out[0] = tag;
        out[1..].copy_from_slice(&id.to_be_bytes());
        out
    }

    pub fn from_wire(b: &[u8]) -> Option<Self> {
        if b.len() != 5 {
            return None;
        }
        let id = u32::from_be_bytes([b[1], b[2], b[3], b[4]]);
        match (b[0], id) {
            (0, 0) => Some(EntityId::Os),
            (1, id) => Some(EntityId::Enclave(id)),
            (2, id) => Some(EntityId::Peripheral(id)),
            _ => None,
        }
    }

    pub fn enclave_id(self) -> Option<u32> {
        match self {
            EntityId::Enclave(id) => Some(id),
            _ => None,
        }
    }

    pub fn is_enclave(self) -> bool {
        matches!(self, EntityId::Enclave(_))
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntityId::Os => write!(f, "OS"),
            EntityId::Enclave(id) => write!(f, "E{id}"),
            EntityId::Peripheral(id) => write!(f, "P{id}"),
        }
    }
}

impl Serialize for EntityId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct RegionId(pub u32);

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", self.0)
    }
}
