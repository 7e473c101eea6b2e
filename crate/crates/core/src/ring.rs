// SPDX-License-Identifier: Apache-2.0

//! Single-producer/single-consumer message rings laid out inside a shared
//! region.
//!
//! A region is split into two equal halves. The lower half carries traffic
//! from the region's initiator (the enclave that asked for the connection,
//! or the controller enclave for a peripheral link); the upper half carries
//! replies. Each half is one ring:
//!
//! ```text
//! +0   head  u64 LE   records consumed so far
//! +8   tail  u64 LE   records produced so far
//! +16  slot[0], slot[1], ... slot[capacity - 1]
//! ```
//!
//! A slot holds `u32 LE length || bytes`, zero-padded to `slot_size`.
//! `head == tail` means empty; `tail - head == capacity` means full. A
//! freshly zero-filled region is therefore two empty rings.

use thiserror::Error;

use crate::platform::{MemRange, PhysAddr};

pub const HEADER_LEN: u64 = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RingError {
    #[error("memory access fault at {addr:#x} (+{len})")]
    Fault { addr: u64, len: u64 },
    #[error("ring is full")]
    Full,
    #[error("record of {0} bytes does not fit a slot")]
    TooLarge(usize),
    #[error("ring header or slot is corrupt")]
    Corrupt,
    #[error("region too small for a ring")]
    TooSmall,
}

/// Accessor through which one party touches shared memory. Implementations
/// enforce that party's access rights.
pub trait MemPort {
    fn read(&mut self, addr: PhysAddr, len: u64) -> Result<Vec<u8>, RingError>;
    fn write(&mut self, addr: PhysAddr, data: &[u8]) -> Result<(), RingError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ring {
    base: u64,
    slot_size: u64,
    capacity: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Initiator to responder.
    Down,
    /// Responder to initiator.
    Up,
}

impl Ring {
    pub fn in_region(region: &MemRange, dir: Direction, slot_size: u64) -> Result<Ring, RingError> {
        let half = region.size() / 2;
        if half < HEADER_LEN + slot_size || slot_size <= 4 {
            return Err(RingError::TooSmall);
        }
        let base = match dir {
            Direction::Down => region.base().0,
            Direction::Up => region.base().0 + half,
        };
        Ok(Ring { base, slot_size, capacity: (half - HEADER_LEN) / slot_size })
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn max_record(&self) -> usize {
        (self.slot_size - 4) as usize
    }

    fn indices(&self, port: &mut dyn MemPort) -> Result<(u64, u64), RingError> {
        let h = port.read(PhysAddr(self.base), HEADER_LEN)?;
        let head = u64::from_le_bytes(h[0..8].try_into().unwrap());
        let tail = u64::from_le_bytes(h[8..16].try_into().unwrap());
        if tail < head || tail - head > self.capacity {
            return Err(RingError::Corrupt);
        }
        Ok((head, tail))
    }

    fn slot_addr(&self, counter: u64) -> PhysAddr {
        PhysAddr(self.base + HEADER_LEN + (counter % self.capacity) * self.slot_size)
    }

    pub fn push(&self, port: &mut dyn MemPort, record: &[u8]) -> Result<(), RingError> {
        if record.len() > self.max_record() {
            return Err(RingError::TooLarge(record.len()));
        }
        let (head, tail) = self.indices(port)?;
        if tail - head == self.capacity {
            return Err(RingError::Full);
        }
        let mut slot = vec![0u8; self.slot_size as usize];
        slot[..4].copy_from_slice(&(record.len() as u32).to_le_bytes());
        slot[4..4 + record.len()].copy_from_slice(record);
        port.write(self.slot_addr(tail), &slot)?;
        port.write(PhysAddr(self.base + 8), &(tail + 1).to_le_bytes())
    }

    /// Pops the oldest record, or `None` on a poll miss.
    pub fn pop(&self, port: &mut dyn MemPort) -> Result<Option<Vec<u8>>, RingError> {
        let (head, tail) = self.indices(port)?;
        if head == tail {
            return Ok(None);
        }
        let slot = port.read(self.slot_addr(head), self.slot_size)?;
        let len = u32::from_le_bytes(slot[..4].try_into().unwrap()) as usize;
        if len > self.max_record() {
            return Err(RingError::Corrupt);
        }
        port.write(PhysAddr(self.base), &(head + 1).to_le_bytes())?;
        Ok(Some(slot[4..4 + len].to_vec()))
    }

    pub fn len(&self, port: &mut dyn MemPort) -> Result<u64, RingError> {
        let (head, tail) = self.indices(port)?;
        Ok(tail - head)
    }

    pub fn is_empty(&self, port: &mut dyn MemPort) -> Result<bool, RingError> {
        Ok(self.len(port)? == 0)
    }
}
