// SPDX-License-Identifier: Apache-2.0

//! Physical memory protection: an ordered table of range policies.
//!
//! Matching follows the RISC-V convention. The lowest-index entry that
//! touches any byte of the access decides. The access must then be fully
//! contained in that entry and the entry must grant the access kind.
//! Machine mode bypasses the table. Supervisor and user accesses that match
//! nothing are denied.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::platform::{MemRange, PhysAddr};

pub const DEFAULT_MAX_ENTRIES: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PmpError {
    #[error("no free PMP entry")]
    NoFreeEntry,
    #[error("PMP entries can only be modified from machine mode")]
    NotMachineMode,
    #[error("unsupported PMP entry count {0} (expected 8 or 16)")]
    UnsupportedSize(usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl Perms {
    pub const NONE: Perms = Perms { read: false, write: false, execute: false };
    pub const RW: Perms = Perms { read: true, write: true, execute: false };
    pub const RWX: Perms = Perms { read: true, write: true, execute: true };

    pub fn grants(self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.read,
            AccessKind::Write => self.write,
            AccessKind::Execute => self.execute,
        }
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |b, c| if b { c } else { '-' };
        write!(f, "{}{}{}", flag(self.read, 'r'), flag(self.write, 'w'), flag(self.execute, 'x'))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
    Execute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Privilege {
    Machine,
    Supervisor,
    User,
}

/// Owner label of an entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum EntryTag {
    Sm,
    OsBackground,
    Enclave(u32),
    Region(u32),
}

impl fmt::Display for EntryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntryTag::Sm => write!(f, "SM"),
            EntryTag::OsBackground => write!(f, "OS-background"),
            EntryTag::Enclave(id) => write!(f, "enclave{id}"),
            EntryTag::Region(id) => write!(f, "region{id}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PmpEntry {
    pub index: usize,
    pub range: MemRange,
    pub perms: Perms,
    pub tag: EntryTag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Decision {
    Allow,
    /// Deny with the deciding entry, or `None` when nothing matched.
    Deny(Option<usize>),
}

impl Decision {
    pub fn is_allow(self) -> bool {
        matches!(self, Decision::Allow)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AuditOp {
    Install(usize),
    Clear(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AuditRecord {
    pub privilege: Privilege,
    pub op: AuditOp,
}

#[derive(Clone, Debug)]
pub struct PmpConfig {
    max_entries: usize,
    entries: BTreeMap<usize, PmpEntry>,
    audit: Vec<AuditRecord>,
}

impl Default for PmpConfig {
    fn default() -> Self {
        PmpConfig { max_entries: DEFAULT_MAX_ENTRIES, entries: BTreeMap::new(), audit: Vec::new() }
    }
}

impl PmpConfig {
    pub fn new(max_entries: usize) -> Result<Self, PmpError> {
        if max_entries != 8 && max_entries != 16 {
            return Err(PmpError::UnsupportedSize(max_entries));
        }
        Ok(PmpConfig { max_entries, ..Default::default() })
    }

    pub fn max_entries(&self) -> usize {
        self.max_entries
    }

    pub fn entries(&self) -> impl Iterator<Item = &PmpEntry> {
        self.entries.values()
    }

    pub fn entry(&self, index: usize) -> Option<&PmpEntry> {
        self.entries.get(&index)
    }

    pub fn audit_log(&self) -> &[AuditRecord] {
        &self.audit
    }

    pub fn free_entry_count(&self) -> usize {
        self.max_entries - self.entries.len()
    }

    /// Lowest unused index in `[lo, hi)`.
    pub fn first_free_index(&self, lo: usize, hi: usize) -> Option<usize> {
        (lo..hi.min(self.max_entries)).find(|i| !self.entries.contains_key(i))
    }

    /// Installs `entry` at `entry.index`. Overwriting an index is allowed only
    /// when the existing entry carries the same tag.
    pub fn install_entry(&mut self, privilege: Privilege, entry: PmpEntry) -> Result<(), PmpError> {
        if privilege != Privilege::Machine {
            return Err(PmpError::NotMachineMode);
        }
        if entry.index >= self.max_entries {
            return Err(PmpError::NoFreeEntry);
        }
        if let Some(old) = self.entries.get(&entry.index) {
            if old.tag != entry.tag {
                return Err(PmpError::NoFreeEntry);
            }
        }
        self.entries.insert(entry.index, entry);
        self.audit.push(AuditRecord { privilege, op: AuditOp::Install(entry.index) });
        Ok(())
    }

    /// Clearing an empty index succeeds and changes nothing.
    pub fn clear_entry(&mut self, privilege: Privilege, index: usize) -> Result<(), PmpError> {
        if privilege != Privilege::Machine {
            return Err(PmpError::NotMachineMode);
        }
        self.entries.remove(&index);
        self.audit.push(AuditRecord { privilege, op: AuditOp::Clear(index) });
        Ok(())
    }

    /// Rewrites the permissions of an installed entry.
    pub fn set_perms(&mut self, privilege: Privilege, index: usize, perms: Perms) -> Result<(), PmpError> {
        let mut e = *self.entries.get(&index).ok_or(PmpError::NoFreeEntry)?;
        e.perms = perms;
        self.install_entry(privilege, e)
    }

    pub fn check_access(&self, privilege: Privilege, addr: PhysAddr, len: u64, kind: AccessKind) -> Decision {
        check_access(self, privilege, addr, len, kind)
    }
}

pub fn check_access(
    cfg: &PmpConfig,
    privilege: Privilege,
    addr: PhysAddr,
    len: u64,
    kind: AccessKind,
) -> Decision {
    if privilege == Privilege::Machine {
        return Decision::Allow;
    }
    // BTreeMap iterates in index order, so the first hit has the highest priority.
    match cfg.entries.values().find(|e| e.range.intersects_access(addr.0, len)) {
        Some(e) if e.range.contains_access(addr.0, len) && e.perms.grants(kind) => Decision::Allow,
        Some(e) => Decision::Deny(Some(e.index)),
        None => Decision::Deny(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(base: u64, size: u64) -> MemRange {
        MemRange::new(base, size).unwrap()
    }

    fn enclave_cfg(perms: Perms) -> PmpConfig {
        let mut cfg = PmpConfig::default();
        cfg.install_entry(
            Privilege::Machine,
            PmpEntry { index: 0, range: r(0x8020_0000, 2 << 20), perms, tag: EntryTag::Enclave(1) },
        )
        .unwrap();
        cfg
    }

    #[test]
    fn machine_bypasses_empty_table() {
        let cfg = PmpConfig::default();
        for kind in [AccessKind::Read, AccessKind::Write, AccessKind::Execute] {
            assert_eq!(cfg.check_access(Privilege::Machine, PhysAddr(0xdead_beef), 8, kind), Decision::Allow);
        }
    }

    #[test]
    fn contained_granted_access() {
        let cfg = enclave_cfg(Perms::RW);
        assert_eq!(
            cfg.check_access(Privilege::User, PhysAddr(0x8020_0010), 4, AccessKind::Read),
            Decision::Allow
        );
    }

    #[test]
    fn os_context_no_access() {
        let cfg = enclave_cfg(Perms::NONE);
        assert_eq!(
            cfg.check_access(Privilege::Supervisor, PhysAddr(0x8020_0010), 4, AccessKind::Write),
            Decision::Deny(Some(0))
        );
    }

    #[test]
    fn straddling_access_denied_by_deciding_entry() {
        let cfg = enclave_cfg(Perms::RWX);
        let end = 0x8020_0000 + (2 << 20);
        assert_eq!(
            cfg.check_access(Privilege::User, PhysAddr(end - 2), 4, AccessKind::Read),
            Decision::Deny(Some(0))
        );
    }

    #[test]
    fn no_match_denies() {
        let cfg = enclave_cfg(Perms::RWX);
        assert_eq!(cfg.check_access(Privilege::User, PhysAddr(0x100), 1, AccessKind::Read), Decision::Deny(None));
    }

    #[test]
    fn lowest_index_wins() {
        let mut cfg = PmpConfig::default();
        cfg.install_entry(Privilege::Machine, PmpEntry { index: 3, range: r(0, 0x1000), perms: Perms::RWX, tag: EntryTag::OsBackground })
            .unwrap();
        cfg.install_entry(Privilege::Machine, PmpEntry { index: 1, range: r(0x100, 0x100), perms: Perms::NONE, tag: EntryTag::Sm })
            .unwrap();
        assert_eq!(cfg.check_access(Privilege::Supervisor, PhysAddr(0x180), 1, AccessKind::Read), Decision::Deny(Some(1)));
        assert_eq!(cfg.check_access(Privilege::Supervisor, PhysAddr(0x280), 1, AccessKind::Read), Decision::Allow);
    }

    #[test]
    fn sixteen_fit_seventeenth_does_not() {
        let mut cfg = PmpConfig::default();
        for i in 0..16 {
            cfg.install_entry(
                Privilege::Machine,
                PmpEntry { index: i, range: r(i as u64 * 0x1000, 0x1000), perms: Perms::RW, tag: EntryTag::Region(i as u32) },
            )
            .unwrap();
        }
        assert_eq!(cfg.free_entry_count(), 0);
        let extra = PmpEntry { index: 16, range: r(0x10_0000, 0x1000), perms: Perms::RW, tag: EntryTag::Region(99) };
        assert_eq!(cfg.install_entry(Privilege::Machine, extra), Err(PmpError::NoFreeEntry));
        let clash = PmpEntry { index: 4, ..extra };
        assert_eq!(cfg.install_entry(Privilege::Machine, clash), Err(PmpError::NoFreeEntry));
    }

    #[test]
    fn clear_empty_is_noop() {
        let mut cfg = PmpConfig::default();
        cfg.clear_entry(Privilege::Machine, 5).unwrap();
        assert_eq!(cfg.free_entry_count(), 16);
    }

    #[test]
    fn supervisor_cannot_mutate() {
        let mut cfg = PmpConfig::default();
        let e = PmpEntry { index: 0, range: r(0, 16), perms: Perms::RW, tag: EntryTag::Sm };
        assert_eq!(cfg.install_entry(Privilege::Supervisor, e), Err(PmpError::NotMachineMode));
        assert_eq!(cfg.clear_entry(Privilege::User, 0), Err(PmpError::NotMachineMode));
        assert!(cfg.audit_log().is_empty());
    }

    #[test]
    fn only_8_or_16() {
        assert!(PmpConfig::new(8).is_ok());
        assert_eq!(PmpConfig::new(12).unwrap_err(), PmpError::UnsupportedSize(12));
    }
}
