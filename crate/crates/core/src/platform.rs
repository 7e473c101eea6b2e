// SPDX-License-Identifier: Apache-2.0

//! Physical address space, the trusted device tree and a sparse byte store.
//!
//! Nothing here enforces policy. `PhysicalMemory` is the raw backing store
//! that the monitor reads and writes after the PMP check has passed.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlatformError {
    #[error("malformed device tree: {0}")]
    Parse(String),
    #[error("device tree nodes {0} and {1} overlap")]
    Overlap(String, String),
    #[error("access [{addr:#x}, +{len}) is outside the physical span")]
    OutOfSpan { addr: u64, len: u64 },
    #[error("invalid range: base {base:#x}, size {size}")]
    InvalidRange { base: u64, size: u64 },
}

/// A physical byte address.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhysAddr(pub u64);

impl PhysAddr {
    pub const fn new(value: u64) -> Self {
        PhysAddr(value)
    }

    pub const fn as_u64(self) -> u64 {
        self.0
    }
}

impl fmt::Display for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl From<u64> for PhysAddr {
    fn from(v: u64) -> Self {
        PhysAddr(v)
    }
}

/// Half-open physical range `[base, base + size)`.
///
/// Construction guarantees `size > 0` and that the end does not overflow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawRange", into = "RawRange")]
pub struct MemRange {
    base: PhysAddr,
    size: u64,
}

#[derive(Serialize, Deserialize)]
struct RawRange {
    base: u64,
    size: u64,
}

impl TryFrom<RawRange> for MemRange {
    type Error = PlatformError;
    fn try_from(r: RawRange) -> Result<Self, Self::Error> {
        MemRange::new(r.base, r.size)
    }
}

impl From<MemRange> for RawRange {
    fn from(r: MemRange) -> Self {
        RawRange { base: r.base.0, size: r.size }
    }
}

impl MemRange {
    pub fn new(base: u64, size: u64) -> Result<Self, PlatformError> {
        if size == 0 || base.checked_add(size).is_none() {
            return Err(PlatformError::InvalidRange { base, size });
        }
        Ok(MemRange { base: PhysAddr(base), size })
    }

    pub fn base(&self) -> PhysAddr {
        self.base
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    /// Exclusive end address.
    pub fn end(&self) -> u64 {
        self.base.0 + self.size
    }

    pub fn contains_addr(&self, addr: u64) -> bool {
        addr >= self.base.0 && addr < self.end()
    }

    /// True iff `[addr, addr + len)` lies entirely inside this range.
    /// A zero-length or overflowing access is never contained.
    pub fn contains_access(&self, addr: u64, len: u64) -> bool {
        match addr.checked_add(len) {
            Some(end) if len > 0 => addr >= self.base.0 && end <= self.end(),
            _ => false,
        }
    }

    pub fn contains_range(&self, other: &MemRange) -> bool {
        other.base.0 >= self.base.0 && other.end() <= self.end()
    }

    /// True iff the access `[addr, addr + len)` shares at least one byte with this range.
    pub fn intersects_access(&self, addr: u64, len: u64) -> bool {
        if len == 0 {
            return false;
        }
        let end = addr.saturating_add(len);
        addr < self.end() && self.base.0 < end
    }

    pub fn overlaps(&self, other: &MemRange) -> bool {
        range_overlaps(self, other)
    }
}

impl fmt::Display for MemRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:#x}, +{:#x})", self.base.0, self.size)
    }
}

/// Whether two half-open ranges share any byte.
pub fn range_overlaps(a: &MemRange, b: &MemRange) -> bool {
    a.base.0 < b.end() && b.base.0 < a.end()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    Cpu,
    Dram,
    BusController,
    MmioPeripheral,
}

impl NodeKind {
    /// Nodes an enclave can be bound to as memory-mapped registers.
    pub fn is_mmio(self) -> bool {
        matches!(self, NodeKind::BusController | NodeKind::MmioPeripheral)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DeviceNode {
    pub name: String,
    pub kind: NodeKind,
    pub range: MemRange,
    pub model: String,
}

#[derive(Deserialize)]
struct DocNode {
    name: String,
    kind: NodeKind,
    base: String,
    size: u64,
    #[serde(default)]
    model: String,
}

#[derive(Deserialize)]
struct DeviceTreeDoc {
    nodes: Vec<DocNode>,
}

/// Trusted catalog of physical ranges. Immutable once loaded: there is no
/// `&mut self` API and the node list is only exposed as a shared slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceTree {
    nodes: Vec<DeviceNode>,
}

pub fn parse_hex_u64(s: &str) -> Result<u64, PlatformError> {
    let t = s.trim();
    let digits = t
        .strip_prefix("0x")
        .or_else(|| t.strip_prefix("0X"))
        .ok_or_else(|| PlatformError::Parse(format!("expected 0x-prefixed hex, got {s:?}")))?;
    let digits: String = digits.chars().filter(|c| *c != '_').collect();
    u64::from_str_radix(&digits, 16).map_err(|e| PlatformError::Parse(format!("bad hex {s:?}: {e}")))
}

/// Parses the JSON device-tree document and checks pairwise disjointness.
pub fn load_device_tree(doc: &str) -> Result<DeviceTree, PlatformError> {
    let doc: DeviceTreeDoc =
        serde_json::from_str(doc).map_err(|e| PlatformError::Parse(e.to_string()))?;
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for n in doc.nodes {
        let base = parse_hex_u64(&n.base)?;
        let range = MemRange::new(base, n.size)
            .map_err(|_| PlatformError::Parse(format!("node {:?} has an invalid range", n.name)))?;
        nodes.push(DeviceNode { name: n.name, kind: n.kind, range, model: n.model });
    }
    DeviceTree::from_nodes(nodes)
}

impl DeviceTree {
    pub fn from_nodes(nodes: Vec<DeviceNode>) -> Result<Self, PlatformError> {
        for (i, a) in nodes.iter().enumerate() {
            for b in &nodes[i + 1..] {
                if a.name == b.name {
                    return Err(PlatformError::Parse(format!("duplicate node name {:?}", a.name)));
                }
                if range_overlaps(&a.range, &b.range) {
                    return Err(PlatformError::Overlap(a.name.clone(), b.name.clone()));
                }
            }
        }
        Ok(DeviceTree { nodes })
    }

    pub fn nodes(&self) -> &[DeviceNode] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&DeviceNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn dram(&self) -> impl Iterator<Item = &DeviceNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Dram)
    }

    /// Smallest range covering every node.
    pub fn span(&self) -> Option<MemRange> {
        let lo = self.nodes.iter().map(|n| n.range.base().0).min()?;
        let hi = self.nodes.iter().map(|n| n.range.end()).max()?;
        MemRange::new(lo, hi - lo).ok()
    }

    pub fn in_dram(&self, r: &MemRange) -> bool {
        self.dram().any(|n| n.range.contains_range(r))
    }
}

/// Sparse byte store. Unwritten bytes read as zero; writing zero removes
/// the entry so a zero-filled range costs nothing.
#[derive(Clone, Debug)]
pub struct PhysicalMemory {
    span: MemRange,
    bytes: BTreeMap<u64, u8>,
}

impl PhysicalMemory {
    pub fn new(span: MemRange) -> Self {
        PhysicalMemory { span, bytes: BTreeMap::new() }
    }

    pub fn span(&self) -> MemRange {
        self.span
    }

    fn check(&self, addr: u64, len: u64) -> Result<(), PlatformError> {
        if len == 0 || self.span.contains_access(addr, len) {
            Ok(())
        } else {
            Err(PlatformError::OutOfSpan { addr, len })
        }
    }

    pub fn raw_read(&self, addr: PhysAddr, len: u64) -> Result<Vec<u8>, PlatformError> {
        self.check(addr.0, len)?;
        let mut out = vec![0u8; len as usize];
        for (a, b) in self.bytes.range(addr.0..addr.0 + len) {
            out[(a - addr.0) as usize] = *b;
        }
        Ok(out)
    }

    pub fn raw_write(&mut self, addr: PhysAddr, data: &[u8]) -> Result<(), PlatformError> {
        self.check(addr.0, data.len() as u64)?;
        for (i, b) in data.iter().enumerate() {
            let a = addr.0 + i as u64;
            if *b == 0 {
                self.bytes.remove(&a);
            } else {
                self.bytes.insert(a, *b);
            }
        }
        Ok(())
    }

    pub fn zero_fill(&mut self, range: &MemRange) {
        let doomed: Vec<u64> = self.bytes.range(range.base().0..range.end()).map(|(a, _)| *a).collect();
        for a in doomed {
            self.bytes.remove(&a);
        }
    }

    /// True iff every byte of `range` is zero.
    pub fn is_zero(&self, range: &MemRange) -> bool {
        self.bytes.range(range.base().0..range.end()).next().is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(base: u64, size: u64) -> MemRange {
        MemRange::new(base, size).unwrap()
    }

    #[test]
    fn single_dram_node() {
        let dt = load_device_tree(
            r#"{"nodes":[{"name":"dram","kind":"dram","base":"0x8000_0000","size":134217728,"model":"ddr"}]}"#,
        )
        .unwrap();
        assert_eq!(dt.nodes().len(), 1);
        assert_eq!(dt.nodes()[0].range, r(0x8000_0000, 128 << 20));
    }

    #[test]
    fn dram_and_spi_are_disjoint() {
        let dt = load_device_tree(
            r#"{"nodes":[
                {"name":"dram","kind":"dram","base":"0x80000000","size":67108864,"model":"ddr"},
                {"name":"spi0","kind":"bus-controller","base":"0x10010000","size":4096,"model":"sifive,spi0"}]}"#,
        )
        .unwrap();
        assert_eq!(dt.nodes().len(), 2);
        let (a, b) = (dt.nodes()[0].range, dt.nodes()[1].range);
        // interval arithmetic: one ends before the other starts
        assert!(b.end() <= a.base().0 || a.end() <= b.base().0);
    }

    #[test]
    fn identical_bases_overlap() {
        let err = load_device_tree(
            r#"{"nodes":[
                {"name":"a","kind":"mmio-peripheral","base":"0x10000000","size":16,"model":"x"},
                {"name":"b","kind":"mmio-peripheral","base":"0x10000000","size":32,"model":"y"}]}"#,
        )
        .unwrap_err();
        assert_eq!(err, PlatformError::Overlap("a".into(), "b".into()));
    }

    #[test]
    fn malformed_documents() {
        assert!(matches!(load_device_tree("{"), Err(PlatformError::Parse(_))));
        assert!(matches!(
            load_device_tree(r#"{"nodes":[{"name":"a","kind":"dram","base":"1000","size":16}]}"#),
            Err(PlatformError::Parse(_))
        ));
        assert!(matches!(
            load_device_tree(r#"{"nodes":[{"name":"a","kind":"dram","base":"0x1000","size":0}]}"#),
            Err(PlatformError::Parse(_))
        ));
        assert!(matches!(
            load_device_tree(r#"{"nodes":[{"name":"a","kind":"gpu","base":"0x1000","size":4}]}"#),
            Err(PlatformError::Parse(_))
        ));
    }

    #[test]
    fn overlap_examples() {
        assert!(!range_overlaps(&r(0x1000, 0x100), &r(0x1100, 0x100)));
        assert!(range_overlaps(&r(0x1000, 0x200), &r(0x1100, 0x100)));
    }

    #[test]
    fn range_rejects_empty_and_overflow() {
        assert!(MemRange::new(0, 0).is_err());
        assert!(MemRange::new(u64::MAX, 1).is_err());
        assert!(MemRange::new(u64::MAX - 1, 1).is_ok());
    }

    #[test]
    fn memory_defaults_and_round_trip() {
        let mut m = PhysicalMemory::new(r(0x8000_0000, 0x1000));
        assert_eq!(m.raw_read(PhysAddr(0x8000_0100), 4).unwrap(), vec![0; 4]);
        m.raw_write(PhysAddr(0x8000_0000), &[0xAB]).unwrap();
        assert_eq!(m.raw_read(PhysAddr(0x8000_0000), 1).unwrap(), vec![0xAB]);
        assert!(matches!(
            m.raw_read(PhysAddr(0x8000_1000 + 1), 1),
            Err(PlatformError::OutOfSpan { .. })
        ));
        assert!(m.raw_read(PhysAddr(0x8000_0fff), 2).is_err());
        m.zero_fill(&r(0x8000_0000, 16));
        assert!(m.is_zero(&r(0x8000_0000, 0x1000)));
    }
}
