// SPDX-License-Identifier: Apache-2.0

//! The security monitor.
//!
//! PMP layout:
//!
//! | index            | owner                                         |
//! |------------------|-----------------------------------------------|
//! | 0                | monitor memory, no S/U access                 |
//! | 1 ..= max - 2    | one entry per live enclave or non-freed region |
//! | max - 1          | OS background, the whole physical span         |
//!
//! Lower indices win, so the background entry only decides for addresses
//! that no enclave or region covers. Every context switch rewrites the
//! permissions: the running enclave gets RWX on its private range and RW on
//! the regions it holds; everything else is closed. The background entry is
//! open only while the OS runs.
//!
//! Invariant: the number of installed entries is always
//! `2 + live enclaves + non-freed regions`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::attestation::{config_digest, measure, AttestationReport, Measurement, PeripheralEvidence, ReportBody, SubjectKind};
use crate::crypto::{CryptoProvider, Digest, KeyPair, PublicKey};
use crate::entity::{EntityId, RegionId};
use crate::peripherals::frame::{Frame, FrameType, Reassembler};
use crate::peripherals::model::{dma_config_body, parse_dma_config, Binding, Peripheral, PeripheralError, PeripheralKind};
use crate::platform::{DeviceTree, MemRange, PhysAddr, PhysicalMemory};
use crate::pmp::{AccessKind, Decision, EntryTag, PmpConfig, PmpEntry, PmpError, Perms, Privilege};
use crate::ring::{MemPort, RingError};
use crate::trace::{self, range_json, Trace};

/// Size of the monitor's own memory at the bottom of the first DRAM node.
pub const SM_SIZE: u64 = 0x20_0000;

const SM_ACTOR: &str = "SM";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MonitorError {
    #[error("range overlaps {0}")]
    Overlap(String),
    #[error("range is already shared by region {0}")]
    ThirdParty(RegionId),
    #[error("no free PMP entry")]
    NoFreeEntry,
    #[error("{0} must be synchronously disconnected first")]
    MustSyncDisconnectFirst(EntityId),
    #[error("unknown enclave {0}")]
    UnknownEnclave(u32),
    #[error("unknown peripheral {0}")]
    UnknownPeripheral(u32),
    #[error("unknown region {0}")]
    UnknownRegion(RegionId),
    #[error("{0}")]
    BadState(String),
    #[error("region {0} is in the wrong state for this operation")]
    BadRegionState(RegionId),
    #[error("access fault: {who} {kind:?} [{addr:#x}, +{len})")]
    AccessFault { who: EntityId, addr: u64, len: u64, kind: AccessKind },
    #[error("invalid party: {0}")]
    InvalidParty(String),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("range does not match the device-tree node of {0}")]
    NotInDeviceTree(EntityId),
    #[error("DMA range of {0} has not been verified for this enclave")]
    DmaNotVerified(EntityId),
    #[error("peripheral reported {reported:#x}+{reported_size}, OS claimed {claimed:#x}+{claimed_size}")]
    Mismatch { claimed: u64, claimed_size: u64, reported: u64, reported_size: u64 },
    #[error("signature does not verify under the certified key")]
    SignatureInvalid,
    #[error("peripheral is not DMA capable")]
    NotDmaCapable,
    #[error("peripheral {0} is unplugged")]
    Unplugged(EntityId),
    #[error("out of the physical span")]
    OutOfSpan,
    #[error(transparent)]
    Peripheral(#[from] PeripheralError),
}

impl MonitorError {
    /// Stable name used by traces and scenario assertions.
    pub fn kind(&self) -> &'static str {
        match self {
            MonitorError::Overlap(_) => "OverlapError",
            MonitorError::ThirdParty(_) => "ThirdParty",
            MonitorError::NoFreeEntry => "NoFreeEntry",
            MonitorError::MustSyncDisconnectFirst(_) => "MustSyncDisconnectFirst",
            MonitorError::UnknownEnclave(_) => "UnknownEnclave",
            MonitorError::UnknownPeripheral(_) => "UnknownPeripheral",
            MonitorError::UnknownRegion(_) => "UnknownRegion",
            MonitorError::BadState(_) => "BadState",
            MonitorError::BadRegionState(_) => "BadRegionState",
            MonitorError::AccessFault { .. } => "AccessFault",
            MonitorError::InvalidParty(_) => "InvalidParty",
            MonitorError::InvalidRange(_) => "InvalidRange",
            MonitorError::NotInDeviceTree(_) => "NotInDeviceTree",
            MonitorError::DmaNotVerified(_) => "DmaNotVerified",
            MonitorError::Mismatch { .. } => "Mismatch",
            MonitorError::SignatureInvalid => "SignatureInvalid",
            MonitorError::NotDmaCapable => "NotDmaCapable",
            MonitorError::Unplugged(_) => "Unplugged",
            MonitorError::OutOfSpan => "OutOfSpan",
            MonitorError::Peripheral(PeripheralError::NotDmaCapable) => "NotDmaCapable",
            MonitorError::Peripheral(_) => "PeripheralError",
        }
    }
}

impl From<PmpError> for MonitorError {
    fn from(e: PmpError) -> Self {
        match e {
            PmpError::NoFreeEntry => MonitorError::NoFreeEntry,
            other => MonitorError::BadState(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdPolicy {
    /// Never hand out an identifier twice.
    #[default]
    Monotonic,
    /// Hand out the smallest identifier not held by a live enclave.
    Reuse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnclaveKind {
    #[serde(alias = "ae")]
    Application,
    #[serde(alias = "ce")]
    Controller,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum EnclaveState {
    Idle,
    Running,
    Paused,
    Destroyed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum NotificationKind {
    PeerDestroyed,
    SyncDisconnected,
    PeripheralReattached,
    PeripheralFirmwareChanged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Notification {
    pub kind: NotificationKind,
    pub region: RegionId,
    pub peer: EntityId,
}

#[derive(Clone, Debug)]
pub struct EnclaveDescriptor {
    pub id: u32,
    pub kind: EnclaveKind,
    pub state: EnclaveState,
    pub private_range: MemRange,
    pub measurement: Measurement,
    pub config_digest: Digest,
    /// `(peer, region)` for every region in `Shared` status with this enclave.
    pub connections: BTreeSet<(EntityId, RegionId)>,
    pub pending: VecDeque<Notification>,
    pub delivered: VecDeque<Notification>,
    pmp_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RegionStatus {
    Shared(EntityId, EntityId),
    /// The owner survived `former`; contents are kept until the OS
    /// synchronously disconnects.
    SoleOwned { owner: EntityId, former: EntityId },
    Freed,
}

#[derive(Clone, Debug)]
pub struct SharedRegion {
    pub id: RegionId,
    pub range: MemRange,
    pub status: RegionStatus,
    pmp_index: Option<usize>,
}

impl SharedRegion {
    pub fn is_live(&self) -> bool {
        self.status != RegionStatus::Freed
    }

    pub fn parties(&self) -> Vec<EntityId> {
        match self.status {
            RegionStatus::Shared(a, b) => vec![a, b],
            RegionStatus::SoleOwned { owner, .. } => vec![owner],
            RegionStatus::Freed => vec![],
        }
    }

    pub fn accessible_by(&self, who: EntityId) -> bool {
        self.parties().contains(&who)
    }

    pub fn peer_of(&self, who: EntityId) -> Option<EntityId> {
        match self.status {
            RegionStatus::Shared(a, b) if a == who => Some(b),
            RegionStatus::Shared(a, b) if b == who => Some(a),
            RegionStatus::SoleOwned { owner, former } if owner == who => Some(former),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PeripheralSlot {
    pub model: Peripheral,
    pub plugged: bool,
    /// Controller enclave of the most recent binding.
    pub controller: Option<u32>,
}

#[derive(Clone, Debug)]
pub struct MonitorConfig {
    pub max_entries: usize,
    pub id_policy: IdPolicy,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig { max_entries: crate::pmp::DEFAULT_MAX_ENTRIES, id_policy: IdPolicy::Monotonic }
    }
}

pub struct SecurityMonitor {
    tree: DeviceTree,
    memory: PhysicalMemory,
    pmp: PmpConfig,
    sm_range: MemRange,
    enclaves: BTreeMap<u32, EnclaveDescriptor>,
    regions: BTreeMap<RegionId, SharedRegion>,
    next_region: u32,
    peripherals: BTreeMap<u32, PeripheralSlot>,
    dma_verified: BTreeMap<u32, (u32, MemRange)>,
    context: EntityId,
    id_policy: IdPolicy,
    next_enclave_id: u32,
    sm_measurement: Measurement,
    platform_keys: KeyPair,
    provider: Box<dyn CryptoProvider>,
    trace: Trace,
}

impl fmt::Debug for SecurityMonitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecurityMonitor")
            .field("context", &self.context)
            .field("enclaves", &self.enclaves.len())
            .field("regions", &self.regions.len())
            .finish_non_exhaustive()
    }
}

/// Measurement of the monitor firmware itself.
pub fn sm_measurement(provider: &dyn CryptoProvider) -> Measurement {
    measure(provider, b"pie-sm-v1", b"")
}

/// Device root key of a platform whose provider was seeded freshly. Draws
/// from the provider's random stream, so it must run before any other draw.
pub fn device_root_key(provider: &mut dyn CryptoProvider) -> KeyPair {
    let mut label = b"device-root-key:".to_vec();
    label.extend(provider.random(32));
    provider.keygen(&label)
}

fn enclave_tag(id: u32) -> EntryTag {
    EntryTag::Enclave(id)
}

fn privilege_of(who: EntityId) -> Privilege {
    match who {
        EntityId::Os => Privilege::Supervisor,
        _ => Privilege::User,
    }
}

fn result_json<T>(r: &Result<T, MonitorError>, ok: impl FnOnce(&T) -> Value) -> Value {
    match r {
        Ok(v) => trace::ok(ok(v)),
        Err(e) => trace::err(e.kind(), e),
    }
}

impl SecurityMonitor {
    /// Boots the monitor: installs the SM entry at index 0 and the OS
    /// background entry at the last index.
    pub fn boot(tree: DeviceTree, config: MonitorConfig, mut provider: Box<dyn CryptoProvider>) -> Result<Self, MonitorError> {
        let span = tree.span().ok_or_else(|| MonitorError::InvalidRange("empty device tree".into()))?;
        let dram = tree.dram().next().ok_or_else(|| MonitorError::InvalidRange("no DRAM node".into()))?.range;
        let sm_range = MemRange::new(dram.base().0, SM_SIZE.min(dram.size())).expect("non-empty");
        let mut pmp = PmpConfig::new(config.max_entries)?;
        let max = pmp.max_entries();
        pmp.install_entry(
            Privilege::Machine,
            PmpEntry { index: 0, range: sm_range, perms: Perms::NONE, tag: EntryTag::Sm },
        )?;
        pmp.install_entry(
            Privilege::Machine,
            PmpEntry { index: max - 1, range: span, perms: Perms::RWX, tag: EntryTag::OsBackground },
        )?;
        let platform_keys = device_root_key(&mut *provider);
        let sm_measurement = sm_measurement(&*provider);
        let mut trace = Trace::new();
        trace.push(
            SM_ACTOR,
            "boot",
            json!({ "max_entries": max, "id_policy": config.id_policy, "sm": range_json(&sm_range) }),
            trace::ok(json!({ "free_entries": pmp.free_entry_count() })),
        );
        Ok(SecurityMonitor {
            memory: PhysicalMemory::new(span),
            tree,
            pmp,
            sm_range,
            enclaves: BTreeMap::new(),
            regions: BTreeMap::new(),
            next_region: 1,
            peripherals: BTreeMap::new(),
            dma_verified: BTreeMap::new(),
            context: EntityId::Os,
            id_policy: config.id_policy,
            next_enclave_id: 1,
            sm_measurement,
            platform_keys,
            provider,
            trace,
        })
    }

    // --- accessors -----------------------------------------------------------

    pub fn device_tree(&self) -> &DeviceTree {
        &self.tree
    }

    pub fn pmp(&self) -> &PmpConfig {
        &self.pmp
    }

    pub fn sm_range(&self) -> MemRange {
        self.sm_range
    }

    pub fn context(&self) -> EntityId {
        self.context
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut Trace {
        &mut self.trace
    }

    pub fn provider(&self) -> &dyn CryptoProvider {
        &*self.provider
    }

    pub fn provider_mut(&mut self) -> &mut dyn CryptoProvider {
        &mut *self.provider
    }

    pub fn platform_public_key(&self) -> PublicKey {
        self.platform_keys.public
    }

    pub fn sm_measurement(&self) -> Measurement {
        self.sm_measurement
    }

    pub fn enclave(&self, id: u32) -> Option<&EnclaveDescriptor> {
        self.enclaves.get(&id)
    }

    pub fn enclaves(&self) -> impl Iterator<Item = &EnclaveDescriptor> {
        self.enclaves.values()
    }

    pub fn region(&self, id: RegionId) -> Option<&SharedRegion> {
        self.regions.get(&id)
    }

    pub fn regions(&self) -> impl Iterator<Item = &SharedRegion> {
        self.regions.values()
    }

    pub fn peripheral(&self, id: u32) -> Option<&PeripheralSlot> {
        self.peripherals.get(&id)
    }

    pub fn peripheral_mut(&mut self, id: u32) -> Option<&mut PeripheralSlot> {
        self.peripherals.get_mut(&id)
    }

    pub fn peripherals(&self) -> impl Iterator<Item = &PeripheralSlot> {
        self.peripherals.values()
    }

    /// Live region binding `a` and `b`, if any.
    pub fn shared_region_between(&self, a: EntityId, b: EntityId) -> Option<&SharedRegion> {
        self.regions.values().find(|r| {
            matches!(r.status, RegionStatus::Shared(x, y) if (x == a && y == b) || (x == b && y == a))
        })
    }

    /// Entities sharing a live region with `who`, in id order.
    pub fn connected_ids(&self, who: EntityId) -> Vec<EntityId> {
        let set: BTreeSet<EntityId> = self
            .regions
            .values()
            .filter_map(|r| match r.status {
                RegionStatus::Shared(a, b) if a == who => Some(b),
                RegionStatus::Shared(a, b) if b == who => Some(a),
                _ => None,
            })
            .collect();
        set.into_iter().collect()
    }

    pub fn live_enclave_count(&self) -> usize {
        self.enclaves.len()
    }

    pub fn live_region_count(&self) -> usize {
        self.regions.values().filter(|r| r.is_live()).count()
    }

    pub fn free_entry_count(&self) -> usize {
        self.pmp.free_entry_count()
    }

    /// Unchecked read for assertions and the monitor itself (machine mode).
    pub fn sm_read(&self, addr: PhysAddr, len: u64) -> Result<Vec<u8>, MonitorError> {
        self.memory.raw_read(addr, len).map_err(|_| MonitorError::OutOfSpan)
    }

    pub fn is_zero(&self, range: &MemRange) -> bool {
        self.memory.is_zero(range)
    }

    // --- identifiers ---------------------------------------------------------

    /// Next enclave identifier under the configured policy. Never returns an
    /// identifier held by a live enclave.
    pub fn assign_identifier(&mut self) -> u32 {
        match self.id_policy {
            IdPolicy::Monotonic => {
                let id = self.next_enclave_id;
                self.next_enclave_id += 1;
                id
            }
            IdPolicy::Reuse => (1..).find(|id| !self.enclaves.contains_key(id)).expect("u32 space"),
        }
    }

    // --- peripherals ---------------------------------------------------------

    pub fn next_peripheral_id(&self) -> u32 {
        self.peripherals.keys().next_back().map_or(1, |k| k + 1)
    }

    /// Registers a manufactured device. MMIO devices must sit exactly on an
    /// MMIO node of the device tree.
    pub fn attach_peripheral(&mut self, model: Peripheral) -> Result<EntityId, MonitorError> {
        let id = model.id();
        let who = EntityId::Peripheral(id);
        if self.peripherals.contains_key(&id) {
            return Err(MonitorError::InvalidParty(format!("{who} already attached")));
        }
        if let Binding::Mmio(r) = model.binding() {
            if !self.tree.nodes().iter().any(|n| n.kind.is_mmio() && n.range == r) {
                return Err(MonitorError::NotInDeviceTree(who));
            }
        }
        self.trace.push(
            SM_ACTOR,
            "attach_peripheral",
            json!({ "peripheral": who, "name": model.name(), "kind": model.kind() }),
            trace::ok(Value::Null),
        );
        self.peripherals.insert(id, PeripheralSlot { model, plugged: true, controller: None });
        Ok(who)
    }

    fn slot(&self, id: u32) -> Result<&PeripheralSlot, MonitorError> {
        self.peripherals.get(&id).ok_or(MonitorError::UnknownPeripheral(id))
    }

    fn slot_mut(&mut self, id: u32) -> Result<&mut PeripheralSlot, MonitorError> {
        self.peripherals.get_mut(&id).ok_or(MonitorError::UnknownPeripheral(id))
    }

    /// The OS programs a DMA device's memory-mapped registers with `range`.
    /// Nothing is trusted until [`Self::verify_dma_region`] succeeds.
    pub fn negotiate_dma(&mut self, peripheral: u32, range: MemRange) -> Result<(), MonitorError> {
        let res = self.slot_mut(peripheral).and_then(|s| Ok(s.model.negotiate_dma(range)?));
        self.trace.push(
            "OS",
            "negotiate_dma",
            json!({ "peripheral": EntityId::Peripheral(peripheral), "range": range_json(&range) }),
            result_json(&res, |_| Value::Null),
        );
        res
    }

    /// Asks the device for its signed DMA configuration and compares it with
    /// the range the OS claims. A verified range may then be bound to
    /// `enclave` with [`Self::connect`].
    pub fn verify_dma_region(&mut self, peripheral: u32, enclave: u32, claimed: MemRange) -> Result<(), MonitorError> {
        let res = self.verify_dma_inner(peripheral, enclave, claimed);
        self.trace.push(
            SM_ACTOR,
            "verify_dma_region",
            json!({
                "peripheral": EntityId::Peripheral(peripheral),
                "enclave": EntityId::Enclave(enclave),
                "claimed": range_json(&claimed),
            }),
            result_json(&res, |_| json!("Verified")),
        );
        res
    }

    fn verify_dma_inner(&mut self, peripheral: u32, enclave: u32, claimed: MemRange) -> Result<(), MonitorError> {
        self.live(enclave)?;
        let slot = self.peripherals.get_mut(&peripheral).ok_or(MonitorError::UnknownPeripheral(peripheral))?;
        if !slot.plugged {
            return Err(MonitorError::Unplugged(EntityId::Peripheral(peripheral)));
        }
        if slot.model.binding() != Binding::Dma {
            return Err(MonitorError::NotDmaCapable);
        }
        let request = Frame::new(FrameType::DmaConfig, 0, &[]).expect("empty frame");
        let frames = slot.model.handle_frame(&request, &*self.provider)?;
        let mut re = Reassembler::default();
        let mut msg = None;
        for f in &frames {
            msg = re.push(f).map_err(PeripheralError::from)?;
        }
        let (reported, sig) = msg
            .and_then(|(_, m)| parse_dma_config(&m))
            .ok_or(MonitorError::Peripheral(PeripheralError::NotNegotiated))?;
        let key = slot.model.certificate().peripheral_public_key;
        if !self.provider.verify(&key, &dma_config_body(&reported), &sig) {
            return Err(MonitorError::SignatureInvalid);
        }
        if reported != claimed {
            return Err(MonitorError::Mismatch {
                claimed: claimed.base().0,
                claimed_size: claimed.size(),
                reported: reported.base().0,
                reported_size: reported.size(),
            });
        }
        self.dma_verified.insert(peripheral, (enclave, claimed));
        Ok(())
    }

    // --- enclave lifecycle ---------------------------------------------------

    fn live(&self, id: u32) -> Result<&EnclaveDescriptor, MonitorError> {
        self.enclaves.get(&id).ok_or(MonitorError::UnknownEnclave(id))
    }

    /// Name of whatever protected object `range` overlaps, if any.
    fn protected_overlap(&self, range: &MemRange) -> Option<String> {
        if range.overlaps(&self.sm_range) {
            return Some("monitor memory".into());
        }
        if let Some(e) = self.enclaves.values().find(|e| e.private_range.overlaps(range)) {
            return Some(format!("private memory of E{}", e.id));
        }
        self.regions
            .values()
            .find(|r| r.is_live() && r.range.overlaps(range))
            .map(|r| format!("region {}", r.id))
    }

    fn free_slot(&self) -> Result<usize, MonitorError> {
        let max = self.pmp.max_entries();
        self.pmp.first_free_index(1, max - 1).ok_or(MonitorError::NoFreeEntry)
    }

    pub fn create_enclave(
        &mut self,
        code: &[u8],
        config: &[u8],
        private_range: MemRange,
        kind: EnclaveKind,
    ) -> Result<EntityId, MonitorError> {
        let res = self.create_inner(code, config, private_range, kind);
        self.trace.push(
            SM_ACTOR,
            "create_enclave",
            json!({ "range": range_json(&private_range), "kind": kind }),
            result_json(&res, |id| json!({ "id": id, "free_entries": self.pmp.free_entry_count() })),
        );
        res
    }

    fn create_inner(
        &mut self,
        code: &[u8],
        config: &[u8],
        private_range: MemRange,
        kind: EnclaveKind,
    ) -> Result<EntityId, MonitorError> {
        if let Some(what) = self.protected_overlap(&private_range) {
            return Err(MonitorError::Overlap(what));
        }
        if !self.tree.in_dram(&private_range) {
            return Err(MonitorError::InvalidRange("private memory must lie in DRAM".into()));
        }
        let index = self.free_slot()?;
        let id = self.assign_identifier();
        let perms = if self.context == EntityId::Enclave(id) { Perms::RWX } else { Perms::NONE };
        self.pmp.install_entry(
            Privilege::Machine,
            PmpEntry { index, range: private_range, perms, tag: enclave_tag(id) },
        )?;
        self.memory.zero_fill(&private_range);
        let measurement = measure(&*self.provider, code, config);
        let config_digest = config_digest(&*self.provider, config);
        self.enclaves.insert(
            id,
            EnclaveDescriptor {
                id,
                kind,
                state: EnclaveState::Idle,
                private_range,
                measurement,
                config_digest,
                connections: BTreeSet::new(),
                pending: VecDeque::new(),
                delivered: VecDeque::new(),
                pmp_index: index,
            },
        );
        Ok(EntityId::Enclave(id))
    }

    pub fn destroy_enclave(&mut self, id: u32) -> Result<(), MonitorError> {
        let res = self.destroy_inner(id);
        self.trace.push(
            SM_ACTOR,
            "destroy_enclave",
            json!({ "id": EntityId::Enclave(id) }),
            result_json(&res, |_| json!({ "free_entries": self.pmp.free_entry_count() })),
        );
        res
    }

    fn destroy_inner(&mut self, id: u32) -> Result<(), MonitorError> {
        let who = EntityId::Enclave(id);
        let e = self.live(id)?;
        let (range, index) = (e.private_range, e.pmp_index);
        if self.context == who {
            self.context = EntityId::Os;
        }
        let shared: Vec<RegionId> = self
            .regions
            .values()
            .filter(|r| matches!(r.status, RegionStatus::Shared(a, b) if a == who || b == who))
            .map(|r| r.id)
            .collect();
        for r in shared {
            self.async_disconnect_inner(r, who)?;
        }
        let owned: Vec<RegionId> = self
            .regions
            .values()
            .filter(|r| matches!(r.status, RegionStatus::SoleOwned { owner, .. } if owner == who))
            .map(|r| r.id)
            .collect();
        for r in owned {
            self.free_region(r);
        }
        self.memory.zero_fill(&range);
        self.pmp.clear_entry(Privilege::Machine, index)?;
        self.dma_verified.retain(|_, (e, _)| *e != id);
        let mut desc = self.enclaves.remove(&id).expect("checked live");
        desc.state = EnclaveState::Destroyed;
        self.reconfigure();
        Ok(())
    }

    pub fn enter_enclave(&mut self, id: u32) -> Result<Vec<Notification>, MonitorError> {
        let res = self.enter_inner(id, false);
        self.trace.push(
            SM_ACTOR,
            "enter_enclave",
            json!({ "id": EntityId::Enclave(id) }),
            result_json(&res, |n| json!({ "delivered": n })),
        );
        res
    }

    pub fn resume(&mut self, id: u32) -> Result<Vec<Notification>, MonitorError> {
        let res = self.enter_inner(id, true);
        self.trace.push(
            SM_ACTOR,
            "resume",
            json!({ "id": EntityId::Enclave(id) }),
            result_json(&res, |n| json!({ "delivered": n })),
        );
        res
    }

    /// Drains pending notifications into the enclave's visible queue and
    /// returns what was delivered.
    fn enter_inner(&mut self, id: u32, paused_only: bool) -> Result<Vec<Notification>, MonitorError> {
        if self.context != EntityId::Os {
            return Err(MonitorError::BadState(format!("{} is running", self.context)));
        }
        let e = self.enclaves.get_mut(&id).ok_or(MonitorError::UnknownEnclave(id))?;
        let ok = match e.state {
            EnclaveState::Paused => true,
            EnclaveState::Idle => !paused_only,
            _ => false,
        };
        if !ok {
            return Err(MonitorError::BadState(format!("E{id} is {:?}", e.state)));
        }
        e.state = EnclaveState::Running;
        let delivered: Vec<Notification> = e.pending.drain(..).collect();
        e.delivered.extend(delivered.iter().copied());
        self.context = EntityId::Enclave(id);
        self.reconfigure();
        Ok(delivered)
    }

    pub fn exit_to_os(&mut self) -> Result<(), MonitorError> {
        let res = self.leave(EnclaveState::Idle);
        self.trace.push(SM_ACTOR, "exit_to_os", json!({}), result_json(&res, |_| Value::Null));
        res
    }

    pub fn pause(&mut self, id: u32) -> Result<(), MonitorError> {
        let res = if self.context == EntityId::Enclave(id) {
            self.leave(EnclaveState::Paused)
        } else {
            Err(MonitorError::BadState(format!("E{id} is not running")))
        };
        self.trace.push(SM_ACTOR, "pause", json!({ "id": EntityId::Enclave(id) }), result_json(&res, |_| Value::Null));
        res
    }

    fn leave(&mut self, to: EnclaveState) -> Result<(), MonitorError> {
        let EntityId::Enclave(id) = self.context else {
            return Err(MonitorError::BadState("no enclave is running".into()));
        };
        self.enclaves.get_mut(&id).expect("running enclave is live").state = to;
        self.context = EntityId::Os;
        self.reconfigure();
        Ok(())
    }

    /// Takes the notifications already delivered to the running enclave.
    pub fn take_events(&mut self) -> Vec<Notification> {
        match self.context {
            EntityId::Enclave(id) => self.enclaves.get_mut(&id).map(|e| e.delivered.drain(..).collect()).unwrap_or_default(),
            _ => Vec::new(),
        }
    }

    /// Rewrites every enclave, region and background entry for the current
    /// context.
    fn reconfigure(&mut self) {
        let cur = self.context;
        let mut wanted: Vec<(usize, Perms)> = Vec::new();
        for e in self.enclaves.values() {
            let p = if cur == EntityId::Enclave(e.id) { Perms::RWX } else { Perms::NONE };
            wanted.push((e.pmp_index, p));
        }
        for r in self.regions.values() {
            if let Some(i) = r.pmp_index {
                wanted.push((i, if r.accessible_by(cur) && cur != EntityId::Os { Perms::RW } else { Perms::NONE }));
            }
        }
        let bg = self.pmp.max_entries() - 1;
        wanted.push((bg, if cur == EntityId::Os { Perms::RWX } else { Perms::NONE }));
        for (i, p) in wanted {
            if self.pmp.entry(i).is_some_and(|e| e.perms != p) {
                self.pmp.set_perms(Privilege::Machine, i, p).expect("installed entry");
            }
        }
    }

    // --- shared regions ------------------------------------------------------

    fn check_party(&self, who: EntityId) -> Result<(), MonitorError> {
        match who {
            EntityId::Os => Err(MonitorError::InvalidParty("the OS cannot hold a shared region".into())),
            EntityId::Enclave(id) => self.live(id).map(|_| ()),
            EntityId::Peripheral(id) => {
                if self.slot(id)?.plugged {
                    Ok(())
                } else {
                    Err(MonitorError::Unplugged(who))
                }
            }
        }
    }

    /// True if `who` still holds a sole-owned region or has not yet seen a
    /// sync-disconnect notification.
    fn owes_sync_disconnect(&self, who: EntityId) -> bool {
        let sole = self
            .regions
            .values()
            .any(|r| matches!(r.status, RegionStatus::SoleOwned { owner, .. } if owner == who));
        let undelivered = who.enclave_id().and_then(|id| self.enclaves.get(&id)).is_some_and(|e| {
            e.pending.iter().any(|n| n.kind == NotificationKind::SyncDisconnected)
        });
        sole || undelivered
    }

    pub fn connect(&mut self, a: EntityId, b: EntityId, range: MemRange) -> Result<RegionId, MonitorError> {
        let res = self.connect_inner(a, b, range);
        self.trace.push(
            SM_ACTOR,
            "connect_enclaves",
            json!({ "a": a, "b": b, "range": range_json(&range) }),
            result_json(&res, |r| json!({ "region": r, "free_entries": self.pmp.free_entry_count() })),
        );
        res
    }

    fn connect_inner(&mut self, a: EntityId, b: EntityId, range: MemRange) -> Result<RegionId, MonitorError> {
        if a == b {
            return Err(MonitorError::InvalidParty("a region needs two distinct parties".into()));
        }
        self.check_party(a)?;
        self.check_party(b)?;
        let (enclave, peripheral) = match (a, b) {
            (EntityId::Enclave(_), EntityId::Enclave(_)) => (a, None),
            (EntityId::Enclave(_), EntityId::Peripheral(p)) => (a, Some(p)),
            (EntityId::Peripheral(p), EntityId::Enclave(_)) => (b, Some(p)),
            _ => return Err(MonitorError::InvalidParty("a region needs at least one enclave".into())),
        };
        for who in [a, b] {
            if self.owes_sync_disconnect(who) {
                return Err(MonitorError::MustSyncDisconnectFirst(who));
            }
        }
        if let Some(r) = self.regions.values().find(|r| r.is_live() && r.range == range) {
            return Err(MonitorError::ThirdParty(r.id));
        }
        if let Some(what) = self.protected_overlap(&range) {
            return Err(MonitorError::Overlap(what));
        }
        match peripheral {
            None => {
                if !self.tree.in_dram(&range) {
                    return Err(MonitorError::InvalidRange("enclave regions must lie in DRAM".into()));
                }
            }
            Some(p) => {
                let who = EntityId::Peripheral(p);
                if let Some(r) = self.regions.values().find(|r| r.is_live() && r.parties().contains(&who)) {
                    return Err(MonitorError::ThirdParty(r.id));
                }
                match self.slot(p)?.model.binding() {
                    Binding::Mmio(r) if r == range => {}
                    Binding::Mmio(_) => return Err(MonitorError::NotInDeviceTree(who)),
                    Binding::Dma => {
                        let eid = enclave.enclave_id().expect("enclave party");
                        if self.dma_verified.get(&p) != Some(&(eid, range)) || !self.tree.in_dram(&range) {
                            return Err(MonitorError::DmaNotVerified(who));
                        }
                    }
                }
            }
        }
        let index = self.free_slot()?;
        let id = RegionId(self.next_region);
        let perms = if self.context == a || self.context == b { Perms::RW } else { Perms::NONE };
        self.pmp.install_entry(Privilege::Machine, PmpEntry { index, range, perms, tag: EntryTag::Region(id.0) })?;
        self.next_region += 1;
        self.memory.zero_fill(&range);
        self.regions.insert(id, SharedRegion { id, range, status: RegionStatus::Shared(a, b), pmp_index: Some(index) });
        for (me, peer) in [(a, b), (b, a)] {
            if let Some(e) = me.enclave_id().and_then(|i| self.enclaves.get_mut(&i)) {
                e.connections.insert((peer, id));
            }
        }
        if let Some(p) = peripheral {
            let slot = self.peripherals.get_mut(&p).expect("checked");
            slot.controller = enclave.enclave_id();
            slot.model.attach_link(range);
            self.dma_verified.remove(&p);
        }
        Ok(id)
    }

    fn drop_connection(&mut self, who: EntityId, region: RegionId) {
        if let Some(e) = who.enclave_id().and_then(|i| self.enclaves.get_mut(&i)) {
            e.connections.retain(|(_, r)| *r != region);
        }
    }

    fn notify(&mut self, who: EntityId, n: Notification) {
        if let Some(e) = who.enclave_id().and_then(|i| self.enclaves.get_mut(&i)) {
            e.pending.push_back(n);
        }
    }

    /// Zero-fills the region, clears its entry and marks it freed. A bound
    /// peripheral observes the zeroed link and resets.
    fn free_region(&mut self, id: RegionId) {
        let r = self.regions.get_mut(&id).expect("known region");
        let (range, index, parties) = (r.range, r.pmp_index.take(), r.parties());
        r.status = RegionStatus::Freed;
        self.memory.zero_fill(&range);
        if let Some(i) = index {
            self.pmp.clear_entry(Privilege::Machine, i).expect("machine mode");
        }
        for p in parties {
            self.drop_connection(p, id);
            if let EntityId::Peripheral(pid) = p {
                if let Some(slot) = self.peripherals.get_mut(&pid) {
                    slot.model.detach_link();
                }
            }
        }
    }

    pub fn async_disconnect(&mut self, region: RegionId, dead: EntityId) -> Result<(), MonitorError> {
        let res = self.async_disconnect_inner(region, dead);
        self.reconfigure();
        res
    }

    fn async_disconnect_inner(&mut self, region: RegionId, dead: EntityId) -> Result<(), MonitorError> {
        let res = self.async_disconnect_core(region, dead);
        self.trace.push(
            SM_ACTOR,
            "async_disconnect_enclaves",
            json!({ "region": region, "dead": dead }),
            result_json(&res, |s| json!({ "survivor": s })),
        );
        res.map(|_| ())
    }

    fn async_disconnect_core(&mut self, region: RegionId, dead: EntityId) -> Result<EntityId, MonitorError> {
        let r = self.regions.get(&region).ok_or(MonitorError::UnknownRegion(region))?;
        let survivor = match r.status {
            RegionStatus::Shared(a, b) if a == dead => b,
            RegionStatus::Shared(a, b) if b == dead => a,
            _ => return Err(MonitorError::BadRegionState(region)),
        };
        self.drop_connection(dead, region);
        if let EntityId::Peripheral(pid) = dead {
            if let Some(slot) = self.peripherals.get_mut(&pid) {
                slot.model.detach_link();
            }
        }
        if let EntityId::Peripheral(_) = survivor {
            // The device cannot hold memory on its own: release it at once.
            self.free_region(region);
            return Ok(survivor);
        }
        self.drop_connection(survivor, region);
        self.regions.get_mut(&region).expect("known").status = RegionStatus::SoleOwned { owner: survivor, former: dead };
        self.notify(survivor, Notification { kind: NotificationKind::PeerDestroyed, region, peer: dead });
        Ok(survivor)
    }

    /// OS-issued release of a shared or sole-owned region.
    pub fn sync_disconnect(&mut self, region: RegionId) -> Result<(), MonitorError> {
        let res = self.sync_disconnect_inner(region);
        self.trace.push(
            SM_ACTOR,
            "sync_disconnect_enclaves",
            json!({ "region": region }),
            result_json(&res, |_| Value::Null),
        );
        res
    }

    fn sync_disconnect_inner(&mut self, region: RegionId) -> Result<(), MonitorError> {
        let r = self.regions.get(&region).ok_or(MonitorError::UnknownRegion(region))?;
        let targets: Vec<(EntityId, EntityId)> = match r.status {
            RegionStatus::Shared(a, b) => vec![(a, b), (b, a)],
            RegionStatus::SoleOwned { owner, former } => vec![(owner, former)],
            RegionStatus::Freed => return Err(MonitorError::BadRegionState(region)),
        };
        self.free_region(region);
        for (who, peer) in targets {
            self.notify(who, Notification { kind: NotificationKind::SyncDisconnected, region, peer });
        }
        self.reconfigure();
        Ok(())
    }

    // --- physical environment ------------------------------------------------

    pub fn unplug(&mut self, peripheral: u32) -> Result<(), MonitorError> {
        let res = self.unplug_inner(peripheral);
        self.trace.push(
            "env",
            "unplug",
            json!({ "peripheral": EntityId::Peripheral(peripheral) }),
            result_json(&res, |_| Value::Null),
        );
        res
    }

    fn unplug_inner(&mut self, peripheral: u32) -> Result<(), MonitorError> {
        let who = EntityId::Peripheral(peripheral);
        let slot = self.slot_mut(peripheral)?;
        if !slot.plugged {
            return Err(MonitorError::Unplugged(who));
        }
        slot.plugged = false;
        slot.model.detach_link();
        let bound: Vec<RegionId> =
            self.regions.values().filter(|r| r.is_live() && r.parties().contains(&who)).map(|r| r.id).collect();
        for r in bound {
            self.async_disconnect_inner(r, who)?;
        }
        self.dma_verified.remove(&peripheral);
        self.reconfigure();
        Ok(())
    }

    /// Plugs a device back in, optionally after a firmware swap. Its last
    /// controller enclave and every enclave connected to that controller
    /// are notified. Regions are left as they are.
    pub fn replug(&mut self, peripheral: u32, new_model: Option<Peripheral>) -> Result<(), MonitorError> {
        let res = self.replug_inner(peripheral, new_model);
        self.trace.push(
            "env",
            "replug",
            json!({ "peripheral": EntityId::Peripheral(peripheral) }),
            result_json(&res, |k| json!({ "notified": k })),
        );
        res.map(|_| ())
    }

    fn replug_inner(&mut self, peripheral: u32, new_model: Option<Peripheral>) -> Result<Vec<EntityId>, MonitorError> {
        let who = EntityId::Peripheral(peripheral);
        if self.slot(peripheral)?.plugged {
            self.unplug_inner(peripheral)?;
        }
        let slot = self.slot_mut(peripheral)?;
        let old_fw = slot.model.firmware_digest();
        if let Some(m) = new_model {
            slot.model = m;
        }
        slot.plugged = true;
        let kind = if slot.model.firmware_digest() != old_fw {
            NotificationKind::PeripheralFirmwareChanged
        } else {
            NotificationKind::PeripheralReattached
        };
        let Some(ce) = slot.controller.filter(|c| self.enclaves.contains_key(c)) else {
            return Ok(Vec::new());
        };
        let ce_id = EntityId::Enclave(ce);
        let ce_region = self
            .regions
            .values()
            .filter(|r| r.parties().contains(&ce_id) && r.peer_of(ce_id) == Some(who))
            .map(|r| r.id)
            .next_back()
            .unwrap_or(RegionId(0));
        let mut notified = vec![ce_id];
        self.notify(ce_id, Notification { kind, region: ce_region, peer: who });
        let clients: Vec<(EntityId, RegionId)> = self
            .regions
            .values()
            .filter_map(|r| match r.status {
                RegionStatus::Shared(a, b) if a == ce_id && b.is_enclave() => Some((b, r.id)),
                RegionStatus::Shared(a, b) if b == ce_id && a.is_enclave() => Some((a, r.id)),
                _ => None,
            })
            .collect();
        for (ae, region) in clients {
            self.notify(ae, Notification { kind, region, peer: who });
            notified.push(ae);
        }
        Ok(notified)
    }

    // --- checked memory access ----------------------------------------------

    fn checked(&mut self, addr: PhysAddr, len: u64, kind: AccessKind) -> Result<(), MonitorError> {
        let who = self.context;
        let privilege = privilege_of(who);
        let decision = if len == 0 { Decision::Deny(None) } else { self.pmp.check_access(privilege, addr, len, kind) };
        let (verdict, index) = match decision {
            Decision::Allow => ("Allow", None),
            Decision::Deny(i) => ("Deny", i),
        };
        self.trace.push(
            who.to_string(),
            "pmp.check",
            json!({ "addr": format!("{:#x}", addr.0), "len": len, "kind": kind, "privilege": privilege }),
            json!({ "verdict": verdict, "index": index }),
        );
        if decision.is_allow() && self.memory.span().contains_access(addr.0, len) {
            Ok(())
        } else if decision.is_allow() {
            Err(MonitorError::OutOfSpan)
        } else {
            Err(MonitorError::AccessFault { who, addr: addr.0, len, kind })
        }
    }

    /// Read on behalf of whatever runs on the hart: the OS in supervisor
    /// mode or the running enclave in user mode.
    pub fn checked_read(&mut self, addr: PhysAddr, len: u64) -> Result<Vec<u8>, MonitorError> {
        self.checked(addr, len, AccessKind::Read)?;
        self.memory.raw_read(addr, len).map_err(|_| MonitorError::OutOfSpan)
    }

    pub fn checked_write(&mut self, addr: PhysAddr, data: &[u8]) -> Result<(), MonitorError> {
        self.checked(addr, data.len() as u64, AccessKind::Write)?;
        self.memory.raw_write(addr, data).map_err(|_| MonitorError::OutOfSpan)
    }

    /// Memory port of the running context, for ring traffic.
    pub fn port(&mut self) -> ContextPort<'_> {
        ContextPort(self)
    }

    /// A device's own bus access (DMA or register traffic). Only ranges of
    /// live regions bound to that device are reachable.
    pub fn peripheral_access(
        &mut self,
        peripheral: u32,
        addr: PhysAddr,
        len: u64,
        write: Option<&[u8]>,
    ) -> Result<Vec<u8>, MonitorError> {
        let who = EntityId::Peripheral(peripheral);
        let allowed = self.peripheral_windows(peripheral);
        let ok = self.slot(peripheral)?.plugged && allowed.iter().any(|r| r.contains_access(addr.0, len));
        let kind = if write.is_some() { AccessKind::Write } else { AccessKind::Read };
        self.trace.push(
            who.to_string(),
            "bus.access",
            json!({ "addr": format!("{:#x}", addr.0), "len": len, "kind": kind }),
            json!({ "verdict": if ok { "Allow" } else { "Deny" } }),
        );
        if !ok {
            return Err(MonitorError::AccessFault { who, addr: addr.0, len, kind });
        }
        match write {
            Some(d) => self.memory.raw_write(addr, d).map(|_| Vec::new()),
            None => self.memory.raw_read(addr, len),
        }
        .map_err(|_| MonitorError::OutOfSpan)
    }

    fn peripheral_windows(&self, peripheral: u32) -> Vec<MemRange> {
        let who = EntityId::Peripheral(peripheral);
        self.regions.values().filter(|r| r.accessible_by(who)).map(|r| r.range).collect()
    }

    /// Lets a device process whatever its controller queued on the link.
    pub fn step_peripheral(&mut self, peripheral: u32) -> Result<usize, MonitorError> {
        let windows = self.peripheral_windows(peripheral);
        let slot = self.peripherals.get_mut(&peripheral).ok_or(MonitorError::UnknownPeripheral(peripheral))?;
        if !slot.plugged {
            return Err(MonitorError::Unplugged(EntityId::Peripheral(peripheral)));
        }
        let mut port = BusPort { memory: &mut self.memory, windows };
        Ok(slot.model.poll(&mut port, &*self.provider)?)
    }

    // --- attestation ---------------------------------------------------------

    /// Signs a report on the subject's live state. `evidence` is supplied by
    /// the subject (a controller enclave's cached local attestations) and
    /// `report_data` carries enclave-chosen bytes such as a key share.
    pub fn attest_enclave(
        &mut self,
        subject: u32,
        nonce: &[u8],
        report_data: &[u8],
        evidence: Vec<PeripheralEvidence>,
    ) -> Result<AttestationReport, MonitorError> {
        let res = self.attest_inner(subject, nonce, report_data, evidence);
        self.trace.push(
            SM_ACTOR,
            "attest_enclave",
            json!({ "subject": EntityId::Enclave(subject), "nonce": hex::encode(nonce) }),
            result_json(&res, |r| json!({ "connected_ids": r.connected_ids, "evidence": r.peripheral_evidence.len() })),
        );
        res
    }

    fn attest_inner(
        &mut self,
        subject: u32,
        nonce: &[u8],
        report_data: &[u8],
        evidence: Vec<PeripheralEvidence>,
    ) -> Result<AttestationReport, MonitorError> {
        let e = self.live(subject)?;
        let who = EntityId::Enclave(subject);
        let body = ReportBody {
            subject_id: who,
            subject_kind: match e.kind {
                EnclaveKind::Application => SubjectKind::Ae,
                EnclaveKind::Controller => SubjectKind::Ce,
            },
            sm_measurement: self.sm_measurement,
            subject_measurement: e.measurement,
            config_digest: e.config_digest,
            connected_ids: self.connected_ids(who),
            peripheral_evidence: evidence,
            report_data: report_data.to_vec(),
            verifier_nonce: nonce.to_vec(),
        };
        Ok(body.sign(&*self.provider, &self.platform_keys))
    }

    // --- invariants ----------------------------------------------------------

    /// Checks the structural invariants; returns a description of the first
    /// violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut protected: Vec<(String, MemRange)> = vec![("SM".into(), self.sm_range)];
        for e in self.enclaves.values() {
            protected.push((format!("E{}", e.id), e.private_range));
        }
        for r in self.regions.values() {
            match r.status {
                RegionStatus::Shared(a, b) if a == b => return Err(format!("{} shared with itself", r.id)),
                RegionStatus::Freed if r.pmp_index.is_some() => return Err(format!("freed {} holds an entry", r.id)),
                RegionStatus::Freed => continue,
                _ => {}
            }
            if r.pmp_index.is_none() {
                return Err(format!("live {} has no entry", r.id));
            }
            protected.push((r.id.to_string(), r.range));
        }
        for (i, (na, a)) in protected.iter().enumerate() {
            for (nb, b) in &protected[i + 1..] {
                if a.overlaps(b) {
                    return Err(format!("{na} overlaps {nb}"));
                }
            }
        }
        let expected = 2 + self.live_enclave_count() + self.live_region_count();
        if self.pmp.max_entries() - self.pmp.free_entry_count() != expected {
            return Err(format!("entry accounting: {} used, {expected} expected", self.pmp.entries().count()));
        }
        let running: Vec<u32> =
            self.enclaves.values().filter(|e| e.state == EnclaveState::Running).map(|e| e.id).collect();
        match (running.as_slice(), self.context) {
            ([], EntityId::Os) => {}
            ([id], EntityId::Enclave(c)) if *id == c => {}
            _ => return Err(format!("running {running:?} disagrees with context {}", self.context)),
        }
        for e in self.enclaves.values() {
            let who = EntityId::Enclave(e.id);
            for (peer, rid) in &e.connections {
                let ok = self.regions.get(rid).is_some_and(|r| {
                    matches!(r.status, RegionStatus::Shared(a, b) if (a == who && b == *peer) || (b == who && a == *peer))
                });
                if !ok {
                    return Err(format!("E{} lists stale connection {rid}", e.id));
                }
            }
        }
        if self.pmp.audit_log().iter().any(|a| a.privilege != Privilege::Machine) {
            return Err("PMP mutated outside machine mode".into());
        }
        Ok(())
    }

    pub fn peripheral_kind(&self, id: u32) -> Option<PeripheralKind> {
        self.peripherals.get(&id).map(|s| s.model.kind())
    }
}

/// [`MemPort`] of the entity currently running on the hart.
pub struct ContextPort<'a>(&'a mut SecurityMonitor);

impl MemPort for ContextPort<'_> {
    fn read(&mut self, addr: PhysAddr, len: u64) -> Result<Vec<u8>, RingError> {
        self.0.checked_read(addr, len).map_err(|_| RingError::Fault { addr: addr.0, len })
    }

    fn write(&mut self, addr: PhysAddr, data: &[u8]) -> Result<(), RingError> {
        self.0.checked_write(addr, data).map_err(|_| RingError::Fault { addr: addr.0, len: data.len() as u64 })
    }
}

/// A device's view of memory: only its bound windows.
struct BusPort<'a> {
    memory: &'a mut PhysicalMemory,
    windows: Vec<MemRange>,
}

impl BusPort<'_> {
    fn allowed(&self, addr: u64, len: u64) -> Result<(), RingError> {
        if self.windows.iter().any(|w| w.contains_access(addr, len)) {
            Ok(())
        } else {
            Err(RingError::Fault { addr, len })
        }
    }
}

impl MemPort for BusPort<'_> {
    fn read(&mut self, addr: PhysAddr, len: u64) -> Result<Vec<u8>, RingError> {
        self.allowed(addr.0, len)?;
        self.memory.raw_read(addr, len).map_err(|_| RingError::Fault { addr: addr.0, len })
    }

    fn write(&mut self, addr: PhysAddr, data: &[u8]) -> Result<(), RingError> {
        self.allowed(addr.0, data.len() as u64)?;
        self.memory.raw_write(addr, data).map_err(|_| RingError::Fault { addr: addr.0, len: data.len() as u64 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyedHashProvider;
    use crate::peripherals::model::PeripheralSpec;
    use crate::platform::load_device_tree;

    const TREE: &str = r#"{"nodes": [
        {"name": "dram", "kind": "dram", "base": "0x8000_0000", "size": 134217728, "model": "ddr"},
        {"name": "spi0", "kind": "mmio-peripheral", "base": "0x1001_0000", "size": 4096, "model": "sensor"},
        {"name": "usb0", "kind": "bus-controller", "base": "0x1002_0000", "size": 4096, "model": "usb"}
    ]}"#;

    const MIB: u64 = 0x10_0000;

    fn r(base: u64, size: u64) -> MemRange {
        MemRange::new(base, size).unwrap()
    }

    fn boot_with(max: usize, policy: IdPolicy) -> SecurityMonitor {
        SecurityMonitor::boot(
            load_device_tree(TREE).unwrap(),
            MonitorConfig { max_entries: max, id_policy: policy },
            Box::new(KeyedHashProvider::new(7)),
        )
        .unwrap()
    }

    fn boot() -> SecurityMonitor {
        boot_with(16, IdPolicy::Monotonic)
    }

    fn priv_range(i: u64) -> MemRange {
        r(0x8020_0000 + i * 2 * MIB, 2 * MIB)
    }

    fn shm(i: u64) -> MemRange {
        r(0x8400_0000 + i * 0x1000, 0x1000)
    }

    fn app(m: &mut SecurityMonitor, i: u64) -> u32 {
        m.create_enclave(b"app", &[i as u8], priv_range(i), EnclaveKind::Application).unwrap().enclave_id().unwrap()
    }

    fn sensor(m: &mut SecurityMonitor) -> u32 {
        let id = m.next_peripheral_id();
        let mk = m.provider_mut().keygen(b"maker");
        let p = Peripheral::manufacture(
            m.provider_mut(),
            id,
            PeripheralSpec {
                name: "s".into(),
                kind: PeripheralKind::Sensor,
                binding: Binding::Mmio(r(0x1001_0000, 4096)),
                firmware: b"fw".to_vec(),
                firmware_version: "1".into(),
                terminate_on_ae_death: false,
            },
            &mk,
        );
        m.attach_peripheral(p).unwrap();
        id
    }

    fn os_read(m: &mut SecurityMonitor, range: &MemRange) -> Result<Vec<u8>, MonitorError> {
        m.checked_read(range.base(), range.size().min(64))
    }

    #[test]
    fn boot_consumes_two_entries() {
        let m = boot();
        assert_eq!(m.free_entry_count(), 14);
        assert_eq!(m.pmp().entry(0).unwrap().tag, EntryTag::Sm);
        assert_eq!(m.pmp().entry(15).unwrap().tag, EntryTag::OsBackground);
        m.check_invariants().unwrap();
    }

    #[test]
    fn create_enclave_examples() {
        let mut m = boot();
        assert_eq!(m.create_enclave(b"c", b"", priv_range(0), EnclaveKind::Application).unwrap(), EntityId::Enclave(1));
        assert_eq!(m.enclave(1).unwrap().state, EnclaveState::Idle);
        assert_eq!(m.free_entry_count(), 13);
        let err = m.create_enclave(b"c", b"", r(0x8000_0000, MIB), EnclaveKind::Application).unwrap_err();
        assert_eq!(err.kind(), "OverlapError");
    }

    #[test]
    fn budget_matches_entry_count() {
        for (max, bound) in [(16usize, 7u64), (8, 3)] {
            let mut m = boot_with(max, IdPolicy::Monotonic);
            let ids: Vec<u32> = (0..bound).map(|i| app(&mut m, i)).collect();
            for i in 0..bound as usize {
                let (a, b) = (ids[i], ids[(i + 1) % ids.len()]);
                m.connect(EntityId::Enclave(a), EntityId::Enclave(b), shm(i as u64)).unwrap();
            }
            assert_eq!(m.free_entry_count(), 0);
            let err = m.create_enclave(b"c", b"", priv_range(bound), EnclaveKind::Application).unwrap_err();
            assert_eq!(err, MonitorError::NoFreeEntry);
            m.check_invariants().unwrap();
        }
    }

    #[test]
    fn os_cannot_read_private_memory() {
        let mut m = boot();
        let a = app(&mut m, 0);
        m.enter_enclave(a).unwrap();
        m.checked_write(priv_range(0).base(), b"secret").unwrap();
        assert_eq!(m.checked_read(priv_range(0).base(), 6).unwrap(), b"secret");
        m.exit_to_os().unwrap();
        assert_eq!(os_read(&mut m, &priv_range(0)).unwrap_err().kind(), "AccessFault");
        assert_eq!(m.checked_read(PhysAddr(0x8700_0000), 4).unwrap(), vec![0; 4]);
        assert_eq!(m.enter_enclave(a).map(|_| ()), Ok(()));
        assert_eq!(m.enter_enclave(a).unwrap_err().kind(), "BadState");
    }

    #[test]
    fn enclave_cannot_read_other_enclave_or_os() {
        let mut m = boot();
        let a = app(&mut m, 0);
        app(&mut m, 1);
        m.enter_enclave(a).unwrap();
        assert_eq!(os_read(&mut m, &priv_range(1)).unwrap_err().kind(), "AccessFault");
        assert_eq!(m.checked_read(PhysAddr(0x8700_0000), 4).unwrap_err().kind(), "AccessFault");
    }

    #[test]
    fn connect_and_disconnect_lifecycle() {
        let mut m = boot();
        let a = app(&mut m, 0);
        let b = app(&mut m, 1);
        let (ea, eb) = (EntityId::Enclave(a), EntityId::Enclave(b));
        let rid = m.connect(ea, eb, shm(0)).unwrap();
        assert_eq!(rid, RegionId(1));
        assert_eq!(m.connect(ea, eb, shm(0)).unwrap_err().kind(), "ThirdParty");
        assert_eq!(m.connect(ea, eb, r(0x8400_0800, 0x1000)).unwrap_err().kind(), "OverlapError");
        m.enter_enclave(a).unwrap();
        m.checked_write(shm(0).base(), b"hello").unwrap();
        m.exit_to_os().unwrap();
        m.enter_enclave(b).unwrap();
        assert_eq!(m.checked_read(shm(0).base(), 5).unwrap(), b"hello");
        m.exit_to_os().unwrap();
        assert_eq!(os_read(&mut m, &shm(0)).unwrap_err().kind(), "AccessFault");

        m.destroy_enclave(a).unwrap();
        assert!(m.is_zero(&priv_range(0)));
        let reg = m.region(rid).unwrap();
        assert_eq!(reg.status, RegionStatus::SoleOwned { owner: eb, former: ea });
        assert!(!m.is_zero(&shm(0)));
        assert_eq!(os_read(&mut m, &shm(0)).unwrap_err().kind(), "AccessFault");

        let c = app(&mut m, 2);
        assert_eq!(
            m.connect(eb, EntityId::Enclave(c), shm(1)).unwrap_err(),
            MonitorError::MustSyncDisconnectFirst(eb)
        );
        m.sync_disconnect(rid).unwrap();
        assert_eq!(m.sync_disconnect(rid).unwrap_err().kind(), "BadRegionState");
        assert_eq!(os_read(&mut m, &shm(0)).unwrap(), vec![0; 64]);
        // The notification has not been delivered yet.
        assert_eq!(m.connect(eb, EntityId::Enclave(c), shm(1)).unwrap_err().kind(), "MustSyncDisconnectFirst");
        let got = m.enter_enclave(b).unwrap();
        assert_eq!(
            got.iter().map(|n| n.kind).collect::<Vec<_>>(),
            vec![NotificationKind::PeerDestroyed, NotificationKind::SyncDisconnected]
        );
        assert_eq!(m.take_events().len(), 2);
        m.exit_to_os().unwrap();
        m.connect(eb, EntityId::Enclave(c), shm(1)).unwrap();
        m.check_invariants().unwrap();
    }

    #[test]
    fn async_disconnect_on_freed_region() {
        let mut m = boot();
        let a = EntityId::Enclave(app(&mut m, 0));
        let b = EntityId::Enclave(app(&mut m, 1));
        let rid = m.connect(a, b, shm(0)).unwrap();
        m.sync_disconnect(rid).unwrap();
        assert_eq!(m.async_disconnect(rid, a).unwrap_err().kind(), "BadRegionState");
        assert_eq!(m.destroy_enclave(77).unwrap_err().kind(), "UnknownEnclave");
    }

    #[test]
    fn mmio_peripheral_binding() {
        let mut m = boot();
        let ce = EntityId::Enclave(app(&mut m, 0));
        let p = sensor(&mut m);
        let pe = EntityId::Peripheral(p);
        assert_eq!(m.connect(ce, pe, shm(0)).unwrap_err().kind(), "NotInDeviceTree");
        let rid = m.connect(ce, pe, r(0x1001_0000, 4096)).unwrap();
        assert_eq!(m.peripheral(p).unwrap().model.link(), Some(r(0x1001_0000, 4096)));
        assert!(m.peripheral_access(p, PhysAddr(0x1001_0000), 4, None).is_ok());
        assert_eq!(m.peripheral_access(p, PhysAddr(0x8020_0000), 4, None).unwrap_err().kind(), "AccessFault");
        m.unplug(p).unwrap();
        assert_eq!(m.region(rid).unwrap().status, RegionStatus::SoleOwned { owner: ce, former: pe });
        assert_eq!(m.peripheral_access(p, PhysAddr(0x1001_0000), 4, None).unwrap_err().kind(), "AccessFault");
    }

    #[test]
    fn controller_death_frees_device_region() {
        let mut m = boot();
        let ce = app(&mut m, 0);
        let p = sensor(&mut m);
        let rid = m.connect(EntityId::Enclave(ce), EntityId::Peripheral(p), r(0x1001_0000, 4096)).unwrap();
        let resets = m.peripheral(p).unwrap().model.reset_count();
        m.destroy_enclave(ce).unwrap();
        assert_eq!(m.region(rid).unwrap().status, RegionStatus::Freed);
        assert!(m.peripheral(p).unwrap().model.reset_count() > resets);
        m.check_invariants().unwrap();
    }

    #[test]
    fn identifier_policies() {
        let mut m = boot_with(16, IdPolicy::Monotonic);
        let a = app(&mut m, 0);
        let b = app(&mut m, 1);
        m.destroy_enclave(b).unwrap();
        assert_eq!((a, b, app(&mut m, 2)), (1, 2, 3));

        let mut m = boot_with(16, IdPolicy::Reuse);
        app(&mut m, 0);
        let b = app(&mut m, 1);
        app(&mut m, 2);
        m.destroy_enclave(b).unwrap();
        assert_eq!(app(&mut m, 3), 2);
        assert_eq!(app(&mut m, 4), 4);
    }

    #[test]
    fn notifications_fifo_exactly_once() {
        let mut m = boot();
        let a = EntityId::Enclave(app(&mut m, 0));
        let b = app(&mut m, 1);
        let c = EntityId::Enclave(app(&mut m, 2));
        let r1 = m.connect(a, EntityId::Enclave(b), shm(0)).unwrap();
        let r2 = m.connect(c, EntityId::Enclave(b), shm(1)).unwrap();
        m.destroy_enclave(1).unwrap();
        m.destroy_enclave(3).unwrap();
        let first = m.enter_enclave(b).unwrap();
        assert_eq!(first.iter().map(|n| n.region).collect::<Vec<_>>(), vec![r1, r2]);
        m.exit_to_os().unwrap();
        assert!(m.enter_enclave(b).unwrap().is_empty());
    }

    #[test]
    fn pause_resume() {
        let mut m = boot();
        let a = app(&mut m, 0);
        assert_eq!(m.pause(a).unwrap_err().kind(), "BadState");
        m.enter_enclave(a).unwrap();
        m.pause(a).unwrap();
        assert_eq!(m.enclave(a).unwrap().state, EnclaveState::Paused);
        m.resume(a).unwrap();
        m.exit_to_os().unwrap();
        assert_eq!(m.resume(a).unwrap_err().kind(), "BadState");
        m.check_invariants().unwrap();
    }

    #[test]
    fn attestation_lists_connections() {
        let mut m = boot();
        let a = app(&mut m, 0);
        let b = app(&mut m, 1);
        let rep = m.attest_enclave(a, &[1; 32], b"", vec![]).unwrap();
        assert!(rep.connected_ids.is_empty());
        m.connect(EntityId::Enclave(a), EntityId::Enclave(b), shm(0)).unwrap();
        let rep = m.attest_enclave(a, &[1; 32], b"", vec![]).unwrap();
        assert_eq!(rep.connected_ids, vec![EntityId::Enclave(b)]);
        assert!(m.provider().verify(&m.platform_public_key(), &rep.body(), &rep.platform_signature));
        assert_eq!(m.attest_enclave(9, &[0; 32], b"", vec![]).unwrap_err().kind(), "UnknownEnclave");
    }
}
