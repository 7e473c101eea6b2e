// SPDX-License-Identifier: Apache-2.0

//! Application/controller enclave runtime.
//!
//! Application enclaves (AEs) never touch devices. They send requests to a
//! controller enclave (CE) over a shared region; the CE owns the device
//! link, runs the driver and keeps one session per AE.
//!
//! Wire layout inside an AE↔CE region (see [`crate::ring`]): the lower
//! half carries requests from the AE, the upper half carries replies.
//!
//! ```text
//! request  = req_id u32 BE || op u8 || args
//! reply    = req_id u32 BE || status u8 || data
//! ```
//!
//! The CE↔device region uses the same ring layout with 36-byte slots, each
//! carrying one 32-byte frame; the CE is the initiator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::attestation::{check_local_attestation, session, AttestationReport, LocalAttestFailure, PeripheralCertificate, PeripheralEvidence, CHALLENGE_LEN};
use crate::crypto::{PublicKey, Signature};
use crate::entity::{EntityId, RegionId};
use crate::monitor::{EnclaveKind, MonitorError, Notification, NotificationKind, RegionStatus, SecurityMonitor};
use crate::peripherals::frame::{chunk, Frame, FrameType, HandshakeMsg, Reassembler, PROTOCOL_VERSION};
use crate::peripherals::model::{op, status, PeripheralKind, FRAME_SLOT};
use crate::platform::{MemRange, PhysAddr};
use crate::ring::{Direction, Ring, RingError};
use crate::trace::{self, range_json};

/// Ring slot for AE↔CE messages: 4-byte length plus up to 256 bytes.
pub const MSG_SLOT: u64 = 260;

/// Offset of the attestation key share secret inside an AE's private memory.
pub const SESSION_SECRET_OFFSET: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[repr(u8)]
pub enum ReplyStatus {
    Ok = 0,
    NoSession = 1,
    NotAttested = 2,
    Unsupported = 3,
    DeviceError = 4,
}

impl ReplyStatus {
    fn from_u8(b: u8) -> Option<Self> {
        [Self::Ok, Self::NoSession, Self::NotAttested, Self::Unsupported, Self::DeviceError]
            .into_iter()
            .find(|s| *s as u8 == b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AeReply {
    pub id: u32,
    pub status: ReplyStatus,
    #[serde(serialize_with = "hex_bytes")]
    pub data: Vec<u8>,
}

fn hex_bytes<S: serde::Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&hex::encode(b))
}

impl AeReply {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.id.to_be_bytes().to_vec();
        out.push(self.status as u8);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        if b.len() < 5 {
            return None;
        }
        Some(AeReply {
            id: u32::from_be_bytes(b[..4].try_into().unwrap()),
            status: ReplyStatus::from_u8(b[4])?,
            data: b[5..].to_vec(),
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CallError {
    #[error("no shared region between the enclaves")]
    NotConnected,
    #[error("the controller enclave disconnected")]
    Disconnected,
    #[error("no reply was produced")]
    NoReply,
    #[error("unknown enclave runtime {0}")]
    UnknownRuntime(u32),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Ring(#[from] RingError),
}

impl CallError {
    pub fn kind(&self) -> &'static str {
        match self {
            CallError::NotConnected => "NotConnected",
            CallError::Disconnected => "DisconnectedError",
            CallError::NoReply => "NoReply",
            CallError::UnknownRuntime(_) => "UnknownEnclave",
            CallError::Monitor(e) => e.kind(),
            CallError::Ring(_) => "RingError",
        }
    }
}

/// Driver logic for one peripheral kind. Drivers translate an AE request
/// into a device command scoped to that AE's session.
pub trait Driver: Send + Sync {
    /// Exclusive devices are time-multiplexed and reset between sessions.
    fn exclusive(&self) -> bool;
    fn command(&self, ae: u32, request: &[u8]) -> Option<Vec<u8>>;
    /// Command telling the device that an AE's session has ended.
    fn teardown(&self, ae: u32) -> Vec<u8> {
        let mut c = vec![op::SESSION_ENDED];
        c.extend_from_slice(&ae.to_be_bytes());
        c
    }
}

struct SensorDriver;

impl Driver for SensorDriver {
    fn exclusive(&self) -> bool {
        true
    }

    fn command(&self, _ae: u32, request: &[u8]) -> Option<Vec<u8>> {
        (request.first() == Some(&op::SENSOR_READ)).then(|| vec![op::SENSOR_READ])
    }
}

struct KeyboardDriver;

impl Driver for KeyboardDriver {
    fn exclusive(&self) -> bool {
        true
    }

    fn command(&self, _ae: u32, request: &[u8]) -> Option<Vec<u8>> {
        (request.first() == Some(&op::KEY_POLL)).then(|| vec![op::KEY_POLL])
    }
}

struct AcceleratorDriver;

impl Driver for AcceleratorDriver {
    fn exclusive(&self) -> bool {
        false
    }

    /// The session id is the requesting AE, never a value the AE chose.
    fn command(&self, ae: u32, request: &[u8]) -> Option<Vec<u8>> {
        let (&code, args) = request.split_first()?;
        if !matches!(code, op::ACCEL_OPEN | op::ACCEL_SUBMIT | op::ACCEL_RESULT | op::ACCEL_RESET) {
            return None;
        }
        let mut c = vec![code];
        c.extend_from_slice(&ae.to_be_bytes());
        if code == op::ACCEL_SUBMIT {
            c.extend_from_slice(args);
        }
        Some(c)
    }
}

/// Drivers keyed by peripheral kind name.
#[derive(Clone)]
pub struct DriverRegistry {
    drivers: BTreeMap<String, Arc<dyn Driver>>,
}

impl Default for DriverRegistry {
    fn default() -> Self {
        let mut r = DriverRegistry { drivers: BTreeMap::new() };
        r.register(PeripheralKind::Sensor.as_str(), Arc::new(SensorDriver));
        r.register(PeripheralKind::Keyboard.as_str(), Arc::new(KeyboardDriver));
        r.register(PeripheralKind::Accelerator.as_str(), Arc::new(AcceleratorDriver));
        r
    }
}

impl fmt::Debug for DriverRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.drivers.keys()).finish()
    }
}

impl DriverRegistry {
    pub fn register(&mut self, kind: &str, driver: Arc<dyn Driver>) {
        self.drivers.insert(kind.to_string(), driver);
    }

    pub fn get(&self, kind: &str) -> Option<Arc<dyn Driver>> {
        self.drivers.get(kind).cloned()
    }
}

fn kind_from_code(code: u16) -> Option<PeripheralKind> {
    [PeripheralKind::Sensor, PeripheralKind::Keyboard, PeripheralKind::Accelerator].into_iter().find(|k| k.code() == code)
}

#[derive(Clone, Debug)]
struct Session {
    region: RegionId,
}

/// State held inside a controller enclave.
#[derive(Clone)]
pub struct ControllerEnclave {
    id: u32,
    trusted: Vec<PublicKey>,
    peripheral: Option<u32>,
    link: Option<MemRange>,
    driver: Option<Arc<dyn Driver>>,
    transcript: Option<PeripheralEvidence>,
    last_failure: Option<LocalAttestFailure>,
    sessions: BTreeMap<u32, Session>,
    last_served: Option<u32>,
}

impl fmt::Debug for ControllerEnclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControllerEnclave")
            .field("id", &self.id)
            .field("peripheral", &self.peripheral)
            .field("attested", &self.transcript.is_some())
            .field("sessions", &self.sessions.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl ControllerEnclave {
    fn new(id: u32, trusted: Vec<PublicKey>) -> Self {
        ControllerEnclave {
            id,
            trusted,
            peripheral: None,
            link: None,
            driver: None,
            transcript: None,
            last_failure: None,
            sessions: BTreeMap::new(),
            last_served: None,
        }
    }

    pub fn is_attested(&self) -> bool {
        self.transcript.is_some()
    }

    pub fn transcript(&self) -> Option<&PeripheralEvidence> {
        self.transcript.as_ref()
    }

    pub fn last_failure(&self) -> Option<LocalAttestFailure> {
        self.last_failure
    }

    pub fn session_aes(&self) -> Vec<u32> {
        self.sessions.keys().copied().collect()
    }

    pub fn peripheral(&self) -> Option<u32> {
        self.peripheral
    }

    pub fn session_region(&self, ae: u32) -> Option<RegionId> {
        self.sessions.get(&ae).map(|s| s.region)
    }

    fn invalidate(&mut self) {
        self.transcript = None;
        self.sessions.clear();
        self.last_served = None;
    }
}

/// State held inside an application enclave.
#[derive(Clone, Debug, Default)]
pub struct AppEnclave {
    next_request: u32,
    /// Controller enclaves this AE has seen disconnect.
    lost: BTreeSet<u32>,
    /// Devices reported as replugged or reflashed since the last attestation.
    device_changes: Vec<Notification>,
}

impl AppEnclave {
    pub fn device_changes(&self) -> &[Notification] {
        &self.device_changes
    }
}

/// Monitor plus the enclave runtimes and the driver registry.
#[derive(Debug)]
pub struct System {
    pub monitor: SecurityMonitor,
    ces: BTreeMap<u32, ControllerEnclave>,
    aes: BTreeMap<u32, AppEnclave>,
    registry: DriverRegistry,
    trusted_manufacturers: Vec<PublicKey>,
}

impl System {
    pub fn new(monitor: SecurityMonitor, trusted_manufacturers: Vec<PublicKey>) -> Self {
        System {
            monitor,
            ces: BTreeMap::new(),
            aes: BTreeMap::new(),
            registry: DriverRegistry::default(),
            trusted_manufacturers,
        }
    }

    pub fn registry_mut(&mut self) -> &mut DriverRegistry {
        &mut self.registry
    }

    pub fn controller(&self, id: u32) -> Option<&ControllerEnclave> {
        self.ces.get(&id)
    }

    pub fn application(&self, id: u32) -> Option<&AppEnclave> {
        self.aes.get(&id)
    }

    fn trace(&mut self, actor: impl Into<String>, op: &str, args: serde_json::Value, result: serde_json::Value) {
        self.monitor.trace_mut().push(actor, op, args, result);
    }

    pub fn create_enclave(
        &mut self,
        code: &[u8],
        config: &[u8],
        range: MemRange,
        kind: EnclaveKind,
    ) -> Result<u32, MonitorError> {
        let id = self.monitor.create_enclave(code, config, range, kind)?.enclave_id().expect("enclave id");
        self.ces.remove(&id);
        self.aes.remove(&id);
        match kind {
            EnclaveKind::Controller => {
                self.ces.insert(id, ControllerEnclave::new(id, self.trusted_manufacturers.clone()));
            }
            EnclaveKind::Application => {
                self.aes.insert(id, AppEnclave::default());
            }
        }
        Ok(id)
    }

    pub fn destroy_enclave(&mut self, id: u32) -> Result<(), MonitorError> {
        self.monitor.destroy_enclave(id)?;
        self.ces.remove(&id);
        self.aes.remove(&id);
        Ok(())
    }

    /// Runs `f` inside enclave `id`: enters it, lets the runtime react to
    /// delivered notifications, runs `f`, and exits to the OS.
    pub fn in_enclave<T>(&mut self, id: u32, f: impl FnOnce(&mut Self) -> T) -> Result<T, MonitorError> {
        self.monitor.enter_enclave(id)?;
        let events = self.monitor.take_events();
        for n in events {
            if self.ces.contains_key(&id) {
                self.ce_on_notification(id, n);
            } else if self.aes.contains_key(&id) {
                self.ae_on_notification(id, n);
            }
        }
        let out = f(self);
        self.monitor.exit_to_os()?;
        Ok(out)
    }

    /// OS schedules an enclave: controllers serve their queues, everyone
    /// consumes notifications.
    pub fn schedule(&mut self, id: u32) -> Result<(), MonitorError> {
        self.in_enclave(id, |s| {
            if s.ces.contains_key(&id) {
                s.ce_serve(id);
            }
        })
    }

    // --- controller side -----------------------------------------------------

    fn ce_on_notification(&mut self, ce: u32, n: Notification) {
        let link_lost = |c: &ControllerEnclave| c.peripheral.map(EntityId::Peripheral) == Some(n.peer);
        let Some(c) = self.ces.get_mut(&ce) else { return };
        let mut teardown = None;
        match n.kind {
            NotificationKind::PeerDestroyed | NotificationKind::SyncDisconnected if link_lost(c) => {
                c.link = None;
                c.invalidate();
            }
            NotificationKind::PeerDestroyed | NotificationKind::SyncDisconnected => {
                if let EntityId::Enclave(ae) = n.peer {
                    if c.sessions.remove(&ae).is_some() || n.kind == NotificationKind::PeerDestroyed {
                        teardown = Some(ae);
                    }
                    if c.last_served == Some(ae) {
                        c.last_served = None;
                    }
                }
            }
            NotificationKind::PeripheralReattached | NotificationKind::PeripheralFirmwareChanged => {
                c.invalidate();
            }
        }
        let attested = c.transcript.is_some();
        self.trace(
            format!("E{ce}"),
            "ce.notification",
            json!({ "kind": n.kind, "region": n.region, "peer": n.peer }),
            trace::ok(json!({ "attested": attested, "sessions": self.ces[&ce].session_aes() })),
        );
        if let (Some(ae), true) = (teardown, attested) {
            if n.kind == NotificationKind::PeerDestroyed {
                let cmd = self.ces[&ce].driver.as_ref().map(|d| d.teardown(ae));
                if let Some(cmd) = cmd {
                    let _ = self.ce_exchange(ce, FrameType::Data, &cmd);
                }
            }
        }
    }

    /// Sends one message on the device link and collects the reply, if the
    /// message type has one.
    fn ce_exchange(&mut self, ce: u32, ty: FrameType, data: &[u8]) -> Result<Option<(FrameType, Vec<u8>)>, CallError> {
        let c = self.ces.get(&ce).ok_or(CallError::UnknownRuntime(ce))?;
        let (Some(link), Some(p)) = (c.link, c.peripheral) else {
            return Err(CallError::NotConnected);
        };
        let down = Ring::in_region(&link, Direction::Down, FRAME_SLOT)?;
        let up = Ring::in_region(&link, Direction::Up, FRAME_SLOT)?;
        let frames = if ty == FrameType::Reset {
            vec![Frame::new(FrameType::Reset, 0, &[]).expect("empty frame")]
        } else {
            chunk(ty, data).map_err(|_| CallError::NoReply)?
        };
        self.trace(
            format!("E{ce}"),
            "link.send",
            json!({ "peripheral": EntityId::Peripheral(p), "type": format!("{ty:?}"), "len": data.len() }),
            trace::ok(json!({ "frames": frames.len() })),
        );
        for f in &frames {
            // Drain the device between frames so long messages never fill the ring.
            if down.push(&mut self.monitor.port(), &f.encode()).is_err() {
                self.monitor.step_peripheral(p)?;
                down.push(&mut self.monitor.port(), &f.encode())?;
            }
        }
        self.monitor.step_peripheral(p)?;
        if ty == FrameType::Reset {
            return Ok(None);
        }
        let mut re = Reassembler::default();
        while let Some(raw) = up.pop(&mut self.monitor.port())? {
            let Ok(f) = Frame::decode(&raw) else { continue };
            if let Ok(Some(done)) = re.push(&f) {
                return Ok(Some(done));
            }
        }
        Ok(None)
    }

    /// Local attestation of the device bound to `ce`. On success the
    /// transcript is cached and the driver for the device kind is loaded.
    pub fn ce_attach_peripheral(&mut self, ce: u32, peripheral: u32) -> Result<Result<(), LocalAttestFailure>, CallError> {
        let res = self.in_enclave(ce, |s| s.attach_inner(ce, peripheral))?;
        let shown = match &res {
            Ok(Ok(())) => trace::ok(json!("Ok")),
            Ok(Err(f)) => trace::err("Fail", f),
            Err(e) => trace::err(e.kind(), e),
        };
        self.trace(
            format!("E{ce}"),
            "ce.attach_peripheral",
            json!({ "peripheral": EntityId::Peripheral(peripheral) }),
            shown,
        );
        res
    }

    fn attach_inner(&mut self, ce: u32, peripheral: u32) -> Result<Result<(), LocalAttestFailure>, CallError> {
        let who = EntityId::Peripheral(peripheral);
        let region = self.monitor.shared_region_between(EntityId::Enclave(ce), who).ok_or(CallError::NotConnected)?;
        let link = region.range;
        let c = self.ces.get_mut(&ce).ok_or(CallError::UnknownRuntime(ce))?;
        c.invalidate();
        c.peripheral = Some(peripheral);
        c.link = Some(link);
        let outcome = self.local_attest(ce, peripheral)?;
        let c = self.ces.get_mut(&ce).expect("runtime");
        match outcome {
            Ok((evidence, kind)) => {
                c.transcript = Some(evidence);
                c.last_failure = None;
                c.driver = self.registry.get(kind.as_str());
                Ok(Ok(()))
            }
            Err(f) => {
                c.last_failure = Some(f);
                Ok(Err(f))
            }
        }
    }

    fn local_attest(
        &mut self,
        ce: u32,
        peripheral: u32,
    ) -> Result<Result<(PeripheralEvidence, PeripheralKind), LocalAttestFailure>, CallError> {
        let slot = self.monitor.peripheral(peripheral).ok_or(MonitorError::UnknownPeripheral(peripheral))?;
        let model = slot.model.clone();
        let hs = HandshakeMsg::decode(&model.handshake(self.monitor.provider_mut()).encode())
            .map_err(|_| CallError::NoReply)?;
        let challenge = self.monitor.provider_mut().random(CHALLENGE_LEN);
        let Some((FrameType::ChallengeResponse, msg)) = self.ce_exchange(ce, FrameType::Challenge, &challenge)? else {
            return Ok(Err(LocalAttestFailure::BadResponse));
        };
        if msg.len() < Signature::LEN {
            return Ok(Err(LocalAttestFailure::BadResponse));
        }
        let (cert_bytes, sig) = msg.split_at(msg.len() - Signature::LEN);
        let Ok(certificate) = PeripheralCertificate::decode(cert_bytes) else {
            return Ok(Err(LocalAttestFailure::BadResponse));
        };
        let provider = self.monitor.provider();
        if hs.protocol_version != PROTOCOL_VERSION || provider.hash(cert_bytes).0 != hs.certificate_digest {
            return Ok(Err(LocalAttestFailure::BadResponse));
        }
        let Some(kind) = kind_from_code(hs.peripheral_kind) else {
            return Ok(Err(LocalAttestFailure::BadResponse));
        };
        let evidence = PeripheralEvidence {
            peripheral: EntityId::Peripheral(peripheral),
            certificate,
            challenge,
            response: Signature::from_slice(sig).expect("64 bytes"),
        };
        let trusted = &self.ces[&ce].trusted;
        Ok(check_local_attestation(provider, &evidence, trusted).map(|_| (evidence, kind)))
    }

    /// Drains every AE request queue of `ce` and answers each request.
    fn ce_serve(&mut self, ce: u32) {
        let me = EntityId::Enclave(ce);
        let clients: Vec<(u32, RegionId, MemRange)> = self
            .monitor
            .regions()
            .filter_map(|r| match r.status {
                RegionStatus::Shared(a, b) if a == me || b == me => {
                    let peer = if a == me { b } else { a };
                    let ae = peer.enclave_id().filter(|id| self.aes.contains_key(id))?;
                    Some((ae, r.id, r.range))
                }
                _ => None,
            })
            .collect();
        for (ae, region, range) in clients {
            let (Ok(down), Ok(up)) =
                (Ring::in_region(&range, Direction::Down, MSG_SLOT), Ring::in_region(&range, Direction::Up, MSG_SLOT))
            else {
                continue;
            };
            while let Ok(Some(req)) = down.pop(&mut self.monitor.port()) {
                let c = self.ces.get_mut(&ce).expect("runtime");
                c.sessions.entry(ae).or_insert(Session { region });
                let reply = self.ce_handle_request(ce, ae, &req);
                if up.push(&mut self.monitor.port(), &reply.encode()).is_err() {
                    break;
                }
            }
        }
    }

    /// Handles one request of `ae`. Must run inside `ce`.
    pub fn ce_handle_request(&mut self, ce: u32, ae: u32, raw: &[u8]) -> AeReply {
        let id = raw.get(..4).map_or(0, |b| u32::from_be_bytes(b.try_into().unwrap()));
        let req = raw.get(4..).unwrap_or_default();
        let (status, data) = self.handle_inner(ce, ae, req);
        self.trace(
            format!("E{ce}"),
            "ce.handle_request",
            json!({ "ae": EntityId::Enclave(ae), "request": id, "op": req.first() }),
            trace::ok(json!({ "status": status, "len": data.len() })),
        );
        AeReply { id, status, data }
    }

    fn handle_inner(&mut self, ce: u32, ae: u32, req: &[u8]) -> (ReplyStatus, Vec<u8>) {
        let Some(c) = self.ces.get(&ce) else { return (ReplyStatus::NoSession, Vec::new()) };
        if !c.sessions.contains_key(&ae) {
            return (ReplyStatus::NoSession, Vec::new());
        }
        if req.first() == Some(&op::ECHO) {
            return (ReplyStatus::Ok, req[1..].to_vec());
        }
        let (Some(driver), true) = (c.driver.clone(), c.transcript.is_some()) else {
            return (ReplyStatus::NotAttested, Vec::new());
        };
        let Some(cmd) = driver.command(ae, req) else {
            return (ReplyStatus::Unsupported, Vec::new());
        };
        if driver.exclusive()
            && c.last_served.is_some_and(|prev| prev != ae)
            && self.ce_exchange(ce, FrameType::Reset, &[]).is_err()
        {
            return (ReplyStatus::DeviceError, Vec::new());
        }
        self.ces.get_mut(&ce).expect("runtime").last_served = Some(ae);
        match self.ce_exchange(ce, FrameType::Data, &cmd) {
            Ok(Some((FrameType::Data, reply))) if !reply.is_empty() => match reply[0] {
                status::OK => (ReplyStatus::Ok, reply[1..].to_vec()),
                status::NO_SESSION => (ReplyStatus::NoSession, Vec::new()),
                _ => (ReplyStatus::Unsupported, Vec::new()),
            },
            _ => (ReplyStatus::DeviceError, Vec::new()),
        }
    }

    // --- application side ----------------------------------------------------

    fn ae_on_notification(&mut self, ae: u32, n: Notification) {
        let Some(a) = self.aes.get_mut(&ae) else { return };
        match n.kind {
            NotificationKind::PeerDestroyed | NotificationKind::SyncDisconnected => {
                if let Some(ce) = n.peer.enclave_id() {
                    a.lost.insert(ce);
                }
            }
            NotificationKind::PeripheralReattached | NotificationKind::PeripheralFirmwareChanged => {
                a.device_changes.push(n);
            }
        }
        self.trace(
            format!("E{ae}"),
            "ae.notification",
            json!({ "kind": n.kind, "region": n.region, "peer": n.peer }),
            trace::ok(serde_json::Value::Null),
        );
    }

    /// Sends `payload` to `ce` and returns its reply. The CE is scheduled
    /// in between.
    pub fn ae_call(&mut self, ae: u32, ce: u32, payload: &[u8]) -> Result<AeReply, CallError> {
        let res = self.ae_call_inner(ae, ce, payload);
        self.trace(
            format!("E{ae}"),
            "ae.call",
            json!({ "ce": EntityId::Enclave(ce), "op": payload.first() }),
            match &res {
                Ok(r) => trace::ok(json!({ "status": r.status, "len": r.data.len() })),
                Err(e) => trace::err(e.kind(), e),
            },
        );
        res
    }

    fn ae_call_inner(&mut self, ae: u32, ce: u32, payload: &[u8]) -> Result<AeReply, CallError> {
        if !self.aes.contains_key(&ae) {
            return Err(CallError::UnknownRuntime(ae));
        }
        let pair = (EntityId::Enclave(ae), EntityId::Enclave(ce));
        let sent = self.in_enclave(ae, |s| -> Result<(u32, MemRange), CallError> {
            let Some(region) = s.monitor.shared_region_between(pair.0, pair.1) else {
                let lost = s.aes[&ae].lost.contains(&ce);
                return Err(if lost { CallError::Disconnected } else { CallError::NotConnected });
            };
            let range = region.range;
            let a = s.aes.get_mut(&ae).expect("runtime");
            a.next_request += 1;
            let id = a.next_request;
            let mut msg = id.to_be_bytes().to_vec();
            msg.extend_from_slice(payload);
            Ring::in_region(&range, Direction::Down, MSG_SLOT)?.push(&mut s.monitor.port(), &msg)?;
            Ok((id, range))
        })??;
        let (id, range) = sent;
        self.schedule(ce)?;
        self.in_enclave(ae, |s| -> Result<AeReply, CallError> {
            if s.monitor.shared_region_between(pair.0, pair.1).is_none() {
                return Err(CallError::Disconnected);
            }
            let up = Ring::in_region(&range, Direction::Up, MSG_SLOT)?;
            while let Some(raw) = up.pop(&mut s.monitor.port())? {
                match AeReply::decode(&raw) {
                    Some(r) if r.id == id => return Ok(r),
                    _ => continue,
                }
            }
            Err(CallError::NoReply)
        })?
    }

    // --- attestation ---------------------------------------------------------

    /// The AE answers a verifier challenge: it draws an ephemeral key, keeps
    /// the secret in its private memory and asks the monitor for a report
    /// carrying the public share.
    pub fn ae_attest(&mut self, ae: u32, nonce: &[u8]) -> Result<AttestationReport, CallError> {
        self.in_enclave(ae, |s| -> Result<AttestationReport, CallError> {
            let base = s.monitor.enclave(ae).ok_or(MonitorError::UnknownEnclave(ae))?.private_range.base();
            let seed: [u8; 32] = s.monitor.provider_mut().random(32).try_into().expect("32 bytes");
            let (secret, public) = session::keypair(seed);
            s.monitor.checked_write(PhysAddr(base.0 + SESSION_SECRET_OFFSET), &secret)?;
            s.aes.entry(ae).or_default().device_changes.clear();
            Ok(s.monitor.attest_enclave(ae, nonce, &public, Vec::new())?)
        })?
    }

    /// The CE refreshes its local attestation and asks for a report that
    /// embeds the transcript.
    pub fn ce_attest(&mut self, ce: u32, nonce: &[u8]) -> Result<AttestationReport, CallError> {
        self.in_enclave(ce, |s| -> Result<AttestationReport, CallError> {
            let c = s.ces.get(&ce).ok_or(CallError::UnknownRuntime(ce))?;
            let evidence = match (c.transcript.is_some(), c.peripheral) {
                (true, Some(p)) => match s.local_attest(ce, p)? {
                    Ok((ev, _)) => {
                        s.ces.get_mut(&ce).expect("runtime").transcript = Some(ev.clone());
                        vec![ev]
                    }
                    Err(f) => {
                        let c = s.ces.get_mut(&ce).expect("runtime");
                        c.last_failure = Some(f);
                        c.transcript = None;
                        Vec::new()
                    }
                },
                _ => Vec::new(),
            };
            Ok(s.monitor.attest_enclave(ce, nonce, b"", evidence)?)
        })?
    }

    /// The AE opens a token sealed by the verifier under the key agreed in
    /// the last attestation. `None` if the AE cannot derive that key.
    pub fn ae_receive_secret(
        &mut self,
        ae: u32,
        verifier_share: [u8; 32],
        nonce: &[u8],
        sealed: &[u8],
    ) -> Result<Option<Vec<u8>>, CallError> {
        let res = self.in_enclave(ae, |s| -> Result<Option<Vec<u8>>, CallError> {
            let base = s.monitor.enclave(ae).ok_or(MonitorError::UnknownEnclave(ae))?.private_range.base();
            let secret: [u8; 32] = s
                .monitor
                .checked_read(PhysAddr(base.0 + SESSION_SECRET_OFFSET), 32)?
                .try_into()
                .expect("32 bytes");
            let key = session::derive(s.monitor.provider(), secret, verifier_share, nonce);
            Ok(session::open(s.monitor.provider(), &key, sealed))
        })?;
        self.trace(
            format!("E{ae}"),
            "ae.receive_secret",
            json!({ "sealed_len": sealed.len() }),
            match &res {
                Ok(v) => trace::ok(json!({ "opened": v.is_some() })),
                Err(e) => trace::err(e.kind(), e),
            },
        );
        res
    }

    /// Region binding the AE/CE pair, for harness bookkeeping.
    pub fn region_range(&self, a: EntityId, b: EntityId) -> Option<serde_json::Value> {
        self.monitor.shared_region_between(a, b).map(|r| range_json(&r.range))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{CryptoProvider, KeyedHashProvider};
    use crate::monitor::{IdPolicy, MonitorConfig};
    use crate::peripherals::model::{Binding, Peripheral, PeripheralSpec};
    use crate::platform::load_device_tree;

    const TREE: &str = r#"{"nodes": [
        {"name": "dram", "kind": "dram", "base": "0x8000_0000", "size": 134217728, "model": "ddr"},
        {"name": "spi0", "kind": "mmio-peripheral", "base": "0x1001_0000", "size": 4096, "model": "sensor"},
        {"name": "kbd0", "kind": "mmio-peripheral", "base": "0x1002_0000", "size": 4096, "model": "keyboard"}
    ]}"#;

    fn r(base: u64, size: u64) -> MemRange {
        MemRange::new(base, size).unwrap()
    }

    struct Fixture {
        sys: System,
        ae1: u32,
        ae2: u32,
        ce: u32,
        dev: u32,
    }

    fn fixture(kind: PeripheralKind, trusted_maker: bool) -> Fixture {
        let mut provider: Box<dyn CryptoProvider> = Box::new(KeyedHashProvider::new(3));
        let maker = provider.keygen(b"maker");
        let rogue = provider.keygen(b"rogue");
        let monitor =
            SecurityMonitor::boot(load_device_tree(TREE).unwrap(), MonitorConfig { max_entries: 16, id_policy: IdPolicy::Monotonic }, provider)
                .unwrap();
        let mut sys = System::new(monitor, vec![maker.public]);
        let (binding, node) = match kind {
            PeripheralKind::Keyboard => (Binding::Mmio(r(0x1002_0000, 4096)), r(0x1002_0000, 4096)),
            _ => (Binding::Mmio(r(0x1001_0000, 4096)), r(0x1001_0000, 4096)),
        };
        let id = sys.monitor.next_peripheral_id();
        let spec = PeripheralSpec {
            name: "dev".into(),
            kind,
            binding,
            firmware: b"fw".to_vec(),
            firmware_version: "1.0".into(),
            terminate_on_ae_death: true,
        };
        let model = Peripheral::manufacture(sys.monitor.provider_mut(), id, spec, if trusted_maker { &maker } else { &rogue });
        sys.monitor.attach_peripheral(model).unwrap();
        let ce = sys.create_enclave(b"ce", b"", r(0x8020_0000, 0x20_0000), EnclaveKind::Controller).unwrap();
        let ae1 = sys.create_enclave(b"ae", b"1", r(0x8040_0000, 0x20_0000), EnclaveKind::Application).unwrap();
        let ae2 = sys.create_enclave(b"ae", b"2", r(0x8060_0000, 0x20_0000), EnclaveKind::Application).unwrap();
        sys.monitor.connect(EntityId::Enclave(ce), EntityId::Peripheral(id), node).unwrap();
        sys.monitor.connect(EntityId::Enclave(ae1), EntityId::Enclave(ce), r(0x8400_0000, 0x1000)).unwrap();
        sys.monitor.connect(EntityId::Enclave(ae2), EntityId::Enclave(ce), r(0x8400_1000, 0x1000)).unwrap();
        Fixture { sys, ae1, ae2, ce, dev: id }
    }

    #[test]
    fn echo_round_trip_and_not_connected() {
        let mut f = fixture(PeripheralKind::Sensor, true);
        let reply = f.sys.ae_call(f.ae1, f.ce, &[op::ECHO, 9, 8, 7]).unwrap();
        assert_eq!((reply.status, reply.data), (ReplyStatus::Ok, vec![9, 8, 7]));
        let lone = f.sys.create_enclave(b"ae", b"3", r(0x8080_0000, 0x20_0000), EnclaveKind::Application).unwrap();
        assert_eq!(f.sys.ae_call(lone, f.ce, &[op::ECHO]).unwrap_err(), CallError::NotConnected);
    }

    #[test]
    fn fail_closed_until_attested() {
        let mut f = fixture(PeripheralKind::Sensor, false);
        assert_eq!(f.sys.ae_call(f.ae1, f.ce, &[op::SENSOR_READ]).unwrap().status, ReplyStatus::NotAttested);
        assert_eq!(f.sys.ce_attach_peripheral(f.ce, f.dev).unwrap(), Err(LocalAttestFailure::CertUntrusted));
        assert_eq!(f.sys.ae_call(f.ae1, f.ce, &[op::SENSOR_READ]).unwrap().status, ReplyStatus::NotAttested);
    }

    #[test]
    fn sensor_read_through_controller() {
        let mut f = fixture(PeripheralKind::Sensor, true);
        f.sys.monitor.peripheral_mut(f.dev).unwrap().model.set_sensor(-40);
        assert_eq!(f.sys.ce_attach_peripheral(f.ce, f.dev).unwrap(), Ok(()));
        let rep = f.sys.ae_call(f.ae1, f.ce, &[op::SENSOR_READ]).unwrap();
        assert_eq!(rep.status, ReplyStatus::Ok);
        assert_eq!(i16::from_be_bytes([rep.data[0], rep.data[1]]), -40);
        let counter = u64::from_be_bytes(rep.data[2..10].try_into().unwrap());
        let sig = Signature::from_slice(&rep.data[10..74]).unwrap();
        let pk = f.sys.monitor.peripheral(f.dev).unwrap().model.public_key();
        let body = crate::peripherals::model::sensor_statement_body(-40, counter);
        assert!(f.sys.monitor.provider().verify(&pk, &body, &sig));
    }

    #[test]
    fn exclusive_device_resets_between_sessions() {
        let mut f = fixture(PeripheralKind::Keyboard, true);
        f.sys.ce_attach_peripheral(f.ce, f.dev).unwrap().unwrap();
        for k in *b"ab" {
            f.sys.monitor.peripheral_mut(f.dev).unwrap().model.inject_key(k);
        }
        assert_eq!(f.sys.ae_call(f.ae1, f.ce, &[op::KEY_POLL]).unwrap().data, vec![1, b'a']);
        // Switching to AE2 resets the keyboard, so AE1's pending key is gone.
        assert_eq!(f.sys.ae_call(f.ae2, f.ce, &[op::KEY_POLL]).unwrap().data, vec![0]);
        let resets = f
            .sys
            .monitor
            .trace()
            .records()
            .iter()
            .filter(|r| r.op == "link.send" && r.args["type"] == "Reset")
            .count();
        assert_eq!(resets, 1);
    }

    #[test]
    fn ae_death_keeps_other_sessions() {
        let mut f = fixture(PeripheralKind::Sensor, true);
        f.sys.ce_attach_peripheral(f.ce, f.dev).unwrap().unwrap();
        f.sys.ae_call(f.ae1, f.ce, &[op::SENSOR_READ]).unwrap();
        f.sys.ae_call(f.ae2, f.ce, &[op::SENSOR_READ]).unwrap();
        f.sys.destroy_enclave(f.ae1).unwrap();
        f.sys.schedule(f.ce).unwrap();
        assert_eq!(f.sys.controller(f.ce).unwrap().session_aes(), vec![f.ae2]);
        assert_eq!(f.sys.ae_call(f.ae2, f.ce, &[op::SENSOR_READ]).unwrap().status, ReplyStatus::Ok);
    }

    #[test]
    fn controller_death_then_sync_disconnect() {
        let mut f = fixture(PeripheralKind::Sensor, true);
        f.sys.ce_attach_peripheral(f.ce, f.dev).unwrap().unwrap();
        let region = f.sys.monitor.shared_region_between(EntityId::Enclave(f.ae1), EntityId::Enclave(f.ce)).unwrap().id;
        f.sys.destroy_enclave(f.ce).unwrap();
        f.sys.monitor.sync_disconnect(region).unwrap();
        assert_eq!(f.sys.ae_call(f.ae1, f.ce, &[op::ECHO]).unwrap_err(), CallError::Disconnected);
    }

    #[test]
    fn replug_invalidates_transcript() {
        let mut f = fixture(PeripheralKind::Sensor, true);
        f.sys.ce_attach_peripheral(f.ce, f.dev).unwrap().unwrap();
        f.sys.ae_call(f.ae1, f.ce, &[op::SENSOR_READ]).unwrap();
        f.sys.monitor.replug(f.dev, None).unwrap();
        f.sys.schedule(f.ce).unwrap();
        let c = f.sys.controller(f.ce).unwrap();
        assert!(!c.is_attested());
        assert!(c.session_aes().is_empty());
        f.sys.schedule(f.ae1).unwrap();
        assert_eq!(f.sys.application(f.ae1).unwrap().device_changes().len(), 1);
    }

    #[test]
    fn secret_survives_only_in_the_attested_enclave() {
        let mut f = fixture(PeripheralKind::Sensor, true);
        let nonce = [5u8; 32];
        let (vs, vp) = session::keypair([9u8; 32]);
        let report = f.sys.ae_attest(f.ae1, &nonce).unwrap();
        let share: [u8; 32] = report.report_data.clone().try_into().unwrap();
        let key = session::derive(f.sys.monitor.provider(), vs, share, &nonce);
        let sealed = session::seal(f.sys.monitor.provider(), &key, b"token");
        assert_eq!(f.sys.ae_receive_secret(f.ae1, vp, &nonce, &sealed).unwrap(), Some(b"token".to_vec()));
        assert_eq!(f.sys.ae_receive_secret(f.ae2, vp, &nonce, &sealed).unwrap(), None);
    }
}
