// SPDX-License-Identifier: Apache-2.0

//! Emulated peripherals with manufacturer-certified keys.
//!
//! Commands travel in `Data` frames. The first payload byte is an opcode:
//!
//! | opcode | request                      | reply                                        |
//! |--------|------------------------------|----------------------------------------------|
//! | `0x00` | echo, any bytes              | the identical message                        |
//! | `0x10` | sensor read                  | `0, value i16, counter u64, signature (64)`  |
//! | `0x20` | keyboard poll                | `0, 1, scancode` or `0, 0`                   |
//! | `0x30` | accel open, `ae u32`         | `0`                                          |
//! | `0x31` | accel submit, `ae u32, data` | `0`, or `1` when there is no session         |
//! | `0x32` | accel result, `ae u32`       | `0, result` or `1`                           |
//! | `0x33` | accel reset, `ae u32`        | `0` (`0xffff_ffff` resets every session)     |
//! | `0x40` | session ended, `ae u32`      | `0`                                          |
//!
//! Any other opcode, or one the device kind does not implement, is answered
//! with status `2`. Integers are big-endian.
//!
//! `Challenge` frames carry a 32-byte challenge; the answer is a run of
//! `ChallengeResponse` frames holding `certificate || signature`.
//! An empty `DmaConfig` frame asks for the signed DMA configuration:
//! `base u64 || size u64 || signature`. A `Reset` frame clears all
//! device state and gets no reply.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::PeripheralCertificate;
use crate::codec::Writer;
use crate::crypto::{CryptoProvider, Digest, KeyPair, PublicKey, Signature};
use crate::platform::MemRange;
use crate::ring::{Direction, MemPort, Ring, RingError};

use super::frame::{chunk, Frame, FrameError, FrameType, HandshakeMsg, Reassembler, FRAME_LEN, PROTOCOL_VERSION};

/// Ring slot size for frame traffic: a 4-byte length and one frame.
pub const FRAME_SLOT: u64 = 4 + FRAME_LEN as u64;

pub mod op {
    pub const ECHO: u8 = 0x00;
    pub const SENSOR_READ: u8 = 0x10;
    pub const KEY_POLL: u8 = 0x20;
    pub const ACCEL_OPEN: u8 = 0x30;
    pub const ACCEL_SUBMIT: u8 = 0x31;
    pub const ACCEL_RESULT: u8 = 0x32;
    pub const ACCEL_RESET: u8 = 0x33;
    pub const SESSION_ENDED: u8 = 0x40;
    pub const ALL_SESSIONS: u32 = u32::MAX;
}

pub mod status {
    pub const OK: u8 = 0;
    pub const NO_SESSION: u8 = 1;
    pub const UNSUPPORTED: u8 = 2;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PeripheralError {
    #[error("peripheral is not connected to any region")]
    NotConnected,
    #[error("peripheral is not DMA capable")]
    NotDmaCapable,
    #[error("no DMA range has been negotiated")]
    NotNegotiated,
    #[error("no accelerator session for enclave {0}")]
    NoSession(u32),
    #[error("operation not supported by a {0} peripheral")]
    WrongKind(PeripheralKind),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Ring(#[from] RingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeripheralKind {
    Sensor,
    Keyboard,
    Accelerator,
}

impl PeripheralKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PeripheralKind::Sensor => "sensor",
            PeripheralKind::Keyboard => "keyboard",
            PeripheralKind::Accelerator => "accelerator",
        }
    }

    pub fn code(self) -> u16 {
        match self {
            PeripheralKind::Sensor => 1,
            PeripheralKind::Keyboard => 2,
            PeripheralKind::Accelerator => 3,
        }
    }
}

impl fmt::Display for PeripheralKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Memory-mapped registers at a device-tree range.
    Mmio(MemRange),
    /// Bus master; the shared range is negotiated by the OS.
    Dma,
}

/// Deterministic toy workload: FNV-1a over everything submitted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcceleratorSession {
    input: Vec<u8>,
    accumulator: u64,
    output: Vec<u8>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Default for AcceleratorSession {
    fn default() -> Self {
        AcceleratorSession { input: Vec::new(), accumulator: FNV_OFFSET, output: Vec::new() }
    }
}

impl AcceleratorSession {
    fn submit(&mut self, data: &[u8]) {
        for b in data {
            self.accumulator = (self.accumulator ^ *b as u64).wrapping_mul(FNV_PRIME);
        }
        self.input.extend_from_slice(data);
        self.output = self.accumulator.to_be_bytes().to_vec();
        self.output.extend_from_slice(&(self.input.len() as u32).to_be_bytes());
    }

    fn result(&self) -> Vec<u8> {
        if self.output.is_empty() {
            let mut out = FNV_OFFSET.to_be_bytes().to_vec();
            out.extend_from_slice(&0u32.to_be_bytes());
            out
        } else {
            self.output.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SensorStatement {
    pub value: i16,
    pub counter: u64,
    pub signature: Signature,
}

pub fn sensor_statement_body(value: i16, counter: u64) -> Vec<u8> {
    Writer::new().field(b"pie-sensor").field(&value.to_be_bytes()).field(&counter.to_be_bytes()).finish()
}

pub fn dma_config_body(range: &MemRange) -> Vec<u8> {
    Writer::new()
        .field(b"pie-dma-config")
        .field(&range.base().0.to_be_bytes())
        .field(&range.size().to_be_bytes())
        .finish()
}

/// Static description used to build a device.
#[derive(Clone, Debug)]
pub struct PeripheralSpec {
    pub name: String,
    pub kind: PeripheralKind,
    pub binding: Binding,
    pub firmware: Vec<u8>,
    pub firmware_version: String,
    pub terminate_on_ae_death: bool,
}

#[derive(Clone, Debug)]
pub struct Peripheral {
    id: u32,
    spec: PeripheralSpec,
    keypair: KeyPair,
    certificate: PeripheralCertificate,
    firmware_digest: Digest,
    link: Option<MemRange>,
    negotiated_dma: Option<MemRange>,
    lying_dma: Option<MemRange>,
    forged_key: Option<KeyPair>,
    sensor_value: i16,
    sample_counter: u64,
    keys: VecDeque<u8>,
    sessions: BTreeMap<u32, AcceleratorSession>,
    inbound: Reassembler,
    resets: u64,
}

impl Peripheral {
    /// Builds a device whose key pair is derived from `(id, name)` and whose
    /// certificate is issued by `manufacturer`.
    pub fn manufacture(provider: &mut dyn CryptoProvider, id: u32, spec: PeripheralSpec, manufacturer: &KeyPair) -> Self {
        let mut seed = b"peripheral:".to_vec();
        seed.extend_from_slice(&id.to_be_bytes());
        seed.extend_from_slice(spec.name.as_bytes());
        let keypair = provider.keygen(&seed);
        let firmware_digest = provider.hash(&spec.firmware);
        let certificate = PeripheralCertificate::issue(
            provider,
            &manufacturer.secret,
            keypair.public,
            firmware_digest,
            &spec.firmware_version,
        );
        Peripheral {
            id,
            spec,
            keypair,
            certificate,
            firmware_digest,
            link: None,
            negotiated_dma: None,
            lying_dma: None,
            forged_key: None,
            sensor_value: 0,
            sample_counter: 0,
            keys: VecDeque::new(),
            sessions: BTreeMap::new(),
            inbound: Reassembler::default(),
            resets: 0,
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn kind(&self) -> PeripheralKind {
        self.spec.kind
    }

    pub fn binding(&self) -> Binding {
        self.spec.binding
    }

    pub fn certificate(&self) -> &PeripheralCertificate {
        &self.certificate
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public
    }

    pub fn firmware_digest(&self) -> Digest {
        self.firmware_digest
    }

    pub fn terminate_on_ae_death(&self) -> bool {
        self.spec.terminate_on_ae_death
    }

    pub fn link(&self) -> Option<MemRange> {
        self.link
    }

    pub fn reset_count(&self) -> u64 {
        self.resets
    }

    /// Replaces the firmware image and re-certifies it.
    pub fn reflash(&mut self, provider: &dyn CryptoProvider, manufacturer: &KeyPair, firmware: Vec<u8>, version: &str) {
        self.firmware_digest = provider.hash(&firmware);
        self.spec.firmware = firmware;
        self.spec.firmware_version = version.to_string();
        self.certificate = PeripheralCertificate::issue(
            provider,
            &manufacturer.secret,
            self.keypair.public,
            self.firmware_digest,
            version,
        );
    }

    // --- environment injection -------------------------------------------

    pub fn set_sensor(&mut self, value: i16) {
        self.sensor_value = value;
    }

    pub fn inject_key(&mut self, code: u8) {
        self.keys.push_back(code);
    }

    pub fn set_lying_dma(&mut self, range: Option<MemRange>) {
        self.lying_dma = range;
    }

    /// Makes the device sign with a key other than the certified one.
    pub fn set_forged_key(&mut self, key: Option<KeyPair>) {
        self.forged_key = key;
    }

    fn signing_key(&self) -> &crate::crypto::SecretKey {
        &self.forged_key.as_ref().unwrap_or(&self.keypair).secret
    }

    pub fn negotiate_dma(&mut self, range: MemRange) -> Result<(), PeripheralError> {
        if self.spec.binding != Binding::Dma {
            return Err(PeripheralError::NotDmaCapable);
        }
        self.negotiated_dma = Some(range);
        Ok(())
    }

    pub fn negotiated_dma(&self) -> Option<MemRange> {
        self.negotiated_dma
    }

    // --- link state, driven by the monitor -------------------------------

    pub fn attach_link(&mut self, range: MemRange) {
        self.link = Some(range);
        self.inbound = Reassembler::default();
    }

    /// The shared region went away: the device observes zeroed memory and
    /// resets itself.
    pub fn detach_link(&mut self) {
        self.link = None;
        self.reset();
    }

    // --- model operations --------------------------------------------------

    pub fn handshake(&self, provider: &mut dyn CryptoProvider) -> HandshakeMsg {
        let nonce = provider.random(16);
        HandshakeMsg {
            protocol_version: PROTOCOL_VERSION,
            peripheral_kind: self.spec.kind.code(),
            peripheral_nonce: nonce.try_into().expect("16 random bytes"),
            certificate_digest: provider.hash(&self.certificate.encode()).0,
        }
    }

    pub fn respond_challenge(&self, provider: &dyn CryptoProvider, challenge: &[u8]) -> Signature {
        provider.sign(self.signing_key(), challenge)
    }

    pub fn sensor_read(&mut self, provider: &dyn CryptoProvider) -> Result<SensorStatement, PeripheralError> {
        if self.spec.kind != PeripheralKind::Sensor {
            return Err(PeripheralError::WrongKind(self.spec.kind));
        }
        self.sample_counter += 1;
        let body = sensor_statement_body(self.sensor_value, self.sample_counter);
        Ok(SensorStatement {
            value: self.sensor_value,
            counter: self.sample_counter,
            signature: provider.sign(self.signing_key(), &body),
        })
    }

    pub fn keyboard_poll(&mut self) -> Result<Option<u8>, PeripheralError> {
        if self.spec.kind != PeripheralKind::Keyboard {
            return Err(PeripheralError::WrongKind(self.spec.kind));
        }
        Ok(self.keys.pop_front())
    }

    fn require_accel(&self) -> Result<(), PeripheralError> {
        if self.spec.kind != PeripheralKind::Accelerator {
            return Err(PeripheralError::WrongKind(self.spec.kind));
        }
        Ok(())
    }

    pub fn accel_open_session(&mut self, ae: u32) -> Result<(), PeripheralError> {
        self.require_accel()?;
        self.sessions.entry(ae).or_default();
        Ok(())
    }

    pub fn accel_submit(&mut self, ae: u32, data: &[u8]) -> Result<(), PeripheralError> {
        self.require_accel()?;
        self.sessions.get_mut(&ae).ok_or(PeripheralError::NoSession(ae))?.submit(data);
        Ok(())
    }

    pub fn accel_result(&self, ae: u32) -> Result<Vec<u8>, PeripheralError> {
        self.require_accel()?;
        Ok(self.sessions.get(&ae).ok_or(PeripheralError::NoSession(ae))?.result())
    }

    /// `None` resets every session.
    pub fn accel_reset(&mut self, ae: Option<u32>) -> Result<(), PeripheralError> {
        self.require_accel()?;
        match ae {
            Some(ae) => {
                self.sessions.remove(&ae);
            }
            None => self.sessions.clear(),
        }
        Ok(())
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn pending_keys(&self) -> usize {
        self.keys.len()
    }

    pub fn report_dma_config(&self, provider: &dyn CryptoProvider) -> Result<Vec<Frame>, PeripheralError> {
        if self.spec.binding != Binding::Dma {
            return Err(PeripheralError::NotDmaCapable);
        }
        let range = self.lying_dma.or(self.negotiated_dma).ok_or(PeripheralError::NotNegotiated)?;
        let sig = provider.sign(self.signing_key(), &dma_config_body(&range));
        let mut msg = range.base().0.to_be_bytes().to_vec();
        msg.extend_from_slice(&range.size().to_be_bytes());
        msg.extend_from_slice(&sig.0);
        Ok(chunk(FrameType::DmaConfig, &msg)?)
    }

    /// Clears queues, sessions and partial input. The sample counter keeps
    /// counting so signed statements never repeat.
    pub fn reset(&mut self) {
        self.keys.clear();
        self.sessions.clear();
        self.inbound = Reassembler::default();
        self.resets += 1;
    }

    // --- frame protocol ----------------------------------------------------

    /// Drains the downstream ring of the link and answers every complete
    /// message on the upstream ring. Returns the number of frames consumed.
    pub fn poll(&mut self, port: &mut dyn MemPort, provider: &dyn CryptoProvider) -> Result<usize, PeripheralError> {
        let link = self.link.ok_or(PeripheralError::NotConnected)?;
        let down = Ring::in_region(&link, Direction::Down, FRAME_SLOT)?;
        let up = Ring::in_region(&link, Direction::Up, FRAME_SLOT)?;
        let mut consumed = 0;
        while let Some(raw) = down.pop(port)? {
            consumed += 1;
            let Ok(frame) = Frame::decode(&raw) else { continue };
            for reply in self.handle_frame(&frame, provider)? {
                up.push(port, &reply.encode())?;
            }
        }
        Ok(consumed)
    }

    pub fn handle_frame(&mut self, frame: &Frame, provider: &dyn CryptoProvider) -> Result<Vec<Frame>, PeripheralError> {
        if frame.frame_type() == FrameType::Reset {
            self.reset();
            return Ok(Vec::new());
        }
        let (ty, msg) = match self.inbound.push(frame) {
            Ok(Some(done)) => done,
            Ok(None) => return Ok(Vec::new()),
            // Garbled sequence: drop the partial message.
            Err(_) => return Ok(Vec::new()),
        };
        let replies = match ty {
            FrameType::Challenge => {
                let sig = self.respond_challenge(provider, &msg);
                let mut out = self.certificate.encode();
                out.extend_from_slice(&sig.0);
                chunk(FrameType::ChallengeResponse, &out)?
            }
            FrameType::DmaConfig => match self.report_dma_config(provider) {
                Ok(frames) => frames,
                Err(_) => chunk(FrameType::DmaConfig, &[])?,
            },
            FrameType::Data => chunk(FrameType::Data, &self.handle_command(&msg, provider))?,
            FrameType::ChallengeResponse | FrameType::Reset => Vec::new(),
        };
        Ok(replies)
    }

    fn handle_command(&mut self, msg: &[u8], provider: &dyn CryptoProvider) -> Vec<u8> {
        let Some((&opcode, args)) = msg.split_first() else {
            return vec![status::UNSUPPORTED];
        };
        let ae = args.get(..4).map(|b| u32::from_be_bytes(b.try_into().unwrap()));
        let kind = self.spec.kind;
        match (opcode, kind) {
            (op::ECHO, _) => msg.to_vec(),
            (op::SENSOR_READ, PeripheralKind::Sensor) => {
                let st = self.sensor_read(provider).expect("sensor");
                let mut out = vec![status::OK];
                out.extend_from_slice(&st.value.to_be_bytes());
                out.extend_from_slice(&st.counter.to_be_bytes());
                out.extend_from_slice(&st.signature.0);
                out
            }
            (op::KEY_POLL, PeripheralKind::Keyboard) => match self.keys.pop_front() {
                Some(k) => vec![status::OK, 1, k],
                None => vec![status::OK, 0],
            },
            (op::ACCEL_OPEN, PeripheralKind::Accelerator) => match ae {
                Some(ae) => {
                    self.sessions.entry(ae).or_default();
                    vec![status::OK]
                }
                None => vec![status::UNSUPPORTED],
            },
            (op::ACCEL_SUBMIT, PeripheralKind::Accelerator) => match ae.and_then(|ae| self.sessions.get_mut(&ae)) {
                Some(s) => {
                    s.submit(&args[4..]);
                    vec![status::OK]
                }
                None => vec![status::NO_SESSION],
            },
            (op::ACCEL_RESULT, PeripheralKind::Accelerator) => match ae.and_then(|ae| self.sessions.get(&ae)) {
                Some(s) => {
                    let mut out = vec![status::OK];
                    out.extend_from_slice(&s.result());
                    out
                }
                None => vec![status::NO_SESSION],
            },
            (op::ACCEL_RESET, PeripheralKind::Accelerator) => {
                match ae {
                    Some(op::ALL_SESSIONS) => self.sessions.clear(),
                    Some(ae) => {
                        self.sessions.remove(&ae);
                    }
                    None => return vec![status::UNSUPPORTED],
                }
                vec![status::OK]
            }
            (op::SESSION_ENDED, _) => {
                if self.spec.terminate_on_ae_death {
                    match (kind, ae) {
                        (PeripheralKind::Accelerator, Some(ae)) => {
                            self.sessions.remove(&ae);
                        }
                        _ => self.reset(),
                    }
                }
                vec![status::OK]
            }
            _ => vec![status::UNSUPPORTED],
        }
    }
}

/// Parses a DMA configuration message (`base || size || signature`).
pub fn parse_dma_config(msg: &[u8]) -> Option<(MemRange, Signature)> {
    if msg.len() != 16 + Signature::LEN {
        return None;
    }
    let base = u64::from_be_bytes(msg[..8].try_into().unwrap());
    let size = u64::from_be_bytes(msg[8..16].try_into().unwrap());
    Some((MemRange::new(base, size).ok()?, Signature::from_slice(&msg[16..])?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{Ed25519Sha3, KeyedHashProvider};
    use crate::peripherals::frame::Reassembler;

    fn device(p: &mut dyn CryptoProvider, kind: PeripheralKind, binding: Binding) -> Peripheral {
        let m = p.keygen(b"acme");
        Peripheral::manufacture(
            p,
            1,
            PeripheralSpec {
                name: "dev".into(),
                kind,
                binding,
                firmware: b"fw-1".to_vec(),
                firmware_version: "1.0".into(),
                terminate_on_ae_death: false,
            },
            &m,
        )
    }

    fn mmio() -> Binding {
        Binding::Mmio(MemRange::new(0x1001_0000, 0x1000).unwrap())
    }

    fn fnv_oracle(data: &[u8]) -> Vec<u8> {
        // Reference FNV-1a 64 written from the published constants.
        let mut h: u64 = 14695981039346656037;
        for &b in data {
            h ^= u64::from(b);
            h = h.wrapping_mul(1099511628211);
        }
        let mut v = h.to_be_bytes().to_vec();
        v.extend_from_slice(&(data.len() as u32).to_be_bytes());
        v
    }

    #[test]
    fn handshake_is_60_bytes_and_fresh() {
        let mut p = Ed25519Sha3::new(3);
        let d = device(&mut p, PeripheralKind::Sensor, mmio());
        let h1 = d.handshake(&mut p);
        let h2 = d.handshake(&mut p);
        assert_eq!(&h1.encode()[..4], b"PIE1");
        assert_eq!(h1.encode().len(), 60);
        assert_ne!(h1.peripheral_nonce, h2.peripheral_nonce);
        assert_eq!(h1.certificate_digest, crate::crypto::sha3_256(&d.certificate().encode()).0);
    }

    #[test]
    fn sensor_statements() {
        let mut p = KeyedHashProvider::new(0);
        let other = p.keygen(b"other");
        let mut d = device(&mut p, PeripheralKind::Sensor, mmio());
        d.set_sensor(25);
        let a = d.sensor_read(&p).unwrap();
        assert_eq!(a.value, 25);
        assert!(p.verify(&d.public_key(), &sensor_statement_body(25, a.counter), &a.signature));
        assert!(!p.verify(&d.public_key(), &sensor_statement_body(26, a.counter), &a.signature));
        assert!(!p.verify(&other.public, &sensor_statement_body(25, a.counter), &a.signature));
        let b = d.sensor_read(&p).unwrap();
        assert!(b.counter > a.counter);
        assert_ne!(sensor_statement_body(b.value, b.counter), sensor_statement_body(a.value, a.counter));
    }

    #[test]
    fn keyboard_fifo_and_reset() {
        let mut p = KeyedHashProvider::new(0);
        let mut d = device(&mut p, PeripheralKind::Keyboard, mmio());
        d.inject_key(b'a');
        d.inject_key(b'b');
        assert_eq!(d.keyboard_poll().unwrap(), Some(b'a'));
        assert_eq!(d.keyboard_poll().unwrap(), Some(b'b'));
        assert_eq!(d.keyboard_poll().unwrap(), None);
        d.inject_key(b'c');
        let reset = Frame::new(FrameType::Reset, 0, &[]).unwrap();
        assert!(d.handle_frame(&reset, &p).unwrap().is_empty());
        assert_eq!(d.keyboard_poll().unwrap(), None);
    }

    #[test]
    fn accelerator_sessions_are_isolated() {
        let mut p = KeyedHashProvider::new(0);
        let mut d = device(&mut p, PeripheralKind::Accelerator, Binding::Dma);
        d.accel_open_session(1).unwrap();
        d.accel_open_session(2).unwrap();
        d.accel_submit(1, b"hello").unwrap();
        d.accel_submit(2, b"other data").unwrap();
        d.accel_submit(1, b" world").unwrap();
        assert_eq!(d.accel_result(1).unwrap(), fnv_oracle(b"hello world"));
        assert_eq!(d.accel_result(2).unwrap(), fnv_oracle(b"other data"));
        d.accel_reset(Some(1)).unwrap();
        assert_eq!(d.accel_result(1), Err(PeripheralError::NoSession(1)));
        assert_eq!(d.accel_result(2).unwrap(), fnv_oracle(b"other data"));
        d.accel_reset(None).unwrap();
        assert_eq!(d.session_count(), 0);
    }

    #[test]
    fn dma_reports() {
        let mut p = Ed25519Sha3::new(0);
        let sensor = device(&mut p, PeripheralKind::Sensor, mmio());
        assert_eq!(sensor.report_dma_config(&p).unwrap_err(), PeripheralError::NotDmaCapable);
        let mut acc = device(&mut p, PeripheralKind::Accelerator, Binding::Dma);
        assert_eq!(acc.report_dma_config(&p).unwrap_err(), PeripheralError::NotNegotiated);
        let r = MemRange::new(0x8100_0000, 0x1000).unwrap();
        acc.negotiate_dma(r).unwrap();
        let mut re = Reassembler::default();
        let mut msg = None;
        for f in acc.report_dma_config(&p).unwrap() {
            msg = re.push(&f).unwrap();
        }
        let (range, sig) = parse_dma_config(&msg.unwrap().1).unwrap();
        assert_eq!(range, r);
        assert!(p.verify(&acc.public_key(), &dma_config_body(&r), &sig));
        let lie = MemRange::new(0x8000_0000, 0x1000).unwrap();
        acc.set_lying_dma(Some(lie));
        let mut msg = None;
        for f in acc.report_dma_config(&p).unwrap() {
            msg = re.push(&f).unwrap();
        }
        assert_eq!(parse_dma_config(&msg.unwrap().1).unwrap().0, lie);
    }

    #[test]
    fn echo_over_frames() {
        let mut p = KeyedHashProvider::new(0);
        let mut d = device(&mut p, PeripheralKind::Sensor, mmio());
        let f = Frame::new(FrameType::Data, 0, &[op::ECHO, 1, 2, 3, 4]).unwrap();
        assert_eq!(d.handle_frame(&f, &p).unwrap(), vec![f]);
    }
}
