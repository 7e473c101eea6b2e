// SPDX-License-Identifier: Apache-2.0

//! Scenario documents.
//!
//! A scenario is a JSON object: a platform description, an ordered list of
//! actions and a list of assertions over the outcome. Entities are named
//! symbolically; names are bound by the platform (peripherals) or by the
//! action that creates them (enclaves, regions, attestations). Assertions
//! refer to actions by their zero-based index. The full schema is in the
//! repository README.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::monitor::{EnclaveKind, IdPolicy};
use crate::peripherals::model::PeripheralKind;
use crate::platform::{parse_hex_u64, MemRange};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("scenario invalid: {0}")]
pub struct ScenarioInvalid(pub String);

fn invalid(msg: impl Into<String>) -> ScenarioInvalid {
    ScenarioInvalid(msg.into())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioClass {
    #[default]
    Benign,
    Attack,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub class: ScenarioClass,
    #[serde(default)]
    pub seed: u64,
    pub platform: PlatformSpec,
    pub actions: Vec<Action>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

fn default_max_entries() -> usize {
    crate::pmp::DEFAULT_MAX_ENTRIES
}

fn default_provider() -> String {
    "ed25519".into()
}

fn default_trusted() -> Vec<String> {
    vec!["acme".into()]
}

fn default_manufacturer() -> String {
    "acme".into()
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformSpec {
    #[serde(default = "default_max_entries")]
    pub max_entries: usize,
    #[serde(default)]
    pub id_policy: IdPolicy,
    #[serde(default = "default_provider")]
    pub provider: String,
    /// Device-tree document, `{"nodes": [...]}`.
    pub device_tree: Value,
    #[serde(default)]
    pub peripherals: Vec<PeripheralDef>,
    /// Manufacturers whose certificates controller enclaves and verifiers trust.
    #[serde(default = "default_trusted")]
    pub trusted_manufacturers: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeripheralDef {
    pub name: String,
    pub kind: PeripheralKind,
    /// Device-tree node of an MMIO device; absent for a DMA device.
    #[serde(default)]
    pub node: Option<String>,
    pub firmware: String,
    pub firmware_version: String,
    #[serde(default = "default_manufacturer")]
    pub manufacturer: String,
    #[serde(default = "yes")]
    pub terminate_on_ae_death: bool,
}

/// A literal range or the range of a device-tree node.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum RangeSpec {
    Literal { base: String, size: u64 },
    Node { node: String },
}

/// An address window: literal, or relative to a named enclave's private
/// range or a named region. `len` defaults to the rest of the named range.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Location {
    Literal {
        addr: String,
        len: u64,
    },
    Named {
        of: String,
        #[serde(default)]
        offset: u64,
        #[serde(default)]
        len: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestOp {
    Echo,
    SensorRead,
    KeyPoll,
    AccelOpen,
    AccelSubmit,
    AccelResult,
    AccelReset,
}

impl RequestOp {
    pub fn code(self) -> u8 {
        use crate::peripherals::model::op;
        match self {
            RequestOp::Echo => op::ECHO,
            RequestOp::SensorRead => op::SENSOR_READ,
            RequestOp::KeyPoll => op::KEY_POLL,
            RequestOp::AccelOpen => op::ACCEL_OPEN,
            RequestOp::AccelSubmit => op::ACCEL_SUBMIT,
            RequestOp::AccelResult => op::ACCEL_RESULT,
            RequestOp::AccelReset => op::ACCEL_RESET,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestSpec {
    pub op: RequestOp,
    /// Hex-encoded arguments.
    #[serde(default)]
    pub data: String,
}

/// Verifier expectations. Every field defaults to the honest value: the
/// measurements of the enclaves as first created under their names, the
/// device platform key, the trusted manufacturers and the firmware versions
/// of the platform's peripheral definitions.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    #[serde(default)]
    pub ae_code: Option<String>,
    #[serde(default)]
    pub ae_config: Option<String>,
    #[serde(default)]
    pub firmware_versions: Option<Vec<String>>,
    #[serde(default)]
    pub manufacturers: Option<Vec<String>>,
    /// Key-generation seed of the platform key the verifier expects.
    #[serde(default)]
    pub platform_key_seed: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "op", deny_unknown_fields)]
pub enum Action {
    #[serde(rename = "os.create_enclave")]
    CreateEnclave {
        name: String,
        kind: EnclaveKind,
        code: String,
        #[serde(default)]
        config: String,
        range: RangeSpec,
    },
    #[serde(rename = "os.destroy_enclave")]
    DestroyEnclave { enclave: String },
    #[serde(rename = "os.connect")]
    Connect {
        #[serde(default)]
        name: Option<String>,
        a: String,
        b: String,
        range: RangeSpec,
    },
    #[serde(rename = "os.sync_disconnect")]
    SyncDisconnect { region: String },
    #[serde(rename = "os.read")]
    OsRead { at: Location },
    #[serde(rename = "os.write")]
    OsWrite { at: Location, data: String },
    #[serde(rename = "os.schedule")]
    Schedule { enclave: String },
    #[serde(rename = "os.negotiate_dma")]
    NegotiateDma { peripheral: String, range: RangeSpec },
    #[serde(rename = "enclave.read")]
    EnclaveRead { enclave: String, at: Location },
    #[serde(rename = "enclave.write")]
    EnclaveWrite { enclave: String, at: Location, data: String },
    #[serde(rename = "env.set_sensor")]
    SetSensor { peripheral: String, value: i16 },
    #[serde(rename = "env.inject_key")]
    InjectKey { peripheral: String, key: u8 },
    #[serde(rename = "env.unplug")]
    Unplug { peripheral: String },
    #[serde(rename = "env.replug")]
    Replug {
        peripheral: String,
        #[serde(default)]
        firmware: Option<String>,
        #[serde(default)]
        firmware_version: Option<String>,
    },
    #[serde(rename = "periph.lie_dma")]
    LieDma { peripheral: String, range: RangeSpec },
    #[serde(rename = "periph.dma_read")]
    DmaRead { peripheral: String, at: Location },
    #[serde(rename = "ce.verify_dma")]
    VerifyDma { ce: String, peripheral: String, range: RangeSpec },
    #[serde(rename = "ce.attach")]
    CeAttach { ce: String, peripheral: String },
    #[serde(rename = "ae.call")]
    AeCall { ae: String, ce: String, request: RequestSpec },
    #[serde(rename = "verifier.attest")]
    Attest {
        name: String,
        ae: String,
        #[serde(default)]
        policy: PolicySpec,
    },
    #[serde(rename = "verifier.provision_secret")]
    ProvisionSecret { attestation: String },
    #[serde(rename = "adversary.relaunch_with_same_id")]
    Relaunch {
        enclave: String,
        #[serde(default)]
        code: Option<String>,
        #[serde(default)]
        config: Option<String>,
    },
    #[serde(rename = "adversary.replay_report")]
    ReplayReport { attestation: String },
    #[serde(rename = "adversary.relay_attest")]
    RelayAttest {
        ae: String,
        ces: Vec<String>,
        #[serde(default)]
        policy: PolicySpec,
    },
}

impl Action {
    pub fn op(&self) -> &'static str {
        match self {
            Action::CreateEnclave { .. } => "os.create_enclave",
            Action::DestroyEnclave { .. } => "os.destroy_enclave",
            Action::Connect { .. } => "os.connect",
            Action::SyncDisconnect { .. } => "os.sync_disconnect",
            Action::OsRead { .. } => "os.read",
            Action::OsWrite { .. } => "os.write",
            Action::Schedule { .. } => "os.schedule",
            Action::NegotiateDma { .. } => "os.negotiate_dma",
            Action::EnclaveRead { .. } => "enclave.read",
            Action::EnclaveWrite { .. } => "enclave.write",
            Action::SetSensor { .. } => "env.set_sensor",
            Action::InjectKey { .. } => "env.inject_key",
            Action::Unplug { .. } => "env.unplug",
            Action::Replug { .. } => "env.replug",
            Action::LieDma { .. } => "periph.lie_dma",
            Action::DmaRead { .. } => "periph.dma_read",
            Action::VerifyDma { .. } => "ce.verify_dma",
            Action::CeAttach { .. } => "ce.attach",
            Action::AeCall { .. } => "ae.call",
            Action::Attest { .. } => "verifier.attest",
            Action::ProvisionSecret { .. } => "verifier.provision_secret",
            Action::Relaunch { .. } => "adversary.relaunch_with_same_id",
            Action::ReplayReport { .. } => "adversary.replay_report",
            Action::RelayAttest { .. } => "adversary.relay_attest",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    ExpectOk { action: usize },
    ExpectError { action: usize, kind: String },
    /// `verdict` is `Accept` or a reject reason name.
    ExpectVerdict { action: usize, verdict: String },
    /// No trace record matches `pattern` (a JSON subset).
    ExpectTraceAbsent { pattern: Value },
    ExpectTracePresent { pattern: Value },
    /// Bytes returned by a read action: hex, or `"zeros"`.
    ExpectBytes { action: usize, value: String },
    ExpectAttackDetected { action: usize },
    /// The action's result record contains `value` as a JSON subset.
    ExpectResult { action: usize, value: Value },
}

impl Assertion {
    pub fn action(&self) -> Option<usize> {
        match self {
            Assertion::ExpectOk { action }
            | Assertion::ExpectError { action, .. }
            | Assertion::ExpectVerdict { action, .. }
            | Assertion::ExpectBytes { action, .. }
            | Assertion::ExpectAttackDetected { action }
            | Assertion::ExpectResult { action, .. } => Some(*action),
            Assertion::ExpectTraceAbsent { .. } | Assertion::ExpectTracePresent { .. } => None,
        }
    }
}

pub fn parse_hex_bytes(s: &str) -> Result<Vec<u8>, ScenarioInvalid> {
    hex::decode(s.trim_start_matches("0x")).map_err(|e| invalid(format!("bad hex {s:?}: {e}")))
}

pub fn literal_range(base: &str, size: u64) -> Result<MemRange, ScenarioInvalid> {
    let base = parse_hex_u64(base).map_err(|e| invalid(e.to_string()))?;
    MemRange::new(base, size).map_err(|e| invalid(format!("bad range: {e}")))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum NameKind {
    Enclave,
    Peripheral,
    Region,
    Attestation,
}

impl Scenario {
    pub fn from_json(doc: &str) -> Result<Scenario, ScenarioInvalid> {
        let s: Scenario = serde_json::from_str(doc).map_err(|e| invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Static checks: every name is bound before use and has the right
    /// kind, hex fields decode, and assertions point at existing actions.
    pub fn validate(&self) -> Result<(), ScenarioInvalid> {
        if ![8, 16].contains(&self.platform.max_entries) {
            return Err(invalid(format!("max_entries must be 8 or 16, got {}", self.platform.max_entries)));
        }
        if crate::crypto::ProviderKind::parse(&self.platform.provider).is_none() {
            return Err(invalid(format!("unknown provider {:?}", self.platform.provider)));
        }
        let tree = crate::platform::load_device_tree(&self.platform.device_tree.to_string())
            .map_err(|e| invalid(format!("device tree: {e}")))?;
        let mut names: Vec<(String, NameKind)> = Vec::new();
        let bind = |names: &mut Vec<(String, NameKind)>, n: &str, k: NameKind| -> Result<(), ScenarioInvalid> {
            if names.iter().any(|(m, _)| m == n) {
                return Err(invalid(format!("name {n:?} bound twice")));
            }
            names.push((n.to_string(), k));
            Ok(())
        };
        for p in &self.platform.peripherals {
            bind(&mut names, &p.name, NameKind::Peripheral)?;
            if let Some(node) = &p.node {
                if tree.node(node).is_none_or(|n| !n.kind.is_mmio()) {
                    return Err(invalid(format!("peripheral {:?}: {node:?} is not an MMIO node", p.name)));
                }
            }
        }
        let check_range = |r: &RangeSpec| -> Result<(), ScenarioInvalid> {
            match r {
                RangeSpec::Literal { base, size } => literal_range(base, *size).map(|_| ()),
                RangeSpec::Node { node } if tree.node(node).is_some() => Ok(()),
                RangeSpec::Node { node } => Err(invalid(format!("unknown device-tree node {node:?}"))),
            }
        };
        for (i, a) in self.actions.iter().enumerate() {
            let want = |names: &Vec<(String, NameKind)>, n: &str, kinds: &[NameKind]| -> Result<(), ScenarioInvalid> {
                match names.iter().find(|(m, _)| m == n) {
                    Some((_, k)) if kinds.contains(k) => Ok(()),
                    Some((_, k)) => Err(invalid(format!("action {i}: {n:?} is a {k:?}, expected {kinds:?}"))),
                    None => Err(invalid(format!("action {i}: {n:?} is not bound"))),
                }
            };
            let loc = |names: &Vec<(String, NameKind)>, l: &Location| -> Result<(), ScenarioInvalid> {
                match l {
                    Location::Literal { addr, .. } => parse_hex_u64(addr).map(|_| ()).map_err(|e| invalid(e.to_string())),
                    Location::Named { of, .. } => want(names, of, &[NameKind::Enclave, NameKind::Region]),
                }
            };
            use NameKind::*;
            match a {
                Action::CreateEnclave { name, range, .. } => {
                    check_range(range)?;
                    bind(&mut names, name, Enclave)?;
                }
                Action::DestroyEnclave { enclave } | Action::Schedule { enclave } => want(&names, enclave, &[Enclave])?,
                Action::Relaunch { enclave, .. } => want(&names, enclave, &[Enclave])?,
                Action::Connect { name, a, b, range } => {
                    want(&names, a, &[Enclave, Peripheral])?;
                    want(&names, b, &[Enclave, Peripheral])?;
                    check_range(range)?;
                    if let Some(n) = name {
                        bind(&mut names, n, Region)?;
                    }
                }
                Action::SyncDisconnect { region } => want(&names, region, &[Region])?,
                Action::OsRead { at } => loc(&names, at)?,
                Action::OsWrite { at, data } => {
                    loc(&names, at)?;
                    parse_hex_bytes(data)?;
                }
                Action::EnclaveRead { enclave, at } => {
                    want(&names, enclave, &[Enclave])?;
                    loc(&names, at)?;
                }
                Action::EnclaveWrite { enclave, at, data } => {
                    want(&names, enclave, &[Enclave])?;
                    loc(&names, at)?;
                    parse_hex_bytes(data)?;
                }
                Action::NegotiateDma { peripheral, range } | Action::LieDma { peripheral, range } => {
                    want(&names, peripheral, &[Peripheral])?;
                    check_range(range)?;
                }
                Action::SetSensor { peripheral, .. }
                | Action::InjectKey { peripheral, .. }
                | Action::Unplug { peripheral }
                | Action::Replug { peripheral, .. } => want(&names, peripheral, &[Peripheral])?,
                Action::DmaRead { peripheral, at } => {
                    want(&names, peripheral, &[Peripheral])?;
                    loc(&names, at)?;
                }
                Action::VerifyDma { ce, peripheral, range } => {
                    want(&names, ce, &[Enclave])?;
                    want(&names, peripheral, &[Peripheral])?;
                    check_range(range)?;
                }
                Action::CeAttach { ce, peripheral } => {
                    want(&names, ce, &[Enclave])?;
                    want(&names, peripheral, &[Peripheral])?;
                }
                Action::AeCall { ae, ce, request } => {
                    want(&names, ae, &[Enclave])?;
                    want(&names, ce, &[Enclave])?;
                    parse_hex_bytes(&request.data)?;
                }
                Action::Attest { name, ae, .. } => {
                    want(&names, ae, &[Enclave])?;
                    bind(&mut names, name, Attestation)?;
                }
                Action::ProvisionSecret { attestation } | Action::ReplayReport { attestation } => {
                    want(&names, attestation, &[Attestation])?
                }
                Action::RelayAttest { ae, ces, .. } => {
                    want(&names, ae, &[Enclave])?;
                    for c in ces {
                        want(&names, c, &[Enclave])?;
                    }
                }
            }
        }
        let ops: BTreeSet<usize> = (0..self.actions.len()).collect();
        for (i, a) in self.assertions.iter().enumerate() {
            if let Some(idx) = a.action() {
                if !ops.contains(&idx) {
                    return Err(invalid(format!("assertion {i} refers to missing action {idx}")));
                }
            }
            match a {
                Assertion::ExpectBytes { value, .. } if value != "zeros" => {
                    parse_hex_bytes(value)?;
                }
                Assertion::ExpectVerdict { verdict, .. }
                    if verdict != "Accept" && crate::attestation::RejectReason::parse(verdict).is_none() =>
                {
                    return Err(invalid(format!("assertion {i}: unknown verdict {verdict:?}")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}
