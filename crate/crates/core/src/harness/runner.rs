// SPDX-License-Identifier: Apache-2.0

//! Scenario execution.
//!
//! One scenario runs on one fresh simulation. Every action is logged to the
//! monitor's trace as a `harness` record carrying its index and result, so
//! the trace alone shows what each step did. Assertion verdicts are appended
//! at the end. For a fixed `(scenario, seed)` the trace is byte-identical
//! across runs: all randomness flows from the seed.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::{json, Value};

use super::scenario::{
    literal_range, parse_hex_bytes, Action, Assertion, Location, PolicySpec, RangeSpec, Scenario, ScenarioInvalid,
};
use crate::attestation::{measure, session, verify_platform, AttestationReport, VerificationPolicy, Verdict};
use crate::crypto::{KeyPair, ProviderKind, PublicKey};
use crate::entity::{EntityId, RegionId};
use crate::monitor::{sm_measurement, EnclaveKind, MonitorConfig, MonitorError, SecurityMonitor};
use crate::peripherals::model::{Binding, Peripheral, PeripheralSpec};
use crate::platform::{load_device_tree, MemRange, PhysAddr};
use crate::progmodel::{CallError, ReplyStatus, System};
use crate::trace::{self, json_subset, record_matches, Trace};

const HARNESS: &str = "harness";

/// Overrides applied on top of the scenario document.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub max_entries: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ActionOutcome {
    pub index: usize,
    pub op: &'static str,
    /// `{"ok": value}` or `{"error": kind, "detail": text}`.
    pub result: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack_detected: Option<bool>,
    /// Bytes returned by read-like actions. Kept out of the trace.
    #[serde(skip)]
    pub bytes: Option<Vec<u8>>,
    /// Wire-encoded attestation reports produced by the action.
    #[serde(skip)]
    pub reports: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AssertionOutcome {
    pub index: usize,
    pub assertion: Value,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub trace: Trace,
    pub outcomes: Vec<ActionOutcome>,
    pub assertions: Vec<AssertionOutcome>,
    /// First structural invariant violation observed, if any.
    pub invariant_violation: Option<String>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.invariant_violation.is_none() && self.assertions.iter().all(|a| a.passed)
    }

    pub fn trace_jsonl(&self) -> String {
        self.trace.to_jsonl()
    }
}

#[derive(Default)]
struct Effect {
    value: Value,
    verdict: Option<Verdict>,
    attack_detected: Option<bool>,
    bytes: Option<Vec<u8>>,
    reports: Vec<AttestationReport>,
}

impl Effect {
    fn value(v: Value) -> Self {
        Effect { value: v, ..Default::default() }
    }
}

struct Failure {
    kind: String,
    detail: String,
}

impl From<MonitorError> for Failure {
    fn from(e: MonitorError) -> Self {
        Failure { kind: e.kind().into(), detail: e.to_string() }
    }
}

impl From<CallError> for Failure {
    fn from(e: CallError) -> Self {
        Failure { kind: e.kind().into(), detail: e.to_string() }
    }
}

#[derive(Clone)]
struct Created {
    id: u32,
    kind: EnclaveKind,
    code: Vec<u8>,
    config: Vec<u8>,
    range: MemRange,
}

struct Attestation {
    ae: u32,
    verdict: Verdict,
    reports: Vec<AttestationReport>,
    nonce: Vec<u8>,
    verifier_secret: [u8; 32],
    verifier_share: [u8; 32],
    policy: VerificationPolicy,
}

struct Runner<'a> {
    sc: &'a Scenario,
    sys: System,
    manufacturers: BTreeMap<String, KeyPair>,
    peripherals: BTreeMap<String, (u32, String)>,
    /// Enclave as first created under each name: what a verifier expects.
    legit: BTreeMap<String, Created>,
    current: BTreeMap<String, Created>,
    regions: BTreeMap<String, RegionId>,
    attestations: BTreeMap<String, Attestation>,
    rng: ChaCha20Rng,
}

fn manufacturer_key(sys: &mut System, name: &str) -> KeyPair {
    let seed = [b"manufacturer:".as_slice(), name.as_bytes()].concat();
    sys.monitor.provider_mut().keygen(&seed)
}

/// Runs a scenario. Fails only if the scenario is invalid; action errors
/// are outcomes, not failures.
pub fn run_scenario(sc: &Scenario, opts: RunOptions) -> Result<RunReport, ScenarioInvalid> {
    sc.validate()?;
    let seed = opts.seed.unwrap_or(sc.seed);
    let mut runner = Runner::boot(sc, seed, opts.max_entries)?;
    let mut outcomes = Vec::with_capacity(sc.actions.len());
    let mut invariant_violation = None;
    for (index, action) in sc.actions.iter().enumerate() {
        let res = runner.apply(action);
        let result = match &res {
            Ok(e) => trace::ok(e.value.clone()),
            Err(f) => trace::err(&f.kind, &f.detail),
        };
        runner.sys.monitor.trace_mut().push(HARNESS, action.op(), json!({ "index": index }), result.clone());
        if invariant_violation.is_none() {
            if let Err(v) = runner.sys.monitor.check_invariants() {
                runner.sys.monitor.trace_mut().push(HARNESS, "invariant", json!({ "index": index }), trace::err("InvariantViolation", &v));
                invariant_violation = Some(format!("after action {index}: {v}"));
            }
        }
        let effect = res.unwrap_or_default();
        outcomes.push(ActionOutcome {
            index,
            op: action.op(),
            result,
            verdict: effect.verdict.map(|v| v.to_string()),
            attack_detected: effect.attack_detected,
            bytes: effect.bytes,
            reports: effect.reports.iter().map(AttestationReport::encode).collect(),
        });
    }
    let mut trace = runner.sys.monitor.trace().clone();
    let assertions: Vec<AssertionOutcome> = sc
        .assertions
        .iter()
        .enumerate()
        .map(|(i, a)| evaluate(i, a, &outcomes, &trace))
        .collect();
    for a in &assertions {
        let result = if a.passed { trace::ok(json!("pass")) } else { trace::err("AssertionFailed", &a.detail) };
        trace.push(HARNESS, "assert", json!({ "index": a.index, "assertion": a.assertion }), result);
    }
    Ok(RunReport { name: sc.name.clone(), seed, trace, outcomes, assertions, invariant_violation })
}

fn evaluate(index: usize, a: &Assertion, outcomes: &[ActionOutcome], trace: &Trace) -> AssertionOutcome {
    let assertion = serde_json::to_value(a).expect("assertion serializes");
    let out = |i: usize| &outcomes[i];
    let (passed, detail) = match a {
        Assertion::ExpectOk { action } => {
            let r = &out(*action).result;
            (r.get("ok").is_some(), format!("action {action} returned {r}"))
        }
        Assertion::ExpectError { action, kind } => {
            let r = &out(*action).result;
            (r.get("error").and_then(Value::as_str) == Some(kind), format!("action {action} returned {r}"))
        }
        Assertion::ExpectVerdict { action, verdict } => {
            let got = &out(*action).verdict;
            (got.as_deref() == Some(verdict), format!("action {action} verdict {got:?}"))
        }
        Assertion::ExpectTraceAbsent { pattern } => match trace.records().iter().find(|r| record_matches(pattern, r)) {
            Some(r) => (false, format!("step {} matches", r.step)),
            None => (true, "no record matches".into()),
        },
        Assertion::ExpectTracePresent { pattern } => match trace.records().iter().find(|r| record_matches(pattern, r)) {
            Some(r) => (true, format!("step {} matches", r.step)),
            None => (false, "no record matches".into()),
        },
        Assertion::ExpectBytes { action, value } => {
            let got = &out(*action).bytes;
            let ok = match (got, value.as_str()) {
                (Some(b), "zeros") => !b.is_empty() && b.iter().all(|x| *x == 0),
                (Some(b), hex) => parse_hex_bytes(hex).is_ok_and(|want| *b == want),
                (None, _) => false,
            };
            (ok, format!("action {action} returned {}", got.as_ref().map_or("no bytes".into(), |b| format!("{} bytes", b.len()))))
        }
        Assertion::ExpectAttackDetected { action } => {
            let got = out(*action).attack_detected;
            (got == Some(true), format!("action {action} attack_detected {got:?}"))
        }
        Assertion::ExpectResult { action, value } => {
            let r = &out(*action).result;
            (json_subset(value, r), format!("action {action} returned {r}"))
        }
    };
    AssertionOutcome { index, assertion, passed, detail }
}

impl<'a> Runner<'a> {
    fn boot(sc: &'a Scenario, seed: u64, max_entries: Option<usize>) -> Result<Self, ScenarioInvalid> {
        let p = &sc.platform;
        let provider = ProviderKind::parse(&p.provider).expect("validated").build(seed);
        let tree = load_device_tree(&p.device_tree.to_string()).map_err(|e| ScenarioInvalid(e.to_string()))?;
        let max_entries = max_entries.unwrap_or(p.max_entries);
        if ![8, 16].contains(&max_entries) {
            return Err(ScenarioInvalid(format!("max_entries must be 8 or 16, got {max_entries}")));
        }
        let monitor = SecurityMonitor::boot(tree, MonitorConfig { max_entries, id_policy: p.id_policy }, provider)
            .map_err(|e| ScenarioInvalid(format!("boot: {e}")))?;
        let mut sys = System::new(monitor, Vec::new());
        let mut manufacturers = BTreeMap::new();
        for name in p.trusted_manufacturers.iter().chain(p.peripherals.iter().map(|d| &d.manufacturer)) {
            if !manufacturers.contains_key(name) {
                let k = manufacturer_key(&mut sys, name);
                manufacturers.insert(name.clone(), k);
            }
        }
        let trusted: Vec<PublicKey> = p.trusted_manufacturers.iter().map(|n| manufacturers[n].public).collect();
        sys = System::new(sys.monitor, trusted);
        let mut peripherals = BTreeMap::new();
        for d in &p.peripherals {
            let binding = match &d.node {
                Some(n) => Binding::Mmio(sys.monitor.device_tree().node(n).expect("validated").range),
                None => Binding::Dma,
            };
            let id = sys.monitor.next_peripheral_id();
            let spec = PeripheralSpec {
                name: d.name.clone(),
                kind: d.kind,
                binding,
                firmware: d.firmware.as_bytes().to_vec(),
                firmware_version: d.firmware_version.clone(),
                terminate_on_ae_death: d.terminate_on_ae_death,
            };
            let model = Peripheral::manufacture(sys.monitor.provider_mut(), id, spec, &manufacturers[&d.manufacturer]);
            sys.monitor.attach_peripheral(model).map_err(|e| ScenarioInvalid(format!("peripheral {:?}: {e}", d.name)))?;
            peripherals.insert(d.name.clone(), (id, d.manufacturer.clone()));
        }
        Ok(Runner {
            sc,
            sys,
            manufacturers,
            peripherals,
            legit: BTreeMap::new(),
            current: BTreeMap::new(),
            regions: BTreeMap::new(),
            attestations: BTreeMap::new(),
            rng: ChaCha20Rng::seed_from_u64(seed ^ 0x7665_7269_6669_6572),
        })
    }

    fn enclave(&self, name: &str) -> u32 {
        self.current[name].id
    }

    fn peripheral(&self, name: &str) -> u32 {
        self.peripherals[name].0
    }

    fn entity(&self, name: &str) -> EntityId {
        match self.peripherals.get(name) {
            Some((id, _)) => EntityId::Peripheral(*id),
            None => EntityId::Enclave(self.enclave(name)),
        }
    }

    fn range(&self, r: &RangeSpec) -> MemRange {
        match r {
            RangeSpec::Literal { base, size } => literal_range(base, *size).expect("validated"),
            RangeSpec::Node { node } => self.sys.monitor.device_tree().node(node).expect("validated").range,
        }
    }

    fn location(&self, l: &Location) -> Result<(PhysAddr, u64), Failure> {
        match l {
            Location::Literal { addr, len } => Ok((PhysAddr(crate::platform::parse_hex_u64(addr).expect("validated")), *len)),
            Location::Named { of, offset, len } => {
                let range = match (self.current.get(of), self.regions.get(of)) {
                    (Some(c), _) => c.range,
                    (None, Some(r)) => self.sys.monitor.region(*r).expect("bound region").range,
                    (None, None) => return Err(Failure { kind: "Unbound".into(), detail: format!("{of:?} not bound yet") }),
                };
                let len = len.unwrap_or(range.size().saturating_sub(*offset));
                Ok((PhysAddr(range.base().0 + offset), len))
            }
        }
    }

    fn nonce(&mut self) -> Vec<u8> {
        let mut n = vec![0u8; crate::attestation::NONCE_LEN];
        self.rng.fill_bytes(&mut n);
        n
    }

    fn policy(&mut self, ae: &str, spec: &PolicySpec) -> VerificationPolicy {
        let legit = &self.legit[ae];
        let code = spec.ae_code.as_ref().map_or(legit.code.clone(), |c| c.as_bytes().to_vec());
        let config = spec.ae_config.as_ref().map_or(legit.config.clone(), |c| c.as_bytes().to_vec());
        let provider = self.sys.monitor.provider();
        let ae_measurement = Some(measure(provider, &code, &config));
        let ce_measurements = self
            .legit
            .values()
            .filter(|c| c.kind == EnclaveKind::Controller)
            .map(|c| measure(provider, &c.code, &c.config))
            .collect();
        let sm = Some(sm_measurement(provider));
        let platform_key = match &spec.platform_key_seed {
            Some(s) => self.sys.monitor.provider_mut().keygen(s.as_bytes()).public,
            None => self.sys.monitor.platform_public_key(),
        };
        let names = spec.manufacturers.clone().unwrap_or_else(|| self.sc.platform.trusted_manufacturers.clone());
        let mut manufacturer_keys = Vec::new();
        for n in names {
            let k = match self.manufacturers.get(&n) {
                Some(k) => k.public,
                None => manufacturer_key(&mut self.sys, &n).public,
            };
            manufacturer_keys.push(k);
        }
        let firmware_versions = spec.firmware_versions.clone().unwrap_or_else(|| {
            self.sc.platform.peripherals.iter().map(|d| d.firmware_version.clone()).collect()
        });
        VerificationPolicy {
            ae_measurement,
            ce_measurements,
            sm_measurement: sm,
            platform_key: Some(platform_key),
            manufacturer_keys,
            firmware_versions,
        }
    }

    /// Report of a listed enclave: a controller refreshes its evidence, any
    /// other enclave is attested bare.
    fn report_of(&mut self, id: u32) -> Result<(AttestationReport, Vec<u8>), Failure> {
        let nonce = self.nonce();
        let report = if self.sys.controller(id).is_some() {
            self.sys.ce_attest(id, &nonce)?
        } else {
            self.sys.monitor.attest_enclave(id, &nonce, b"", Vec::new())?
        };
        Ok((report, nonce))
    }

    fn apply(&mut self, action: &Action) -> Result<Effect, Failure> {
        match action {
            Action::CreateEnclave { name, kind, code, config, range } => {
                let range = self.range(range);
                let id = self.sys.create_enclave(code.as_bytes(), config.as_bytes(), range, *kind)?;
                let c = Created { id, kind: *kind, code: code.as_bytes().to_vec(), config: config.as_bytes().to_vec(), range };
                self.legit.entry(name.clone()).or_insert_with(|| c.clone());
                self.current.insert(name.clone(), c);
                Ok(Effect::value(json!({ "id": EntityId::Enclave(id) })))
            }
            Action::DestroyEnclave { enclave } => {
                let id = self.enclave(enclave);
                self.sys.destroy_enclave(id)?;
                Ok(Effect::default())
            }
            Action::Connect { name, a, b, range } => {
                let (a, b, range) = (self.entity(a), self.entity(b), self.range(range));
                let region = self.sys.monitor.connect(a, b, range)?;
                if let Some(n) = name {
                    self.regions.insert(n.clone(), region);
                }
                Ok(Effect::value(json!({ "region": region })))
            }
            Action::SyncDisconnect { region } => {
                let r = *self.regions.get(region).ok_or_else(|| Failure { kind: "Unbound".into(), detail: region.clone() })?;
                self.sys.monitor.sync_disconnect(r)?;
                Ok(Effect::default())
            }
            Action::OsRead { at } => {
                let (addr, len) = self.location(at)?;
                let bytes = self.sys.monitor.checked_read(addr, len)?;
                Ok(Effect { value: json!({ "bytes": hex::encode(&bytes) }), bytes: Some(bytes), ..Default::default() })
            }
            Action::OsWrite { at, data } => {
                let (addr, _) = self.location(at)?;
                let data = parse_hex_bytes(data).expect("validated");
                self.sys.monitor.checked_write(addr, &data)?;
                Ok(Effect::value(json!({ "len": data.len() })))
            }
            Action::Schedule { enclave } => {
                let id = self.enclave(enclave);
                self.sys.schedule(id)?;
                Ok(Effect::default())
            }
            Action::NegotiateDma { peripheral, range } => {
                let (p, range) = (self.peripheral(peripheral), self.range(range));
                self.sys.monitor.negotiate_dma(p, range)?;
                Ok(Effect::default())
            }
            Action::EnclaveRead { enclave, at } => {
                let id = self.enclave(enclave);
                let (addr, len) = self.location(at)?;
                let bytes = self.sys.in_enclave(id, |s| s.monitor.checked_read(addr, len))??;
                Ok(Effect { value: json!({ "len": bytes.len() }), bytes: Some(bytes), ..Default::default() })
            }
            Action::EnclaveWrite { enclave, at, data } => {
                let id = self.enclave(enclave);
                let (addr, _) = self.location(at)?;
                let data = parse_hex_bytes(data).expect("validated");
                self.sys.in_enclave(id, |s| s.monitor.checked_write(addr, &data))??;
                Ok(Effect::value(json!({ "len": data.len() })))
            }
            Action::SetSensor { peripheral, value } => {
                let p = self.peripheral(peripheral);
                self.sys.monitor.peripheral_mut(p).ok_or(MonitorError::UnknownPeripheral(p))?.model.set_sensor(*value);
                Ok(Effect::default())
            }
            Action::InjectKey { peripheral, key } => {
                let p = self.peripheral(peripheral);
                self.sys.monitor.peripheral_mut(p).ok_or(MonitorError::UnknownPeripheral(p))?.model.inject_key(*key);
                Ok(Effect::default())
            }
            Action::Unplug { peripheral } => {
                let p = self.peripheral(peripheral);
                self.sys.monitor.unplug(p)?;
                Ok(Effect::default())
            }
            Action::Replug { peripheral, firmware, firmware_version } => {
                let (p, maker) = self.peripherals[peripheral].clone();
                let model = match firmware {
                    Some(fw) => {
                        let mut m = self.sys.monitor.peripheral(p).ok_or(MonitorError::UnknownPeripheral(p))?.model.clone();
                        let version = firmware_version.clone().unwrap_or_else(|| m.certificate().firmware_version.clone());
                        m.reflash(self.sys.monitor.provider(), &self.manufacturers[&maker], fw.as_bytes().to_vec(), &version);
                        Some(m)
                    }
                    None => None,
                };
                self.sys.monitor.replug(p, model)?;
                Ok(Effect::default())
            }
            Action::LieDma { peripheral, range } => {
                let (p, range) = (self.peripheral(peripheral), self.range(range));
                self.sys.monitor.peripheral_mut(p).ok_or(MonitorError::UnknownPeripheral(p))?.model.set_lying_dma(Some(range));
                Ok(Effect::default())
            }
            Action::DmaRead { peripheral, at } => {
                let p = self.peripheral(peripheral);
                let (addr, len) = self.location(at)?;
                let bytes = self.sys.monitor.peripheral_access(p, addr, len, None)?;
                Ok(Effect { value: json!({ "len": bytes.len() }), bytes: Some(bytes), ..Default::default() })
            }
            Action::VerifyDma { ce, peripheral, range } => {
                let (ce, p, range) = (self.enclave(ce), self.peripheral(peripheral), self.range(range));
                self.sys.in_enclave(ce, |s| s.monitor.verify_dma_region(p, ce, range))??;
                Ok(Effect::value(json!("Verified")))
            }
            Action::CeAttach { ce, peripheral } => {
                let (ce, p) = (self.enclave(ce), self.peripheral(peripheral));
                match self.sys.ce_attach_peripheral(ce, p)? {
                    Ok(()) => Ok(Effect::value(json!("Attested"))),
                    Err(f) => Err(Failure { kind: f.to_string(), detail: "local attestation failed".into() }),
                }
            }
            Action::AeCall { ae, ce, request } => {
                let (ae, ce) = (self.enclave(ae), self.enclave(ce));
                let mut payload = vec![request.op.code()];
                payload.extend(parse_hex_bytes(&request.data).expect("validated"));
                let reply = self.sys.ae_call(ae, ce, &payload)?;
                if reply.status != ReplyStatus::Ok {
                    return Err(Failure { kind: format!("{:?}", reply.status), detail: format!("request {}", reply.id) });
                }
                Ok(Effect { value: json!({ "len": reply.data.len() }), bytes: Some(reply.data), ..Default::default() })
            }
            Action::Attest { name, ae, policy } => {
                let id = self.enclave(ae);
                let nonce = self.nonce();
                let mut seed = [0u8; 32];
                self.rng.fill_bytes(&mut seed);
                let (verifier_secret, verifier_share) = session::keypair(seed);
                let report = self.sys.ae_attest(id, &nonce)?;
                let mut reports = vec![report.clone()];
                let mut nonces = vec![nonce.clone()];
                for ce in report.connected_ids.iter().filter_map(|e| e.enclave_id()) {
                    let (r, n) = self.report_of(ce)?;
                    reports.push(r);
                    nonces.push(n);
                }
                let policy = self.policy(ae, policy);
                let verdict = verify_platform(self.sys.monitor.provider(), &reports, &policy, &nonces);
                self.attestations.insert(
                    name.clone(),
                    Attestation { ae: id, verdict, reports: reports.clone(), nonce, verifier_secret, verifier_share, policy },
                );
                Ok(Effect {
                    value: json!({ "verdict": verdict.to_string(), "reports": reports.len() }),
                    verdict: Some(verdict),
                    reports,
                    ..Default::default()
                })
            }
            Action::ProvisionSecret { attestation } => {
                let a = &self.attestations[attestation];
                if a.verdict != Verdict::Accept {
                    return Err(Failure { kind: "NotAccepted".into(), detail: format!("verdict {}", a.verdict) });
                }
                let share: [u8; 32] = a.reports[0].report_data.as_slice().try_into().map_err(|_| Failure {
                    kind: "NoKeyShare".into(),
                    detail: "report carries no key share".into(),
                })?;
                let (ae, nonce, vs, vp) = (a.ae, a.nonce.clone(), a.verifier_secret, a.verifier_share);
                let key = session::derive(self.sys.monitor.provider(), vs, share, &nonce);
                let mut token = vec![0u8; 16];
                self.rng.fill_bytes(&mut token);
                let sealed = session::seal(self.sys.monitor.provider(), &key, &token);
                let opened = self.sys.ae_receive_secret(ae, vp, &nonce, &sealed)?;
                let recovered = opened.as_deref() == Some(token.as_slice());
                Ok(Effect {
                    value: json!({ "recovered": recovered, "attack_detected": !recovered }),
                    attack_detected: Some(!recovered),
                    ..Default::default()
                })
            }
            Action::Relaunch { enclave, code, config } => {
                let old = self.current[enclave].clone();
                self.sys.destroy_enclave(old.id)?;
                let code = code.as_ref().map_or(old.code.clone(), |c| c.as_bytes().to_vec());
                let config = config.as_ref().map_or(old.config.clone(), |c| c.as_bytes().to_vec());
                let id = self.sys.create_enclave(&code, &config, old.range, old.kind)?;
                self.current.insert(enclave.clone(), Created { id, code, config, ..old });
                Ok(Effect::value(json!({
                    "old": EntityId::Enclave(old.id),
                    "new": EntityId::Enclave(id),
                    "same_id": id == old.id,
                })))
            }
            Action::ReplayReport { attestation } => {
                let a = &self.attestations[attestation];
                let (reports, policy) = (a.reports.clone(), a.policy.clone());
                let nonces: Vec<Vec<u8>> = reports.iter().map(|_| self.nonce()).collect();
                let verdict = verify_platform(self.sys.monitor.provider(), &reports, &policy, &nonces);
                Ok(Effect { value: json!({ "verdict": verdict.to_string() }), verdict: Some(verdict), ..Default::default() })
            }
            Action::RelayAttest { ae, ces, policy } => {
                let id = self.enclave(ae);
                let nonce = self.nonce();
                let mut reports = vec![self.sys.ae_attest(id, &nonce)?];
                let mut nonces = vec![nonce];
                for c in ces {
                    let (r, n) = self.report_of(self.enclave(c))?;
                    reports.push(r);
                    nonces.push(n);
                }
                let policy = self.policy(ae, policy);
                let verdict = verify_platform(self.sys.monitor.provider(), &reports, &policy, &nonces);
                Ok(Effect {
                    value: json!({ "verdict": verdict.to_string() }),
                    verdict: Some(verdict),
                    reports,
                    ..Default::default()
                })
            }
        }
    }
}
