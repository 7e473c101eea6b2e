// SPDX-License-Identifier: Apache-2.0

//! Seeded isolation fuzzer.
//!
//! Drives the monitor with random OS, enclave and environment actions and
//! checks two oracles after every step:
//!
//! * taint: an OS read never returns a byte an enclave wrote, at the address
//!   it wrote it, unless the OS overwrote that byte itself since. Enclaves
//!   only write non-zero bytes, so zero-filled memory never matches.
//! * protection: no OS-context access recorded in the trace as allowed
//!   touches the monitor range, a live private range or a region that is
//!   not freed. The set of protected ranges is tracked from the results of
//!   the fuzzer's own calls, independently of the monitor's bookkeeping.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::crypto::ProviderKind;
use crate::entity::{EntityId, RegionId};
use crate::monitor::{EnclaveKind, IdPolicy, MonitorConfig, SecurityMonitor};
use crate::peripherals::model::{Binding, Peripheral, PeripheralKind, PeripheralSpec};
use crate::platform::{load_device_tree, parse_hex_u64, MemRange, PhysAddr};
use crate::trace::TraceRecord;

const DRAM_BASE: u64 = 0x8000_0000;
const SLOT: u64 = 0x1_0000;
const FIRST_SLOT: u64 = DRAM_BASE + 0x20_0000;
const SLOTS: u64 = 64;
const MMIO: u64 = 0x1001_0000;

const TREE: &str = r#"{"nodes": [
    {"name": "dram", "kind": "dram", "base": "0x80000000", "size": 16777216, "model": "ddr"},
    {"name": "spi0", "kind": "mmio-peripheral", "base": "0x10010000", "size": 4096, "model": "sensor"}
]}"#;

#[derive(Clone, Debug, Default)]
pub struct FuzzReport {
    pub seed: u64,
    pub steps: usize,
    pub successful_ops: usize,
    pub os_reads_allowed: usize,
    pub violations: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Holder {
    Shared(EntityId, EntityId),
    Sole(EntityId),
}

struct Model {
    private: BTreeMap<u32, MemRange>,
    regions: BTreeMap<RegionId, (MemRange, Holder)>,
    sm: MemRange,
}

impl Model {
    fn protected(&self, addr: u64, len: u64) -> Option<String> {
        if self.sm.intersects_access(addr, len) {
            return Some("monitor memory".into());
        }
        if let Some((id, _)) = self.private.iter().find(|(_, r)| r.intersects_access(addr, len)) {
            return Some(format!("private memory of E{id}"));
        }
        self.regions.iter().find(|(_, (r, _))| r.intersects_access(addr, len)).map(|(id, _)| format!("region {id}"))
    }

    fn on_destroy(&mut self, id: u32) {
        let dead = EntityId::Enclave(id);
        self.private.remove(&id);
        self.regions.retain(|_, (_, h)| match *h {
            Holder::Sole(o) => o != dead,
            Holder::Shared(a, b) if a == dead || b == dead => {
                let survivor = if a == dead { b } else { a };
                if matches!(survivor, EntityId::Peripheral(_)) {
                    return false;
                }
                *h = Holder::Sole(survivor);
                true
            }
            Holder::Shared(..) => true,
        });
    }

    fn on_unplug(&mut self, p: u32) {
        let gone = EntityId::Peripheral(p);
        for (_, h) in self.regions.values_mut() {
            if let Holder::Shared(a, b) = *h {
                if a == gone {
                    *h = Holder::Sole(b);
                } else if b == gone {
                    *h = Holder::Sole(a);
                }
            }
        }
    }
}

fn slot_range(rng: &mut ChaCha20Rng) -> MemRange {
    let k = rng.gen_range(0..SLOTS);
    let size = if rng.gen_bool(0.5) { 0x1000 } else { SLOT * rng.gen_range(1..=2) };
    MemRange::new(FIRST_SLOT + k * SLOT, size).expect("nonzero")
}

/// Runs `steps` random actions under `seed` and reports oracle violations.
pub fn fuzz(seed: u64, steps: usize, max_entries: usize) -> FuzzReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let tree = load_device_tree(TREE).expect("fuzz tree");
    let policy = if seed.is_multiple_of(2) { IdPolicy::Monotonic } else { IdPolicy::Reuse };
    let mut provider = ProviderKind::KeyedHash.build(seed);
    let maker = provider.keygen(b"manufacturer:fuzz");
    let mut m = SecurityMonitor::boot(tree, MonitorConfig { max_entries, id_policy: policy }, provider).expect("boot");
    let spec = PeripheralSpec {
        name: "sensor".into(),
        kind: PeripheralKind::Sensor,
        binding: Binding::Mmio(MemRange::new(MMIO, 0x1000).expect("range")),
        firmware: b"fw".to_vec(),
        firmware_version: "1.0".into(),
        terminate_on_ae_death: true,
    };
    let dev = Peripheral::manufacture(m.provider_mut(), 1, spec, &maker);
    m.attach_peripheral(dev).expect("attach");

    let mut model = Model { private: BTreeMap::new(), regions: BTreeMap::new(), sm: m.sm_range() };
    let mut taint: HashMap<u64, u8> = HashMap::new();
    let mut report = FuzzReport { seed, steps, ..Default::default() };
    let mut ever: Vec<MemRange> = vec![m.sm_range()];
    let mut max_region = 0u32;

    for step in 0..steps {
        let roll = rng.gen_range(0..100);
        let live: Vec<u32> = model.private.keys().copied().collect();
        let pick_enclave = |rng: &mut ChaCha20Rng| -> u32 {
            if !live.is_empty() && rng.gen_bool(0.9) {
                live[rng.gen_range(0..live.len())]
            } else {
                rng.gen_range(1..40)
            }
        };
        let ok = match roll {
            0..=11 => {
                let range = slot_range(&mut rng);
                let kind = if rng.gen_bool(0.5) { EnclaveKind::Application } else { EnclaveKind::Controller };
                let res = m.create_enclave(b"fuzz", &step.to_be_bytes(), range, kind);
                if let Ok(id) = res {
                    model.private.insert(id.enclave_id().expect("enclave"), range);
                    ever.push(range);
                }
                res.is_ok()
            }
            12..=17 => {
                let id = pick_enclave(&mut rng);
                let res = m.destroy_enclave(id);
                if res.is_ok() {
                    model.on_destroy(id);
                }
                res.is_ok()
            }
            18..=31 => {
                let a = EntityId::Enclave(pick_enclave(&mut rng));
                let (b, range) = if rng.gen_bool(0.2) {
                    (EntityId::Peripheral(1), MemRange::new(MMIO, 0x1000).expect("range"))
                } else {
                    (EntityId::Enclave(pick_enclave(&mut rng)), slot_range(&mut rng))
                };
                let res = m.connect(a, b, range);
                if let Ok(r) = res {
                    model.regions.insert(r, (range, Holder::Shared(a, b)));
                    max_region = max_region.max(r.0);
                    ever.push(range);
                }
                res.is_ok()
            }
            32..=37 => {
                let r = RegionId(rng.gen_range(1..=max_region + 1));
                let res = m.sync_disconnect(r);
                if res.is_ok() {
                    model.regions.remove(&r);
                }
                res.is_ok()
            }
            38..=59 => {
                // An enclave writes a secret into memory it can reach, or tries elsewhere.
                let id = pick_enclave(&mut rng);
                if m.enter_enclave(id).is_err() {
                    false
                } else {
                    let target = {
                        let me = EntityId::Enclave(id);
                        let mut mine: Vec<MemRange> = model.private.get(&id).into_iter().copied().collect();
                        mine.extend(model.regions.values().filter_map(|(r, h)| match *h {
                            Holder::Shared(a, b) if a == me || b == me => Some(*r),
                            Holder::Sole(o) if o == me => Some(*r),
                            _ => None,
                        }));
                        if !mine.is_empty() && rng.gen_bool(0.85) {
                            mine[rng.gen_range(0..mine.len())]
                        } else {
                            ever[rng.gen_range(0..ever.len())]
                        }
                    };
                    let len = rng.gen_range(1..=16u64).min(target.size());
                    let addr = target.base().0 + rng.gen_range(0..=target.size() - len);
                    let data: Vec<u8> = (0..len).map(|_| rng.gen_range(1..=255u8)).collect();
                    let res = m.checked_write(PhysAddr(addr), &data);
                    if res.is_ok() {
                        for (i, b) in data.iter().enumerate() {
                            taint.insert(addr + i as u64, *b);
                        }
                    }
                    m.exit_to_os().expect("exit");
                    res.is_ok()
                }
            }
            60..=84 => {
                let target = ever[rng.gen_range(0..ever.len())];
                let len = rng.gen_range(1..=32u64).min(target.size());
                let addr = target.base().0 + rng.gen_range(0..=target.size() - len);
                match m.checked_read(PhysAddr(addr), len) {
                    Ok(bytes) => {
                        report.os_reads_allowed += 1;
                        for (i, b) in bytes.iter().enumerate() {
                            let a = addr + i as u64;
                            if taint.get(&a) == Some(b) {
                                report.violations.push(format!("step {step}: OS read tainted byte at {a:#x}"));
                            }
                        }
                        true
                    }
                    Err(_) => false,
                }
            }
            85..=91 => {
                let target = ever[rng.gen_range(0..ever.len())];
                let len = rng.gen_range(1..=8u64).min(target.size());
                let addr = target.base().0 + rng.gen_range(0..=target.size() - len);
                let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                let res = m.checked_write(PhysAddr(addr), &data);
                if res.is_ok() {
                    for i in 0..len {
                        taint.remove(&(addr + i));
                    }
                }
                res.is_ok()
            }
            92..=94 => {
                let res = m.unplug(1);
                if res.is_ok() {
                    model.on_unplug(1);
                }
                res.is_ok()
            }
            95..=96 => m.replug(1, None).is_ok(),
            _ => {
                let id = pick_enclave(&mut rng);
                let entered = m.enter_enclave(id).is_ok();
                if entered {
                    m.take_events();
                    m.exit_to_os().expect("exit");
                }
                entered
            }
        };
        report.successful_ops += usize::from(ok);
        for r in m.trace_mut().drain() {
            if let Some(v) = os_access_violation(&r, &model) {
                report.violations.push(format!("step {step}: {v}"));
            }
        }
        if let Err(v) = m.check_invariants() {
            report.violations.push(format!("step {step}: invariant: {v}"));
        }
        if report.violations.len() > 16 {
            break;
        }
    }
    report
}

/// An allowed OS-context PMP check that touches a protected range.
fn os_access_violation(r: &TraceRecord, model: &Model) -> Option<String> {
    if r.actor != "OS" || r.op != "pmp.check" || r.result["verdict"] != "Allow" {
        return None;
    }
    let addr = parse_hex_u64(r.args["addr"].as_str()?).ok()?;
    let len = r.args["len"].as_u64()?;
    model.protected(addr, len).map(|what| format!("OS access {addr:#x}+{len} allowed into {what}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_run_is_clean_and_busy() {
        let r = fuzz(11, 2_000, 16);
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        assert!(r.successful_ops > 200, "{r:?}");
        assert!(r.os_reads_allowed > 10, "{r:?}");
    }

    #[test]
    fn protection_oracle_flags_allowed_access_into_private_memory() {
        let private = MemRange::new(FIRST_SLOT, SLOT).unwrap();
        let sm = MemRange::new(DRAM_BASE, 0x20_0000).unwrap();
        let model = Model { private: BTreeMap::from([(3, private)]), regions: BTreeMap::new(), sm };
        let record = |addr: u64, verdict: &str| TraceRecord {
            step: 0,
            actor: "OS".into(),
            op: "pmp.check".into(),
            args: serde_json::json!({"addr": format!("{addr:#x}"), "len": 4}),
            result: serde_json::json!({"verdict": verdict}),
        };
        assert!(os_access_violation(&record(FIRST_SLOT + 8, "Allow"), &model).is_some());
        assert!(os_access_violation(&record(DRAM_BASE, "Allow"), &model).is_some());
        assert!(os_access_violation(&record(FIRST_SLOT + 8, "Deny"), &model).is_none());
        assert!(os_access_violation(&record(FIRST_SLOT + SLOT, "Allow"), &model).is_none());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = fuzz(5, 500, 8);
        let b = fuzz(5, 500, 8);
        assert_eq!((a.successful_ops, a.os_reads_allowed), (b.successful_ops, b.os_reads_allowed));
    }
}
