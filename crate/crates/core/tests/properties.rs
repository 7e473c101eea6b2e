// SPDX-License-Identifier: Apache-2.0

//! Property tests over codecs, rings and the monitor lifecycle.

use std::collections::VecDeque;

use proptest::prelude::*;

use pie_core::attestation::AttestationReport;
use pie_core::crypto::ProviderKind;
use pie_core::entity::EntityId;
use pie_core::monitor::{EnclaveKind, IdPolicy, MonitorConfig, SecurityMonitor};
use pie_core::peripherals::{chunk, Frame, FrameType, Reassembler, FRAME_LEN};
use pie_core::platform::{load_device_tree, MemRange, PhysAddr, PhysicalMemory};
use pie_core::progmodel::{AeReply, ReplyStatus};
use pie_core::ring::{Direction, MemPort, Ring, RingError};

struct Flat(PhysicalMemory);

impl MemPort for Flat {
    fn read(&mut self, addr: PhysAddr, len: u64) -> Result<Vec<u8>, RingError> {
        self.0.raw_read(addr, len).map_err(|_| RingError::Fault { addr: addr.0, len })
    }
    fn write(&mut self, addr: PhysAddr, data: &[u8]) -> Result<(), RingError> {
        self.0.raw_write(addr, data).map_err(|_| RingError::Fault { addr: addr.0, len: data.len() as u64 })
    }
}

fn frame_type() -> impl Strategy<Value = FrameType> {
    (0..FrameType::ALL.len()).prop_map(|i| FrameType::ALL[i])
}

proptest! {
    #[test]
    fn overlap_matches_bytewise_definition(a in 0u64..64, asz in 1u64..32, b in 0u64..64, bsz in 1u64..32) {
        let ra = MemRange::new(a, asz).unwrap();
        let rb = MemRange::new(b, bsz).unwrap();
        let bytewise = (a..a + asz).any(|x| x >= b && x < b + bsz);
        prop_assert_eq!(ra.overlaps(&rb), bytewise);
        prop_assert_eq!(rb.overlaps(&ra), bytewise);
    }

    #[test]
    fn frame_decode_is_canonical(bytes in proptest::collection::vec(any::<u8>(), FRAME_LEN)) {
        if let Ok(f) = Frame::decode(&bytes) {
            prop_assert_eq!(f.encode().to_vec(), bytes);
        }
    }

    #[test]
    fn chunked_messages_reassemble(ty in frame_type(), data in proptest::collection::vec(any::<u8>(), 0..600)) {
        let frames = chunk(ty, &data).unwrap();
        let mut r = Reassembler::default();
        let mut done = None;
        for (i, f) in frames.iter().enumerate() {
            let wire = f.encode();
            let out = r.push(&Frame::decode(&wire).unwrap()).unwrap();
            prop_assert_eq!(out.is_some(), i + 1 == frames.len());
            done = out.or(done);
        }
        prop_assert_eq!(done, Some((ty, data)));
    }

    #[test]
    fn report_decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..400)) {
        let _ = AttestationReport::decode(&bytes);
    }

    #[test]
    fn ae_reply_round_trips(id in any::<u32>(), status in 0usize..5, data in proptest::collection::vec(any::<u8>(), 0..200)) {
        let status = [ReplyStatus::Ok, ReplyStatus::NoSession, ReplyStatus::NotAttested, ReplyStatus::Unsupported, ReplyStatus::DeviceError][status];
        let reply = AeReply { id, status, data };
        prop_assert_eq!(AeReply::decode(&reply.encode()), Some(reply));
    }

    /// A ring behaves as a bounded FIFO queue.
    #[test]
    fn ring_is_a_bounded_fifo(ops in proptest::collection::vec(proptest::option::of(proptest::collection::vec(any::<u8>(), 0..40)), 0..200)) {
        let region = MemRange::new(0x1000, 0x400).unwrap();
        let mut port = Flat(PhysicalMemory::new(region));
        let ring = Ring::in_region(&region, Direction::Down, 64).unwrap();
        let mut model = VecDeque::new();
        for op in ops {
            match op {
                Some(rec) => match ring.push(&mut port, &rec) {
                    Ok(()) => model.push_back(rec),
                    Err(RingError::Full) => prop_assert_eq!(model.len() as u64, ring.capacity()),
                    Err(e) => prop_assert!(false, "push failed: {e}"),
                },
                None => prop_assert_eq!(ring.pop(&mut port).unwrap(), model.pop_front()),
            }
            prop_assert_eq!(ring.len(&mut port).unwrap(), model.len() as u64);
        }
    }

    /// Random create, destroy, connect and disconnect sequences keep the
    /// monitor's internal invariants under either identifier policy.
    #[test]
    fn monitor_invariants_hold(reuse in any::<bool>(), ops in proptest::collection::vec((0u8..5, 0u32..6, 0u32..6, 0u64..8), 1..60)) {
        let tree = load_device_tree(r#"{"nodes": [{"name": "dram", "kind": "dram", "base": "0x80000000", "size": 16777216, "model": "ddr"}]}"#).unwrap();
        let policy = if reuse { IdPolicy::Reuse } else { IdPolicy::Monotonic };
        let cfg = MonitorConfig { max_entries: 8, id_policy: policy };
        let mut m = SecurityMonitor::boot(tree, cfg, ProviderKind::KeyedHash.build(1)).unwrap();
        let slot = |k: u64| MemRange::new(0x8020_0000 + k * 0x1_0000, 0x1_0000).unwrap();
        let mut regions = Vec::new();
        for (op, x, y, k) in ops {
            match op {
                0 => { let _ = m.create_enclave(b"p", b"", slot(k), EnclaveKind::Application); }
                1 => { let _ = m.destroy_enclave(x); }
                2 => {
                    if let Ok(r) = m.connect(EntityId::Enclave(x), EntityId::Enclave(y), slot(k)) {
                        regions.push(r);
                    }
                }
                3 => {
                    if let Some(r) = regions.get(x as usize).copied() {
                        let _ = m.sync_disconnect(r);
                    }
                }
                _ => {
                    if m.enter_enclave(x).is_ok() {
                        m.exit_to_os().unwrap();
                    }
                }
            }
            prop_assert_eq!(m.check_invariants(), Ok(()));
        }
    }
}
