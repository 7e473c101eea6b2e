// SPDX-License-Identifier: Apache-2.0

//! Deterministic simulator of a platform isolation environment: a security
//! monitor that isolates enclaves with physical memory protection, shared
//! memory between enclaves and peripherals, emulated attestable
//! peripherals, platform-wide attestation and an adversarial scenario
//! harness.

pub mod attestation;
pub mod codec;
pub mod crypto;
pub mod entity;
pub mod harness;
pub mod monitor;
pub mod peripherals;
pub mod platform;
pub mod pmp;
pub mod progmodel;
pub mod ring;
pub mod trace;
