// SPDX-License-Identifier: Apache-2.0

//! Scenario harness: schema, runner, built-in security corpus and the
//! isolation fuzzer.

pub mod fuzz;
pub mod runner;
pub mod scenario;

pub use fuzz::{fuzz, FuzzReport};
pub use runner::{run_scenario, ActionOutcome, AssertionOutcome, RunOptions, RunReport};
pub use scenario::{Scenario, ScenarioClass, ScenarioInvalid};

/// Source of every built-in scenario, in corpus order.
pub const CORPUS_SOURCES: &[(&str, &str)] = &[
    ("sunny-day", include_str!("../../scenarios/sunny-day.json")),
    ("malicious-os-read", include_str!("../../scenarios/malicious-os-read.json")),
    ("overlap-connect", include_str!("../../scenarios/overlap-connect.json")),
    ("third-party-connect", include_str!("../../scenarios/third-party-connect.json")),
    ("stale-buffer", include_str!("../../scenarios/stale-buffer.json")),
    ("connect-before-sync-disconnect", include_str!("../../scenarios/connect-before-sync-disconnect.json")),
    ("flush-on-destroy", include_str!("../../scenarios/flush-on-destroy.json")),
    ("rogue-dma", include_str!("../../scenarios/rogue-dma.json")),
    ("pmp-budget", include_str!("../../scenarios/pmp-budget.json")),
    ("toctou-identifier-reuse", include_str!("../../scenarios/toctou-identifier-reuse.json")),
    ("link-mismatch-attestation", include_str!("../../scenarios/link-mismatch-attestation.json")),
    ("forged-peripheral-cert", include_str!("../../scenarios/forged-peripheral-cert.json")),
    ("ce-killed-cascade", include_str!("../../scenarios/ce-killed-cascade.json")),
    ("peripheral-replug-cascade", include_str!("../../scenarios/peripheral-replug-cascade.json")),
    ("ae-killed-session-isolation", include_str!("../../scenarios/ae-killed-session-isolation.json")),
    ("accelerator-parallel-sessions", include_str!("../../scenarios/accelerator-parallel-sessions.json")),
    ("keyboard-temporal-separation", include_str!("../../scenarios/keyboard-temporal-separation.json")),
    ("replayed-report", include_str!("../../scenarios/replayed-report.json")),
    ("firmware-downgrade", include_str!("../../scenarios/firmware-downgrade.json")),
];

/// Parses the built-in corpus. The sources are part of the crate, so a
/// parse failure is a build defect.
pub fn builtin_corpus() -> Vec<Scenario> {
    CORPUS_SOURCES
        .iter()
        .map(|(name, src)| Scenario::from_json(src).unwrap_or_else(|e| panic!("built-in scenario {name}: {e}")))
        .collect()
}
