// SPDX-License-Identifier: Apache-2.0

use pie_core::harness::{builtin_corpus, run_scenario, RunOptions, Scenario, ScenarioClass};

fn describe_failures(s: &Scenario) -> Vec<String> {
    let r = run_scenario(s, RunOptions::default()).expect("valid");
    let mut out: Vec<String> = r
        .assertions
        .iter()
        .filter(|a| !a.passed)
        .map(|a| format!("{}: assertion {} {} ({})", s.name, a.index, a.assertion, a.detail))
        .collect();
    if let Some(v) = r.invariant_violation {
        out.push(format!("{}: invariant {v}", s.name));
    }
    out
}

#[test]
fn every_builtin_scenario_passes() {
    let corpus = builtin_corpus();
    assert!(corpus.len() >= 13);
    let failures: Vec<String> = corpus.iter().flat_map(describe_failures).collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn corpus_covers_required_cases() {
    let names: Vec<String> = builtin_corpus().into_iter().map(|s| s.name).collect();
    for required in [
        "malicious-os-read",
        "overlap-connect",
        "third-party-connect",
        "stale-buffer",
        "connect-before-sync-disconnect",
        "flush-on-destroy",
        "rogue-dma",
        "pmp-budget",
        "toctou-identifier-reuse",
        "link-mismatch-attestation",
        "forged-peripheral-cert",
        "ce-killed-cascade",
        "peripheral-replug-cascade",
    ] {
        assert!(names.iter().any(|n| n == required), "missing {required}");
    }
}

#[test]
fn attack_scenarios_assert_a_defended_outcome() {
    for s in builtin_corpus().into_iter().filter(|s| s.class == ScenarioClass::Attack) {
        let r = run_scenario(&s, RunOptions::default()).unwrap();
        let defended = r.outcomes.iter().any(|o| {
            o.result.get("error").is_some()
                || o.verdict.as_deref().is_some_and(|v| v != "Accept")
                || o.attack_detected == Some(true)
        });
        assert!(defended, "{} has no defended outcome", s.name);
    }
}

#[test]
fn benign_scenarios_accept_everything() {
    for s in builtin_corpus().into_iter().filter(|s| s.class == ScenarioClass::Benign) {
        let r = run_scenario(&s, RunOptions::default()).unwrap();
        assert!(r.passed(), "{}", s.name);
        for o in &r.outcomes {
            assert!(o.verdict.as_deref().is_none_or(|v| v == "Accept"), "{} action {}", s.name, o.index);
            assert!(o.result.get("error").is_none(), "{} action {} failed: {}", s.name, o.index, o.result);
        }
    }
}

#[test]
fn toctou_scenario_depends_on_reuse_policy() {
    let mut s = builtin_corpus().into_iter().find(|s| s.name == "toctou-identifier-reuse").unwrap();
    s.platform.id_policy = pie_core::monitor::IdPolicy::Monotonic;
    let r = run_scenario(&s, RunOptions::default()).unwrap();
    assert_eq!(r.outcomes[4].result["ok"]["same_id"], false);
    assert!(!r.passed());
}
