// SPDX-License-Identifier: Apache-2.0

//! `pie`: runs scenarios, the builtin corpus, and inspects attestation
//! reports.
//!
//! Exit codes: 0 success, 1 assertion failure or invalid signature,
//! 2 invalid input.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pie_core::attestation::AttestationReport;
use pie_core::crypto::{ProviderKind, PublicKey};
use pie_core::harness::{builtin_corpus, run_scenario, RunOptions, RunReport, Scenario};
use pie_core::monitor::{device_root_key, sm_measurement};

#[derive(Parser)]
#[command(name = "pie", version, about = "Isolation monitor simulator and scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file and check its assertions.
    Run {
        file: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Writes the trace as JSON lines.
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Overrides the PMP entry count.
        #[arg(long, value_parser = ["8", "16"])]
        max_entries: Option<String>,
        /// Writes every attestation report as `<action>-<n>.hex`.
        #[arg(long)]
        reports_out: Option<PathBuf>,
    },
    /// Run the builtin scenario corpus.
    Corpus {
        /// Writes one `<scenario>.jsonl` trace per scenario.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
    /// Decode a wire-format attestation report (hex or raw) and print it.
    AttestDump {
        report: PathBuf,
        /// Verifies the report signature under this hex public key.
        #[arg(long)]
        platform_key: Option<String>,
    },
    /// Print the device root public key and monitor measurement for a seed.
    Keygen {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "ed25519")]
        provider: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { file, seed, trace_out, max_entries, reports_out } => {
            let max_entries = max_entries.map(|m| m.parse().expect("restricted by clap"));
            run(&file, RunOptions { seed, max_entries }, trace_out.as_deref(), reports_out.as_deref())
        }
        Command::Corpus { trace_dir } => corpus(trace_dir.as_deref()),
        Command::AttestDump { report, platform_key } => attest_dump(&report, platform_key.as_deref()),
        Command::Keygen { seed, provider } => keygen(seed, &provider),
    };
    ExitCode::from(code)
}

fn fail(msg: impl std::fmt::Display) -> u8 {
    eprintln!("error: {msg}");
    2
}

fn print_report(rep: &RunReport) {
    for o in &rep.outcomes {
        let mut line = format!("action {:>3} {:<36} {}", o.index, o.op, o.result);
        if let Some(v) = &o.verdict {
            line.push_str(&format!(" verdict={v}"));
        }
        if let Some(a) = o.attack_detected {
            line.push_str(&format!(" attack_detected={a}"));
        }
        println!("{line}");
    }
    for a in &rep.assertions {
        let status = if a.passed { "PASS" } else { "FAIL" };
        println!("assert {:>3} {status} {} {}", a.index, a.assertion, a.detail);
    }
    if let Some(v) = &rep.invariant_violation {
        println!("invariant violated: {v}");
    }
}

fn run(file: &Path, opts: RunOptions, trace_out: Option<&Path>, reports_out: Option<&Path>) -> u8 {
    let doc = match fs::read_to_string(file) {
        Ok(d) => d,
        Err(e) => return fail(format!("{}: {e}", file.display())),
    };
    let rep = match Scenario::from_json(&doc).and_then(|s| run_scenario(&s, opts)) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    print_report(&rep);
    if let Some(path) = trace_out {
        if let Err(e) = fs::write(path, rep.trace_jsonl()) {
            return fail(format!("{}: {e}", path.display()));
        }
    }
    if let Some(dir) = reports_out {
        if let Err(e) = write_reports(dir, &rep) {
            return fail(format!("{}: {e}", dir.display()));
        }
    }
    let passed = rep.passed();
    println!("{}: {} (seed {})", rep.name, if passed { "PASS" } else { "FAIL" }, rep.seed);
    u8::from(!passed)
}

fn write_reports(dir: &Path, rep: &RunReport) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for o in &rep.outcomes {
        for (n, wire) in o.reports.iter().enumerate() {
            fs::write(dir.join(format!("{}-{n}.hex", o.index)), hex::encode(wire) + "\n")?;
        }
    }
    Ok(())
}

fn corpus(trace_dir: Option<&Path>) -> u8 {
    let mut failed = 0;
    for s in builtin_corpus() {
        let rep = match run_scenario(&s, RunOptions::default()) {
            Ok(r) => r,
            Err(e) => return fail(format!("{}: {e}", s.name)),
        };
        if let Some(dir) = trace_dir {
            let written = fs::create_dir_all(dir).and_then(|_| fs::write(dir.join(format!("{}.jsonl", s.name)), rep.trace_jsonl()));
            if let Err(e) = written {
                return fail(format!("{}: {e}", dir.display()));
            }
        }
        let passed = rep.passed();
        failed += usize::from(!passed);
        println!("{:<36} {}", s.name, if passed { "PASS" } else { "FAIL" });
        if !passed {
            for a in rep.assertions.iter().filter(|a| !a.passed) {
                println!("    assert {} {} {}", a.index, a.assertion, a.detail);
            }
        }
    }
    println!("corpus: {failed} failed");
    u8::from(failed > 0)
}

fn attest_dump(path: &Path, platform_key: Option<&str>) -> u8 {
    let raw = match fs::read(path) {
        Ok(b) => b,
        Err(e) => return fail(format!("{}: {e}", path.display())),
    };
    // Hex text if it decodes as such, raw wire bytes otherwise.
    let wire = std::str::from_utf8(&raw).ok().and_then(|t| hex::decode(t.trim()).ok()).unwrap_or(raw);
    let report = match AttestationReport::decode(&wire) {
        Ok(r) => r,
        Err(e) => return fail(format!("report does not decode: {e}")),
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    let Some(key) = platform_key else {
        return 0;
    };
    let Some(key) = hex::decode(key).ok().and_then(|k| PublicKey::from_slice(&k)) else {
        return fail("platform key must be 32 hex-encoded bytes");
    };
    // Signature checks need no provider state under ed25519.
    let provider = ProviderKind::Ed25519Sha3.build(0);
    if provider.verify(&key, &report.body(), &report.platform_signature) {
        println!("signature: valid");
        0
    } else {
        println!("signature: INVALID");
        1
    }
}

fn keygen(seed: u64, provider: &str) -> u8 {
    let Some(kind) = ProviderKind::parse(provider) else {
        return fail(format!("unknown provider {provider:?}"));
    };
    let mut p = kind.build(seed);
    let root = device_root_key(&mut *p);
    println!("provider: {}", p.name());
    println!("platform_key: {}", root.public.to_hex());
    println!("sm_measurement: {}", sm_measurement(&*p).0.to_hex());
    0
}
