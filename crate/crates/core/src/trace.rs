// SPDX-License-Identifier: Apache-2.0

//! Append-only event log. Serialized as one JSON object per line:
//! `{"step", "actor", "op", "args", "result"}`.
//!
//! `serde_json` maps are ordered by key, so the rendering is byte-stable
//! for a given sequence of events.

use serde::Serialize;
use serde_json::{json, Value};

use crate::platform::MemRange;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: u64,
    pub actor: String,
    pub op: String,
    pub args: Value,
    pub result: Value,
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    records: Vec<TraceRecord>,
    /// Records already drained; step numbers continue after them.
    drained: u64,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, actor: impl Into<String>, op: impl Into<String>, args: Value, result: Value) {
        let step = self.drained + self.records.len() as u64;
        self.records.push(TraceRecord { step, actor: actor.into(), op: op.into(), args, result });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Removes and returns the buffered records. Later records keep
    /// counting steps from where these left off.
    pub fn drain(&mut self) -> Vec<TraceRecord> {
        self.drained += self.records.len() as u64;
        std::mem::take(&mut self.records)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }
}

pub fn range_json(r: &MemRange) -> Value {
    json!({ "base": format!("{:#x}", r.base().0), "size": r.size() })
}

pub fn ok(v: Value) -> Value {
    json!({ "ok": v })
}

pub fn err(kind: &str, detail: impl std::fmt::Display) -> Value {
    json!({ "error": kind, "detail": detail.to_string() })
}

/// True iff every key of `pattern` is present in `value` with a matching
/// value; objects match recursively, everything else by equality.
pub fn json_subset(pattern: &Value, value: &Value) -> bool {
    match (pattern, value) {
        (Value::Object(p), Value::Object(v)) => {
            p.iter().all(|(k, pv)| v.get(k).is_some_and(|vv| json_subset(pv, vv)))
        }
        _ => pattern == value,
    }
}

pub fn record_matches(pattern: &Value, record: &TraceRecord) -> bool {
    json_subset(pattern, &serde_json::to_value(record).expect("trace record serializes"))
}
