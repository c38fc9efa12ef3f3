//! JSON-lines trace format.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::procstate::PAGE_SIZE;

/// Largest single write a trace may request.
pub const MAX_WRITE_LEN: usize = 1 << 26;
/// Largest page run a single memwrite may touch.
pub const MAX_PAGE_RUN: u64 = 1 << 16;

/// Scratch state a value-time test creates before it is rolled back.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dirt {
    #[serde(default)]
    pub files: u32,
    #[serde(default)]
    pub pages: u32,
}

fn one() -> u64 {
    1
}

fn page_size() -> usize {
    PAGE_SIZE
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

fn is_one(n: &u64) -> bool {
    *n == 1
}

fn is_page(n: &usize) -> bool {
    *n == PAGE_SIZE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
pub enum TraceEvent {
    Write {
        path: String,
        #[serde(default)]
        offset: u64,
        len: usize,
        seed: u64,
    },
    Read {
        path: String,
    },
    Unlink {
        path: String,
    },
    Mkdir {
        path: String,
    },
    /// A shell command. `effect`, when present, is what the command does to
    /// the sandbox.
    Exec {
        cmd: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        effect: Option<Box<TraceEvent>>,
    },
    MemWrite {
        page: u64,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        count: u64,
        #[serde(default, skip_serializing_if = "is_zero")]
        offset: usize,
        #[serde(default = "page_size", skip_serializing_if = "is_page")]
        len: usize,
        seed: u64,
    },
    Llm {
        window_ms: f64,
    },
    Checkpoint {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    Restore {
        label: String,
    },
    Test {
        #[serde(default)]
        dirt: Dirt,
        seed: u64,
    },
}

impl TraceEvent {
    pub fn op(&self) -> &'static str {
        match self {
            TraceEvent::Write { .. } => "write",
            TraceEvent::Read { .. } => "read",
            TraceEvent::Unlink { .. } => "unlink",
            TraceEvent::Mkdir { .. } => "mkdir",
            TraceEvent::Exec { .. } => "exec",
            TraceEvent::MemWrite { .. } => "memwrite",
            TraceEvent::Llm { .. } => "llm",
            TraceEvent::Checkpoint { .. } => "checkpoint",
            TraceEvent::Restore { .. } => "restore",
            TraceEvent::Test { .. } => "test",
        }
    }

    /// Structural checks that do not depend on sandbox state.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            TraceEvent::Write { len, .. } if *len > MAX_WRITE_LEN => {
                Err(format!("write len {len} exceeds {MAX_WRITE_LEN}"))
            }
            TraceEvent::MemWrite {
                count, offset, len, ..
            } => {
                if *count == 0 || *count > MAX_PAGE_RUN {
                    return Err(format!("memwrite count {count} outside 1..={MAX_PAGE_RUN}"));
                }
                if offset + len > PAGE_SIZE {
                    return Err(format!("memwrite range {offset}+{len} crosses the page"));
                }
                Ok(())
            }
            TraceEvent::Llm { window_ms } if !window_ms.is_finite() || *window_ms < 0.0 => Err(
                format!("llm window {window_ms} must be a non-negative number"),
            ),
            TraceEvent::Exec {
                effect: Some(e), ..
            } => match e.as_ref() {
                TraceEvent::Write { .. }
                | TraceEvent::Unlink { .. }
                | TraceEvent::Mkdir { .. }
                | TraceEvent::MemWrite { .. } => e.validate(),
                other => Err(format!("exec effect cannot be `{}`", other.op())),
            },
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("trace line {line}: {message}")]
pub struct TraceParseError {
    pub line: usize,
    pub message: String,
}

/// Parses one event per non-blank line.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, TraceParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let err = |message: String| TraceParseError {
            line: i + 1,
            message,
        };
        let ev: TraceEvent = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        ev.validate().map_err(err)?;
        out.push(ev);
    }
    Ok(out)
}

pub fn write_trace(events: &[TraceEvent]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&serde_json::to_string(e).expect("trace events serialize"));
        s.push('\n');
    }
    s
}
