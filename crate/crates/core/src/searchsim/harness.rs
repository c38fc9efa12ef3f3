//! Trace execution against the delta manager, the oracle, or both in
//! lockstep.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::oracle::{OracleManager, OracleState};
use super::trace::{Dirt, TraceEvent};
use super::{content_bytes, observe, page_bytes, state_digest, verdict, ReportKind, RunReport};
use crate::config::RunConfig;
use crate::ids::SnapshotId;
use crate::layerfs::FsError;
use crate::procstate::PAGE_SIZE;
use crate::statemanager::cost::ms_to_us;
use crate::statemanager::{
    BaseImage, GcPolicy, GcReport, ManagerConfig, ManagerError, NodeFlags, RestorePath, SearchView,
    StateManager,
};

/// First page index used by value-time test scratch writes.
pub const TEST_PAGE_BASE: u64 = 1 << 20;
const TEST_DIR: &str = "/.vtt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Delta,
    Oracle,
    Both,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Delta => "delta",
            Mode::Oracle => "oracle",
            Mode::Both => "both",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "delta" => Ok(Mode::Delta),
            "oracle" => Ok(Mode::Oracle),
            "both" => Ok(Mode::Both),
            _ => Err(format!(
                "unknown mode `{s}` (expected delta, oracle or both)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub index: usize,
    pub op: String,
    pub detail: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error(transparent)]
    Parse(#[from] super::trace::TraceParseError),
    #[error("event {index}: {message}")]
    Invalid { index: usize, message: String },
    #[error("event {index}: unknown snapshot label `{label}`")]
    UnknownLabel { index: usize, label: String },
    #[error("event {index}: restore of `{label}` failed: {source}")]
    UnknownSnapshot {
        index: usize,
        label: String,
        source: ManagerError,
    },
    #[error("event {index}: {source}")]
    Fault { index: usize, source: ManagerError },
    #[error("event {index}: {source}")]
    Manager { index: usize, source: ManagerError },
    #[error("event {index}: delta and oracle disagree: {detail}")]
    Diverged { index: usize, detail: String },
}

impl ReplayError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            ReplayError::Parse(_) | ReplayError::Invalid { .. } => 2,
            ReplayError::UnknownLabel { .. } | ReplayError::UnknownSnapshot { .. } => 3,
            ReplayError::Fault { .. } => 4,
            ReplayError::Manager { .. } | ReplayError::Diverged { .. } => 1,
        }
    }

    pub fn index(&self) -> Option<usize> {
        match self {
            ReplayError::Parse(_) => None,
            ReplayError::Invalid { index, .. }
            | ReplayError::UnknownLabel { index, .. }
            | ReplayError::UnknownSnapshot { index, .. }
            | ReplayError::Fault { index, .. }
            | ReplayError::Manager { index, .. }
            | ReplayError::Diverged { index, .. } => Some(*index),
        }
    }
}

/// What one event did.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Done,
    /// The filesystem refused the operation; state is unchanged.
    Rejected(FsError),
    Checkpointed(Option<SnapshotId>),
    Restored(Option<RestorePath>),
    Verdict(bool),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarnessSummary {
    pub mode: Option<Mode>,
    pub events: usize,
    pub checks: u64,
    pub mismatches: Vec<Mismatch>,
    pub fs_rejections: u64,
    pub tests_passed: u64,
    pub tests_failed: u64,
    pub labels: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct Binding {
    sid: Option<SnapshotId>,
    oracle: Option<usize>,
}

pub struct Harness {
    mode: Mode,
    delta: Option<StateManager>,
    oracle: Option<OracleManager>,
    labels: BTreeMap<String, Binding>,
    summary: HarnessSummary,
    test_pass_prob: f64,
}

fn fs_result_eq(a: &Result<(), FsError>, b: &Result<(), FsError>) -> bool {
    match (a, b) {
        (Ok(()), Ok(())) => true,
        (Err(x), Err(y)) => std::mem::discriminant(x) == std::mem::discriminant(y),
        _ => false,
    }
}

/// First difference between two states, for mismatch reports.
fn describe_diff(delta: &OracleState, oracle: &OracleState) -> String {
    for (p, b) in &oracle.files {
        match delta.files.get(p) {
            None => return format!("file {p} missing in delta"),
            Some(d) if d != b => {
                return format!("file {p} differs ({} vs {} bytes)", d.len(), b.len())
            }
            _ => {}
        }
    }
    if let Some(p) = delta.files.keys().find(|p| !oracle.files.contains_key(*p)) {
        return format!("file {p} only in delta");
    }
    if delta.dirs != oracle.dirs {
        return format!("directories differ: {:?} vs {:?}", delta.dirs, oracle.dirs);
    }
    for (i, b) in &oracle.pages {
        match delta.pages.get(i) {
            None => return format!("page {i} missing in delta"),
            Some(d) if d != b => return format!("page {i} differs"),
            _ => {}
        }
    }
    if let Some(i) = delta.pages.keys().find(|i| !oracle.pages.contains_key(*i)) {
        return format!("page {i} only in delta");
    }
    "states differ".into()
}

fn apply_fs_delta(m: &mut StateManager, ev: &TraceEvent) -> Result<(), FsError> {
    match ev {
        TraceEvent::Write {
            path,
            offset,
            len,
            seed,
        } => m.write_file(path, *offset, &content_bytes(*seed, *len)),
        TraceEvent::Unlink { path } => m.unlink(path),
        TraceEvent::Mkdir { path } => m.mkdir(path),
        TraceEvent::MemWrite {
            page,
            count,
            offset,
            len,
            seed,
        } => {
            for p in *page..page + count {
                m.mem_write(p, *offset, &page_bytes(*seed, p, *len));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn apply_fs_oracle(s: &mut OracleState, ev: &TraceEvent) -> Result<(), FsError> {
    match ev {
        TraceEvent::Write {
            path,
            offset,
            len,
            seed,
        } => s.write_file(path, *offset, &content_bytes(*seed, *len)),
        TraceEvent::Unlink { path } => s.unlink(path),
        TraceEvent::Mkdir { path } => s.mkdir(path),
        TraceEvent::MemWrite {
            page,
            count,
            offset,
            len,
            seed,
        } => {
            for p in *page..page + count {
                s.mem_write(p, *offset, &page_bytes(*seed, p, *len));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn dirt_delta(m: &mut StateManager, dirt: Dirt, seed: u64) {
    for i in 0..dirt.files {
        let _ = m.write_file(
            &format!("{TEST_DIR}/out{i}"),
            0,
            &content_bytes(seed.wrapping_add(i as u64), 256),
        );
    }
    for j in 0..dirt.pages as u64 {
        m.mem_write(
            TEST_PAGE_BASE + j,
            0,
            &page_bytes(seed, TEST_PAGE_BASE + j, PAGE_SIZE),
        );
    }
}

fn dirt_oracle(s: &mut OracleState, dirt: Dirt, seed: u64) {
    for i in 0..dirt.files {
        let _ = s.write_file(
            &format!("{TEST_DIR}/out{i}"),
            0,
            &content_bytes(seed.wrapping_add(i as u64), 256),
        );
    }
    for j in 0..dirt.pages as u64 {
        s.mem_write(
            TEST_PAGE_BASE + j,
            0,
            &page_bytes(seed, TEST_PAGE_BASE + j, PAGE_SIZE),
        );
    }
}

impl Harness {
    pub fn new(mode: Mode, config: ManagerConfig, base: &BaseImage) -> Result<Self, ManagerError> {
        let delta = match mode {
            Mode::Delta | Mode::Both => Some(StateManager::new(config, base)?),
            Mode::Oracle => None,
        };
        let oracle = match mode {
            Mode::Oracle | Mode::Both => Some(OracleManager::new(OracleState::from(base))),
            Mode::Delta => None,
        };
        let root = Binding {
            sid: delta.as_ref().map(StateManager::root),
            oracle: oracle.as_ref().map(|_| 0),
        };
        let mut labels = BTreeMap::new();
        labels.insert("root".to_string(), root);
        Ok(Harness {
            mode,
            delta,
            oracle,
            labels,
            summary: HarnessSummary {
                mode: Some(mode),
                ..Default::default()
            },
            test_pass_prob: 0.5,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_test_pass_prob(&mut self, p: f64) {
        self.test_pass_prob = p;
    }

    pub fn manager(&self) -> Option<&StateManager> {
        self.delta.as_ref()
    }

    pub fn manager_mut(&mut self) -> Option<&mut StateManager> {
        self.delta.as_mut()
    }

    pub fn into_manager(self) -> Option<StateManager> {
        self.delta
    }

    pub fn oracle(&self) -> Option<&OracleManager> {
        self.oracle.as_ref()
    }

    pub fn summary(&self) -> &HarnessSummary {
        &self.summary
    }

    pub fn snapshot_of(&self, label: &str) -> Option<SnapshotId> {
        self.labels.get(label).and_then(|b| b.sid)
    }

    /// Current visible state, from the delta side when present.
    pub fn state(&self) -> OracleState {
        match (&self.delta, &self.oracle) {
            (Some(m), _) => observe(m),
            (None, Some(o)) => o.state().clone(),
            (None, None) => OracleState::default(),
        }
    }

    fn mismatch(&mut self, index: usize, op: &str, detail: String) {
        self.summary.mismatches.push(Mismatch {
            index,
            op: op.to_string(),
            detail,
        });
    }

    fn compare(&mut self, index: usize, op: &str) {
        let (Some(m), Some(o)) = (&self.delta, &self.oracle) else {
            return;
        };
        self.summary.checks += 1;
        let d = observe(m);
        if &d != o.state() {
            let detail = describe_diff(&d, o.state());
            self.mismatch(index, op, detail);
        }
    }

    fn fs_event(&mut self, index: usize, ev: &TraceEvent) -> Outcome {
        let d = self.delta.as_mut().map(|m| apply_fs_delta(m, ev));
        let o = self
            .oracle
            .as_mut()
            .map(|o| apply_fs_oracle(o.state_mut(), ev));
        self.fs_outcome(index, ev.op(), d, o)
    }

    fn fs_outcome(
        &mut self,
        index: usize,
        op: &str,
        d: Option<Result<(), FsError>>,
        o: Option<Result<(), FsError>>,
    ) -> Outcome {
        if let (Some(d), Some(o)) = (&d, &o) {
            if !fs_result_eq(d, o) {
                self.mismatch(index, op, format!("delta {d:?}, oracle {o:?}"));
            }
        }
        match d.or(o) {
            Some(Err(e)) => {
                self.summary.fs_rejections += 1;
                Outcome::Rejected(e)
            }
            _ => Outcome::Done,
        }
    }

    /// Runs event number `index`.
    pub fn apply(&mut self, index: usize, ev: &TraceEvent) -> Result<Outcome, ReplayError> {
        ev.validate()
            .map_err(|message| ReplayError::Invalid { index, message })?;
        self.summary.events += 1;
        match ev {
            TraceEvent::Write { .. }
            | TraceEvent::Unlink { .. }
            | TraceEvent::Mkdir { .. }
            | TraceEvent::MemWrite { .. } => Ok(self.fs_event(index, ev)),
            TraceEvent::Read { path } => {
                let d = self.delta.as_mut().map(|m| m.read_file(path));
                let o = self.oracle.as_ref().map(|o| o.state().read_file(path));
                if let (Some(d), Some(o)) = (&d, &o) {
                    let same = match (d, o) {
                        (Ok(a), Ok(b)) => a == b,
                        (Err(a), Err(b)) => std::mem::discriminant(a) == std::mem::discriminant(b),
                        _ => false,
                    };
                    if !same {
                        self.mismatch(index, "read", format!("read of {path} differs"));
                    }
                }
                let unit = |r: Result<Vec<u8>, FsError>| r.map(|_| ());
                Ok(self.fs_outcome(index, "read", d.map(unit), o.map(unit)))
            }
            TraceEvent::Exec { cmd, effect } => {
                let d = self.delta.as_mut().map(|m| match effect {
                    Some(e) => m.exec_with(cmd, |m| apply_fs_delta(m, e)),
                    None => {
                        m.exec(cmd);
                        Ok(())
                    }
                });
                let o = self.oracle.as_mut().map(|o| match effect {
                    Some(e) => apply_fs_oracle(o.state_mut(), e),
                    None => Ok(()),
                });
                Ok(self.fs_outcome(index, "exec", d, o))
            }
            TraceEvent::Llm { window_ms } => {
                if let Some(m) = self.delta.as_mut() {
                    m.llm_call(ms_to_us(*window_ms));
                }
                Ok(Outcome::Done)
            }
            TraceEvent::Checkpoint { label } => self.checkpoint(index, label.clone()),
            TraceEvent::Restore { label } => self.restore(index, label),
            TraceEvent::Test { dirt, seed } => self.test(index, *dirt, *seed),
        }
    }

    fn checkpoint(&mut self, index: usize, label: Option<String>) -> Result<Outcome, ReplayError> {
        let sid = match self.delta.as_mut().map(StateManager::checkpoint) {
            Some(Ok(sid)) => Some(sid),
            Some(Err(source @ ManagerError::DumpFailure(_))) => {
                return Err(ReplayError::Fault { index, source })
            }
            Some(Err(source)) => return Err(ReplayError::Manager { index, source }),
            None => None,
        };
        let oracle = self.oracle.as_mut().map(OracleManager::checkpoint);
        let label = label.unwrap_or_else(|| format!("#{index}"));
        self.labels.insert(label, Binding { sid, oracle });
        self.compare(index, "checkpoint");
        Ok(Outcome::Checkpointed(sid))
    }

    fn restore(&mut self, index: usize, label: &str) -> Result<Outcome, ReplayError> {
        let b = *self
            .labels
            .get(label)
            .ok_or_else(|| ReplayError::UnknownLabel {
                index,
                label: label.to_string(),
            })?;
        let d = match (self.delta.as_mut(), b.sid) {
            (Some(m), Some(sid)) => Some(m.restore(sid)),
            _ => None,
        };
        let o = match (self.oracle.as_mut(), b.oracle) {
            (Some(o), Some(id)) => Some(o.restore(id)),
            _ => None,
        };
        let unknown = |source| ReplayError::UnknownSnapshot {
            index,
            label: label.to_string(),
            source,
        };
        let fallback = ManagerError::UnknownSnapshotId(
            b.sid.unwrap_or(SnapshotId(b.oracle.unwrap_or(0) as u64)),
        );
        let path = match (d, o) {
            (Some(Ok(p)), None | Some(true)) => Some(p),
            (None, Some(true)) => None,
            (Some(Err(e)), None | Some(false)) => {
                return Err(match e {
                    ManagerError::UnknownSnapshotId(_) => unknown(e),
                    source => ReplayError::Manager { index, source },
                })
            }
            (None, Some(false)) => return Err(unknown(fallback)),
            (Some(Ok(_)), Some(false)) | (Some(Err(_)), Some(true)) => {
                return Err(ReplayError::Diverged {
                    index,
                    detail: format!("restore of `{label}` succeeded on one side only"),
                })
            }
            (None, None) => return Err(unknown(fallback)),
        };
        self.compare(index, "restore");
        Ok(Outcome::Restored(path))
    }

    fn test(&mut self, index: usize, dirt: Dirt, seed: u64) -> Result<Outcome, ReplayError> {
        let p = self.test_pass_prob;
        let d = match self.delta.as_mut() {
            Some(m) => {
                let r = m.value_time_test(|m| {
                    dirt_delta(m, dirt, seed);
                    verdict(&state_digest(&observe(m)), seed, p)
                });
                match r {
                    Ok(v) => Some(v),
                    Err(source @ ManagerError::DumpFailure(_)) => {
                        return Err(ReplayError::Fault { index, source })
                    }
                    Err(source) => return Err(ReplayError::Manager { index, source }),
                }
            }
            None => None,
        };
        let o = self.oracle.as_ref().map(|o| {
            let mut scratch = o.state().clone();
            dirt_oracle(&mut scratch, dirt, seed);
            verdict(&state_digest(&scratch), seed, p)
        });
        if let (Some(a), Some(b)) = (d, o) {
            if a != b {
                self.mismatch(index, "test", format!("verdict delta={a} oracle={b}"));
            }
        }
        let v = d.or(o).unwrap_or(false);
        if v {
            self.summary.tests_passed += 1;
        } else {
            self.summary.tests_failed += 1;
        }
        self.compare(index, "test");
        Ok(Outcome::Verdict(v))
    }

    /// Runs the delta side's garbage collector with flags keyed by label and
    /// drops the oracle copies of whatever it pruned.
    pub fn gc(
        &mut self,
        policy: GcPolicy,
        flags: &BTreeMap<String, NodeFlags>,
    ) -> Option<GcReport> {
        let m = self.delta.as_mut()?;
        let mut view = SearchView::new();
        for (label, f) in flags {
            if let Some(sid) = self.labels.get(label).and_then(|b| b.sid) {
                view.insert(sid, *f);
            }
        }
        let report = m.gc(policy, &view);
        if !report.evicted.is_empty() {
            let evicted: std::collections::BTreeSet<SnapshotId> =
                report.evicted.iter().copied().collect();
            if let Some(o) = self.oracle.as_mut() {
                for b in self.labels.values() {
                    if let (Some(sid), Some(id)) = (b.sid, b.oracle) {
                        if evicted.contains(&sid) {
                            o.drop_snapshot(id);
                        }
                    }
                }
            }
        }
        Some(report)
    }

    pub fn finish(mut self) -> (HarnessSummary, Option<StateManager>) {
        self.summary.labels = self.labels.len();
        (self.summary, self.delta)
    }
}

/// Runs `events` in `mode` and assembles the report. Mismatches are
/// reported, not raised; the first failing event aborts with an error.
pub fn replay_trace(
    events: &[TraceEvent],
    mode: Mode,
    config: &RunConfig,
) -> Result<RunReport, ReplayError> {
    replay_trace_with_base(events, mode, config, &BaseImage::default())
}

pub fn replay_trace_with_base(
    events: &[TraceEvent],
    mode: Mode,
    config: &RunConfig,
    base: &BaseImage,
) -> Result<RunReport, ReplayError> {
    let mut h = Harness::new(mode, config.manager_config(), base)
        .map_err(|source| ReplayError::Manager { index: 0, source })?;
    for (i, ev) in events.iter().enumerate() {
        h.apply(i, ev)?;
    }
    let (summary, manager) = h.finish();
    let mut report = RunReport::new(ReportKind::Replay, config.clone());
    if let Some(m) = &manager {
        report.absorb_manager(m);
    }
    report.replay = Some(summary);
    Ok(report)
}
