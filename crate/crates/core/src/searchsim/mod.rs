//! Deterministic workload drivers, the full-copy oracle, and run reports.

mod bon;
mod fanout;
mod gen;
mod harness;
mod mcts;
mod oracle;
mod trace;
mod war;

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blockstore::StoreStats;
use crate::config::RunConfig;
use crate::integrity::{fsck, FsckReport};
use crate::procstate::{PoolStats, PAGE_SIZE};
use crate::statemanager::report::render_table;
use crate::statemanager::{
    BaseImage, BlockingEvent, ColumnStats, GcReport, ManagerMetrics, StateManager, StorageCensus,
};

pub use bon::{run_bon, BonParams, BonSummary};
pub use fanout::{gpu_util, run_rl_fanout, FanoutParams, FanoutReport};
pub use gen::{
    interval_trace, random_action, random_trace, GenParams, MUTATING_COMMANDS, READ_ONLY_COMMANDS,
};
pub use harness::{replay_trace, Harness, HarnessSummary, Mismatch, Mode, Outcome, ReplayError};
pub use mcts::{run_mcts, Livelock, MctsNode, MctsParams, MctsRun, MctsSummary};
pub use oracle::{OracleManager, OracleState};
pub use trace::{parse_trace, write_trace, Dirt, TraceEvent, TraceParseError};
pub use war::{plateau_run, war_sweep, PlateauReport, WarCurve, WarParams, WarPoint, WarReport};

/// Deterministic pseudo-random bytes.
pub fn content_bytes(seed: u64, len: usize) -> Vec<u8> {
    let mut buf = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut buf);
    buf
}

/// Bytes a memwrite of `seed` puts into `page`.
pub fn page_bytes(seed: u64, page: u64, len: usize) -> Vec<u8> {
    content_bytes(seed ^ page.wrapping_mul(0x9E37_79B9_7F4A_7C15), len)
}

/// Order-sensitive hash of a whole sandbox state.
pub fn state_digest(s: &OracleState) -> [u8; 32] {
    let mut h = Sha256::new();
    for (p, b) in &s.files {
        h.update(b"F");
        h.update(p.as_bytes());
        h.update((b.len() as u64).to_le_bytes());
        h.update(b);
    }
    for d in &s.dirs {
        h.update(b"D");
        h.update(d.as_bytes());
        h.update([0]);
    }
    for (i, b) in &s.pages {
        h.update(b"P");
        h.update(i.to_le_bytes());
        h.update(b);
    }
    h.finalize().into()
}

/// Pass/fail for a test observing a state with `digest`.
pub fn verdict(digest: &[u8; 32], seed: u64, pass_prob: f64) -> bool {
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    let x = u64::from_le_bytes(word) ^ seed.wrapping_mul(0xD134_2543_DE82_EF95);
    ((x >> 11) as f64 / (1u64 << 53) as f64) < pass_prob
}

/// Snapshot of a live manager's visible state in oracle form.
pub fn observe(m: &StateManager) -> OracleState {
    OracleState {
        files: m.fs().materialize(),
        dirs: m.fs().directories(),
        pages: m.space().contents(),
    }
}

impl From<&BaseImage> for OracleState {
    fn from(base: &BaseImage) -> Self {
        let mut s = OracleState {
            files: base.files.clone(),
            ..Default::default()
        };
        for (&p, bytes) in &base.pages {
            s.mem_write(p, 0, bytes);
        }
        s
    }
}

/// Seeded starting sandbox: `files` source files of `file_len` bytes and
/// `pages` populated memory pages.
pub fn synthetic_base(seed: u64, files: usize, file_len: usize, pages: u64) -> BaseImage {
    let mut base = BaseImage::default();
    for i in 0..files {
        let path = format!("/repo/pkg{}/mod{}.py", i / 50, i);
        base.files
            .insert(path, content_bytes(seed.wrapping_add(i as u64), file_len));
    }
    for p in 0..pages {
        base.pages.insert(p, page_bytes(seed, p, PAGE_SIZE));
    }
    base
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Replay,
    Mcts,
    Bon,
    Fanout,
    War,
}

/// One JSON document per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: ReportKind,
    /// Wall-clock stamp set by the caller. Not part of the reproducible content.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<HarnessSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<ManagerMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_ratio: Option<f64>,
    #[serde(default)]
    pub breakdown: BTreeMap<String, ColumnStats>,
    #[serde(default)]
    pub blocking: Vec<BlockingEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gc: Option<GcReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store: Option<StoreStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage: Option<StorageCensus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fsck: Option<FsckReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcts: Option<MctsSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<Vec<MctsNode>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bon: Option<BonSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fanout: Vec<FanoutReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub war: Option<WarReport>,
}

impl RunReport {
    pub fn new(kind: ReportKind, config: RunConfig) -> Self {
        RunReport {
            kind,
            timestamp: None,
            config,
            replay: None,
            metrics: None,
            skip_ratio: None,
            breakdown: BTreeMap::new(),
            blocking: Vec::new(),
            gc: None,
            store: None,
            storage: None,
            pool: None,
            fsck: None,
            registry: None,
            mcts: None,
            tree: None,
            bon: None,
            fanout: Vec::new(),
            war: None,
        }
    }

    /// Copies metrics, blocking events, storage and integrity results.
    pub fn absorb_manager(&mut self, m: &StateManager) {
        let metrics = m.metrics();
        self.skip_ratio = Some(metrics.skip_ratio());
        self.metrics = Some(metrics);
        self.breakdown = m.breakdown();
        self.blocking = m.events().to_vec();
        self.store = Some(m.store_stats());
        self.storage = Some(m.storage());
        self.pool = Some(m.pool().stats());
        self.fsck = Some(fsck(m));
        self.registry = Some(m.registry_json());
    }

    pub fn table(&self) -> String {
        render_table(&self.breakdown)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}
