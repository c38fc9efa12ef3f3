//! Per-event blocking accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ids::SnapshotId;

use super::cost::us_to_ms;
use super::Tag;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Checkpoint,
    Restore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestorePath {
    Fast,
    Slow,
}

/// Lane durations for one event, in microseconds of logical time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lanes {
    pub ioctl_us: u64,
    pub dump_fork_us: u64,
    pub tpl_fork_us: u64,
    pub criu_rs_us: u64,
    pub dispatch_us: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockingEvent {
    pub seq: u64,
    pub phase: Phase,
    pub tag: Tag,
    pub snapshot: SnapshotId,
    pub path: Option<RestorePath>,
    pub internal: bool,
    pub lanes: Lanes,
    pub llm_window_us: u64,
    pub perceived_us: u64,
}

impl BlockingEvent {
    pub fn perceived_ms(&self) -> f64 {
        us_to_ms(self.perceived_us)
    }

    /// Column key in the `LW/std × ck/rs` layout.
    pub fn column(&self) -> &'static str {
        match (self.tag, self.phase) {
            (Tag::Lightweight, Phase::Checkpoint) => "LW ck",
            (Tag::Lightweight, Phase::Restore) => "LW rs",
            (Tag::Standard, Phase::Checkpoint) => "std ck",
            (Tag::Standard, Phase::Restore) => "std rs",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub count: u64,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

pub const COLUMNS: [&str; 4] = ["LW ck", "LW rs", "std ck", "std rs"];

/// Nearest-rank percentile over sorted values.
fn percentile(sorted: &[u64], pct: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Mean, P95 and max of perceived blocking per column. Every column is
/// present, with zero counts where no events occurred.
pub fn breakdown(events: &[BlockingEvent]) -> BTreeMap<String, ColumnStats> {
    let mut out = BTreeMap::new();
    for col in COLUMNS {
        let mut v: Vec<u64> = events
            .iter()
            .filter(|e| e.column() == col)
            .map(|e| e.perceived_us)
            .collect();
        v.sort_unstable();
        let stats = if v.is_empty() {
            ColumnStats::default()
        } else {
            let sum: u64 = v.iter().sum();
            ColumnStats {
                count: v.len() as u64,
                mean_ms: us_to_ms(sum) / v.len() as f64,
                p95_ms: us_to_ms(percentile(&v, 95.0)),
                max_ms: us_to_ms(*v.last().unwrap()),
            }
        };
        out.insert(col.to_string(), stats);
    }
    out
}

/// Fixed-width text rendering of [`breakdown`].
pub fn render_table(stats: &BTreeMap<String, ColumnStats>) -> String {
    let mut s = String::new();
    s.push_str(&format!("{:<10}", "blocking"));
    for col in COLUMNS {
        s.push_str(&format!("{col:>10}"));
    }
    s.push('\n');
    type Getter = fn(&ColumnStats) -> String;
    let rows: [(&str, Getter); 4] = [
        ("events", |c| c.count.to_string()),
        ("mean ms", |c| format!("{:.2}", c.mean_ms)),
        ("p95 ms", |c| format!("{:.2}", c.p95_ms)),
        ("max ms", |c| format!("{:.2}", c.max_ms)),
    ];
    for (name, get) in rows {
        s.push_str(&format!("{name:<10}"));
        for col in COLUMNS {
            s.push_str(&format!("{:>10}", get(&stats[col])));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(phase: Phase, tag: Tag, perceived_us: u64) -> BlockingEvent {
        BlockingEvent {
            seq: 0,
            phase,
            tag,
            snapshot: SnapshotId(0),
            path: None,
            internal: false,
            lanes: Lanes::default(),
            llm_window_us: 0,
            perceived_us,
        }
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<u64> = (1..=20).collect();
        assert_eq!(percentile(&v, 95.0), 19);
        assert_eq!(percentile(&[7], 95.0), 7);
    }

    #[test]
    fn groups_by_column() {
        let events = vec![
            ev(Phase::Restore, Tag::Standard, 5_140),
            ev(Phase::Restore, Tag::Standard, 8_040),
            ev(Phase::Checkpoint, Tag::Lightweight, 0),
        ];
        let b = breakdown(&events);
        assert_eq!(b["std rs"].count, 2);
        assert!((b["std rs"].mean_ms - 6.59).abs() < 1e-9);
        assert_eq!(b["std rs"].p95_ms, 8.04);
        assert_eq!(b["LW ck"].count, 1);
        assert_eq!(b["LW rs"].count, 0);
        let table = render_table(&b);
        assert!(table.contains("std rs"));
        assert_eq!(table.lines().count(), 5);
    }
}
