//! Snapshot garbage collection keep-rules.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ids::{ImageId, SnapshotId};
use crate::procstate::ImageStore;

use super::{NodeStatus, SnapshotNode, Tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum GcPolicy {
    KeepAll,
    /// Keep the `k` most recently created snapshots.
    Recency(usize),
    /// Keep what the search can still select, plus terminals.
    Reachability,
}

impl fmt::Display for GcPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GcPolicy::KeepAll => f.write_str("keepall"),
            GcPolicy::Recency(k) => write!(f, "recency:{k}"),
            GcPolicy::Reachability => f.write_str("reachability"),
        }
    }
}

impl FromStr for GcPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "keepall" | "keep-all" | "keep_all" => Ok(GcPolicy::KeepAll),
            "reachability" => Ok(GcPolicy::Reachability),
            _ => {
                let k = s
                    .strip_prefix("recency:")
                    .or_else(|| s.strip_prefix("recency="))
                    .ok_or_else(|| format!("unknown gc policy `{s}`"))?;
                k.parse()
                    .map(GcPolicy::Recency)
                    .map_err(|_| format!("bad recency window `{k}`"))
            }
        }
    }
}

impl From<GcPolicy> for String {
    fn from(p: GcPolicy) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for GcPolicy {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

/// What the search driver knows about one of its nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeFlags {
    pub terminal: bool,
    pub failed: bool,
    pub duplicate: bool,
    pub budget_exhausted: bool,
    pub reward_reached: bool,
}

impl NodeFlags {
    /// Could the search still pick this node for expansion?
    pub fn selectable(&self) -> bool {
        !(self.terminal
            || self.failed
            || self.duplicate
            || self.budget_exhausted
            || self.reward_reached)
    }
}

/// Flags for the nodes a search driver tracks. Snapshots absent from the
/// view are not selectable.
pub type SearchView = BTreeMap<SnapshotId, NodeFlags>;

/// Nodes to keep under `policy`. The current lineage is always kept, and the
/// result is closed over alias targets and dump-chain ancestors.
pub fn keep_set(
    policy: GcPolicy,
    nodes: &BTreeMap<SnapshotId, SnapshotNode>,
    view: &SearchView,
    lineage: SnapshotId,
    images: &ImageStore,
) -> BTreeSet<SnapshotId> {
    let live = || nodes.values().filter(|n| n.status != NodeStatus::Pruned);
    let mut seeds: Vec<SnapshotId> = match policy {
        GcPolicy::KeepAll => live().map(|n| n.id).collect(),
        GcPolicy::Recency(k) => {
            let mut v: Vec<&SnapshotNode> = live().collect();
            v.sort_by_key(|n| std::cmp::Reverse(n.created_seq));
            v.into_iter().take(k).map(|n| n.id).collect()
        }
        GcPolicy::Reachability => live()
            .filter(|n| {
                view.get(&n.id)
                    .is_some_and(|f| f.terminal || f.selectable())
            })
            .map(|n| n.id)
            .collect(),
    };
    seeds.push(lineage);

    let owner: HashMap<ImageId, SnapshotId> = nodes
        .values()
        .filter_map(|n| n.dump_image.map(|i| (i, n.id)))
        .collect();
    let mut keep = BTreeSet::new();
    while let Some(id) = seeds.pop() {
        let Some(node) = nodes.get(&id) else { continue };
        if node.status == NodeStatus::Pruned || !keep.insert(id) {
            continue;
        }
        match node.tag {
            Tag::Lightweight => seeds.extend(node.alias_of),
            Tag::Standard => {
                let parent_img = node
                    .dump_image
                    .and_then(|i| images.get(i))
                    .and_then(|img| img.parent());
                if let Some(p) = parent_img.and_then(|p| owner.get(&p)) {
                    seeds.push(*p);
                }
            }
        }
    }
    keep
}
