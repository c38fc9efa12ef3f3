//! UCT tree search over sandbox snapshots.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gen::random_action;
use super::harness::{Harness, Mode, Outcome, ReplayError};
use super::trace::{Dirt, TraceEvent};
use super::{state_digest, synthetic_base, ReportKind, RunReport};
use crate::config::RunConfig;
use crate::ids::SnapshotId;
use crate::statemanager::{GcReport, NodeFlags};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MctsParams {
    pub budget: u32,
    pub branching: usize,
    pub depth_limit: u32,
    /// Rewards above this end a branch.
    pub reward_threshold: f64,
    /// Chance that a child's test passes.
    pub test_pass_prob: f64,
    pub max_actions: usize,
    /// Chance that a child repeats an earlier sibling's actions verbatim.
    pub sibling_repeat_prob: f64,
    pub mode: Mode,
    pub base_files: usize,
    pub base_pages: u64,
}

impl Default for MctsParams {
    fn default() -> Self {
        MctsParams {
            budget: 200,
            branching: 5,
            depth_limit: 12,
            reward_threshold: 0.9,
            test_pass_prob: 0.5,
            max_actions: 6,
            sibling_repeat_prob: 0.1,
            mode: Mode::Delta,
            base_files: 20,
            base_pages: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MctsNode {
    pub label: String,
    pub snapshot: Option<SnapshotId>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub depth: u32,
    /// Sum of rewards backed up through this node.
    pub q_value: f64,
    pub visits: u64,
    pub reward: f64,
    pub terminal: bool,
    pub failed: bool,
    pub duplicate: bool,
    pub expansion_budget_remaining: usize,
    pub children_reached_reward: bool,
}

impl MctsNode {
    fn flags(&self) -> NodeFlags {
        NodeFlags {
            terminal: self.terminal,
            failed: self.failed,
            duplicate: self.duplicate,
            budget_exhausted: self.expansion_budget_remaining == 0,
            reward_reached: self.children_reached_reward,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Livelock {
    pub node: usize,
    pub label: String,
    pub detected_at_iteration: u32,
    pub streak: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MctsSummary {
    pub iterations: u32,
    pub expansions: u32,
    pub tree_size: usize,
    pub failed_restores: u64,
    pub max_failed_streak: u32,
    pub livelock: Option<Livelock>,
    /// No selectable node remained.
    pub exhausted: bool,
    pub best_reward: f64,
    pub terminal_nodes: usize,
    pub failed_nodes: usize,
    pub duplicate_nodes: usize,
    pub gc_passes: u64,
    pub gc_evicted: u64,
    pub final_dump_bytes: u64,
    pub pool_max_len: usize,
}

pub struct MctsRun {
    pub summary: MctsSummary,
    pub tree: Vec<MctsNode>,
    pub harness: Harness,
    pub last_gc: Option<GcReport>,
}

impl MctsRun {
    pub fn report(self, config: &RunConfig) -> RunReport {
        let mut r = RunReport::new(ReportKind::Mcts, config.clone());
        let (replay, manager) = self.harness.finish();
        if let Some(m) = &manager {
            r.absorb_manager(m);
        }
        r.replay = Some(replay);
        r.gc = self.last_gc;
        r.mcts = Some(self.summary);
        r.tree = Some(self.tree);
        r
    }
}

struct Tree {
    nodes: Vec<MctsNode>,
}

impl Tree {
    /// Could selection still reach an expandable leaf through `i`?
    fn open(&self, i: usize) -> bool {
        let n = &self.nodes[i];
        if n.children.is_empty() {
            n.flags().selectable()
        } else {
            n.children.iter().any(|&c| self.open(c))
        }
    }

    fn uct(&self, parent: usize, child: usize) -> f64 {
        let c = &self.nodes[child];
        let pv = self.nodes[parent].visits.max(1) as f64;
        let v = c.visits as f64;
        c.q_value / v + std::f64::consts::SQRT_2 * (pv.ln() / v).sqrt()
    }

    /// Descends by UCT to an expandable leaf. Unvisited children win in
    /// creation order; ties keep the earlier child.
    fn select(&self) -> Option<usize> {
        if !self.open(0) {
            return None;
        }
        let mut cur = 0;
        loop {
            let n = &self.nodes[cur];
            if n.children.is_empty() {
                return Some(cur);
            }
            let open: Vec<usize> = n
                .children
                .iter()
                .copied()
                .filter(|&c| self.open(c))
                .collect();
            let next = match open.iter().find(|&&c| self.nodes[c].visits == 0) {
                Some(&c) => c,
                None => {
                    let mut best = open[0];
                    let mut best_score = self.uct(cur, best);
                    for &c in &open[1..] {
                        let s = self.uct(cur, c);
                        if s > best_score {
                            best = c;
                            best_score = s;
                        }
                    }
                    best
                }
            };
            cur = next;
        }
    }

    fn backprop(&mut self, from: usize, reward: f64) {
        let mut cur = Some(from);
        while let Some(i) = cur {
            self.nodes[i].visits += 1;
            self.nodes[i].q_value += reward;
            cur = self.nodes[i].parent;
        }
    }

    fn flags(&self) -> BTreeMap<String, NodeFlags> {
        self.nodes
            .iter()
            .map(|n| (n.label.clone(), n.flags()))
            .collect()
    }
}

/// LATS-style search: select by UCT, expand the leaf into `branching`
/// children (restore, act, checkpoint, test each), back up a seeded reward
/// per child, then collect garbage under `config.gc`. A restore that fails
/// aborts the iteration without touching visit counts.
pub fn run_mcts(config: &RunConfig, p: &MctsParams) -> Result<MctsRun, ReplayError> {
    assert!(p.budget >= 1, "budget must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let base = synthetic_base(config.seed, p.base_files, 2048, p.base_pages);
    let mut h = Harness::new(p.mode, config.manager_config(), &base)
        .map_err(|source| ReplayError::Manager { index: 0, source })?;
    h.set_test_pass_prob(p.test_pass_prob);
    let mut tree = Tree {
        nodes: vec![MctsNode {
            label: "root".into(),
            snapshot: h.snapshot_of("root"),
            parent: None,
            children: Vec::new(),
            depth: 0,
            q_value: 0.0,
            visits: 0,
            reward: 0.0,
            terminal: false,
            failed: false,
            duplicate: false,
            expansion_budget_remaining: p.branching,
            children_reached_reward: false,
        }],
    };
    let mut s = MctsSummary::default();
    let mut event = 0usize;
    let mut streak_node: Option<usize> = None;
    let mut streak = 0u32;
    let mut last_gc = None;
    let pages = p.base_pages.max(1) * 4;

    for it in 0..p.budget {
        let Some(leaf) = tree.select() else {
            s.exhausted = true;
            break;
        };
        s.iterations += 1;
        let leaf_label = tree.nodes[leaf].label.clone();
        let mut new_children = Vec::with_capacity(p.branching);
        let mut failed = false;
        // States already present at this level; a child landing on one of
        // them is a duplicate.
        let mut seen: Vec<[u8; 32]> = Vec::with_capacity(p.branching + 1);
        let mut sibling_actions: Vec<Vec<TraceEvent>> = Vec::with_capacity(p.branching);
        for j in 0..p.branching {
            match h.apply(
                event,
                &TraceEvent::Restore {
                    label: leaf_label.clone(),
                },
            ) {
                Ok(_) => {}
                Err(ReplayError::UnknownSnapshot { .. }) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
            event += 1;
            if j == 0 {
                seen.push(state_digest(&h.state()));
            }
            let actions: Vec<TraceEvent> = if j > 0 && rng.random_bool(p.sibling_repeat_prob) {
                sibling_actions[rng.random_range(0..j)].clone()
            } else {
                let n_actions = rng.random_range(1..=p.max_actions.max(1));
                (0..n_actions)
                    .map(|_| random_action(&mut rng, config.read_only_ratio, pages))
                    .collect()
            };
            for a in &actions {
                h.apply(event, a)?;
                event += 1;
            }
            sibling_actions.push(actions);
            let digest = state_digest(&h.state());
            let duplicate = seen.contains(&digest);
            seen.push(digest);
            let idx = tree.nodes.len();
            let label = format!("n{idx}");
            let sid = match h.apply(
                event,
                &TraceEvent::Checkpoint {
                    label: Some(label.clone()),
                },
            )? {
                Outcome::Checkpointed(sid) => sid,
                _ => None,
            };
            event += 1;
            let test = TraceEvent::Test {
                dirt: Dirt { files: 1, pages: 2 },
                seed: rng.random(),
            };
            let passed = matches!(h.apply(event, &test)?, Outcome::Verdict(true));
            event += 1;
            let draw: f64 = rng.random();
            let reward = if passed { draw } else { 0.0 };
            let depth = tree.nodes[leaf].depth + 1;
            tree.nodes.push(MctsNode {
                label,
                snapshot: sid,
                parent: Some(leaf),
                children: Vec::new(),
                depth,
                q_value: 0.0,
                visits: 0,
                reward,
                terminal: depth >= p.depth_limit || reward > p.reward_threshold,
                failed: !passed,
                duplicate,
                expansion_budget_remaining: p.branching,
                children_reached_reward: false,
            });
            new_children.push((idx, reward));
        }

        if failed {
            // Nothing was created and no visit counts moved.
            s.failed_restores += 1;
            if streak_node == Some(leaf) {
                streak += 1;
            } else {
                streak_node = Some(leaf);
                streak = 1;
            }
            s.max_failed_streak = s.max_failed_streak.max(streak);
            if streak >= config.livelock_streak {
                s.livelock = Some(Livelock {
                    node: leaf,
                    label: leaf_label,
                    detected_at_iteration: it + 1,
                    streak,
                });
                break;
            }
            continue;
        }
        streak = 0;
        streak_node = None;
        s.expansions += 1;
        tree.nodes[leaf].expansion_budget_remaining = 0;
        for (idx, reward) in new_children {
            tree.nodes[leaf].children.push(idx);
            if reward > p.reward_threshold {
                tree.nodes[leaf].children_reached_reward = true;
            }
            tree.backprop(idx, reward);
            s.best_reward = s.best_reward.max(reward);
        }
        if let Some(r) = h.gc(config.gc, &tree.flags()) {
            s.gc_passes += 1;
            s.gc_evicted += r.evicted.len() as u64;
            last_gc = Some(r);
        }
    }

    s.tree_size = tree.nodes.len();
    s.terminal_nodes = tree.nodes.iter().filter(|n| n.terminal).count();
    s.failed_nodes = tree.nodes.iter().filter(|n| n.failed).count();
    s.duplicate_nodes = tree.nodes.iter().filter(|n| n.duplicate).count();
    if let Some(m) = h.manager() {
        s.final_dump_bytes = m.storage().logical_dump_bytes;
        s.pool_max_len = m.pool().stats().max_len;
    }
    Ok(MctsRun {
        summary: s,
        tree: tree.nodes,
        harness: h,
        last_gc,
    })
}
