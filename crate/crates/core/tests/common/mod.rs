//! Independent models used as expected values by the integration suites.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use deltastate::blockstore::{JournalEvent, TableId};
use deltastate::procstate::WarmStep;

/// Brute-force replica of block sharing, driven only by the store journal.
///
/// It never looks at the real refcounts. Tables it has not seen are taken to
/// be empty, so start it on a store with no live blocks.
#[derive(Default)]
pub struct ShadowStore {
    tables: HashMap<TableId, BTreeMap<u64, u64>>,
    refs: HashMap<u64, u32>,
    next: u64,
    /// Physical duplications: copy-on-write privatizations plus full copies.
    pub duplications: u64,
}

impl ShadowStore {
    fn alloc(&mut self) -> u64 {
        let b = self.next;
        self.next += 1;
        self.refs.insert(b, 1);
        b
    }

    fn release(&mut self, b: u64) {
        let r = self
            .refs
            .get_mut(&b)
            .expect("shadow release of a dead block");
        *r -= 1;
        if *r == 0 {
            self.refs.remove(&b);
        }
    }

    fn put(&mut self, t: TableId, i: u64, b: u64) {
        if let Some(old) = self.tables.entry(t).or_default().insert(i, b) {
            self.release(old);
        }
    }

    fn entry(&self, t: TableId, i: u64) -> Option<u64> {
        self.tables.get(&t).and_then(|m| m.get(&i)).copied()
    }

    /// Gives `t[i]` its own block if it currently shares one.
    fn unshare(&mut self, t: TableId, i: u64) {
        if let Some(b) = self.entry(t, i) {
            if self.refs[&b] > 1 {
                self.duplications += 1;
                let nb = self.alloc();
                self.put(t, i, nb);
            }
        }
    }

    pub fn apply(&mut self, ev: &JournalEvent) {
        match *ev {
            JournalEvent::NewTable(t) => {
                self.tables.insert(t, BTreeMap::new());
            }
            JournalEvent::Share {
                dst,
                dst_index,
                src,
                src_index,
            } => {
                let b = self
                    .entry(src, src_index)
                    .expect("share from an empty slot");
                *self.refs.get_mut(&b).unwrap() += 1;
                self.put(dst, dst_index, b);
            }
            JournalEvent::Copy {
                dst,
                dst_index,
                src,
                src_index,
            } => {
                self.entry(src, src_index).expect("copy from an empty slot");
                self.duplications += 1;
                let nb = self.alloc();
                self.put(dst, dst_index, nb);
            }
            JournalEvent::Write { table, index } => {
                if self.entry(table, index).is_none() {
                    let nb = self.alloc();
                    self.put(table, index, nb);
                } else {
                    self.unshare(table, index);
                }
            }
            JournalEvent::Touch { table, index } => self.unshare(table, index),
            JournalEvent::Remove { table, index } => {
                if let Some(b) = self.tables.entry(table).or_default().remove(&index) {
                    self.release(b);
                }
            }
            JournalEvent::DropTable(t) => {
                for b in self.tables.remove(&t).unwrap_or_default().into_values() {
                    self.release(b);
                }
            }
        }
    }

    pub fn live_blocks(&self) -> u64 {
        self.refs.len() as u64
    }
}

/// Step simulation of the warmer racing the agent over plain sets.
/// Returns (faults absorbed by the warmer, faults on the critical path).
pub fn warm_sim(shared: &BTreeSet<u64>, hot: &[u64], schedule: &[WarmStep]) -> (u64, u64) {
    let mut order: Vec<u64> = Vec::new();
    for p in hot.iter().chain(shared.iter()) {
        if shared.contains(p) && !order.contains(p) {
            order.push(*p);
        }
    }
    let mut still = shared.clone();
    let (mut absorbed, mut critical, mut pos) = (0, 0, 0);
    for step in schedule {
        match *step {
            WarmStep::Warm(n) => {
                for _ in 0..n {
                    let Some(p) = order.get(pos) else { break };
                    pos += 1;
                    if still.remove(p) {
                        absorbed += 1;
                    }
                }
            }
            WarmStep::Write { page, .. } => {
                if still.remove(&page) {
                    critical += 1;
                }
            }
        }
    }
    (absorbed, critical)
}
