use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::blockstore::BlockTable;
use crate::ids::{RequestId, SnapshotId, TemplateId};

use super::space::AddressSpace;
use super::{ProcError, PAGE_SIZE};

/// A frozen, page-sharing fork of an address space. Dropping it releases
/// every page reference.
#[derive(Debug)]
pub struct Template {
    pub(crate) id: TemplateId,
    pub(crate) snapshot: BlockTable,
    pub(crate) hot_zone: Vec<u64>,
    pub(crate) cursor: u64,
    pub(crate) outstanding: BTreeSet<RequestId>,
}

impl Template {
    pub fn id(&self) -> TemplateId {
        self.id
    }

    pub fn snapshot(&self) -> &BlockTable {
        &self.snapshot
    }

    pub fn page_count(&self) -> usize {
        self.snapshot.len()
    }

    pub fn logical_bytes(&self) -> u64 {
        (self.snapshot.len() * PAGE_SIZE) as u64
    }

    /// Forks a new running space from this template.
    pub fn fork(&self) -> AddressSpace {
        let store = self.snapshot.store().clone();
        let pages = store.share_table(&self.snapshot);
        AddressSpace::restored(
            store,
            pages,
            self.hot_zone.clone(),
            self.cursor,
            self.outstanding.clone(),
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStats {
    pub inserts: u64,
    pub evictions: u64,
    pub kills: u64,
    pub fast_hits: u64,
    pub misses: u64,
    pub max_len: usize,
}

/// Bounded template pool with least-recently-used eviction.
#[derive(Debug)]
pub struct TemplatePool {
    capacity: usize,
    entries: HashMap<SnapshotId, Template>,
    // Least recent first.
    lru: Vec<SnapshotId>,
    stats: PoolStats,
}

impl TemplatePool {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "template pool capacity must be positive");
        TemplatePool {
            capacity,
            entries: HashMap::new(),
            lru: Vec::new(),
            stats: PoolStats::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stats(&self) -> PoolStats {
        self.stats
    }

    pub fn contains(&self, id: SnapshotId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn get(&self, id: SnapshotId) -> Option<&Template> {
        self.entries.get(&id)
    }

    /// Snapshot ids from least to most recently used.
    pub fn lru_order(&self) -> &[SnapshotId] {
        &self.lru
    }

    fn unlink(&mut self, id: SnapshotId) {
        if let Some(pos) = self.lru.iter().position(|x| *x == id) {
            self.lru.remove(pos);
        }
    }

    pub fn touch(&mut self, id: SnapshotId) -> bool {
        if !self.entries.contains_key(&id) {
            return false;
        }
        self.unlink(id);
        self.lru.push(id);
        true
    }

    /// Inserts a template, evicting the least recently used entry when the
    /// pool is over capacity. Returns the evicted snapshot id.
    pub fn insert(&mut self, id: SnapshotId, template: Template) -> Option<SnapshotId> {
        self.stats.inserts += 1;
        if self.entries.insert(id, template).is_some() {
            self.unlink(id);
        }
        self.lru.push(id);
        let evicted = if self.entries.len() > self.capacity {
            let victim = self.lru.remove(0);
            self.entries.remove(&victim);
            self.stats.evictions += 1;
            Some(victim)
        } else {
            None
        };
        self.stats.max_len = self.stats.max_len.max(self.entries.len());
        evicted
    }

    /// Kills a template outside LRU order.
    pub fn remove(&mut self, id: SnapshotId) -> bool {
        let hit = self.entries.remove(&id).is_some();
        if hit {
            self.unlink(id);
            self.stats.kills += 1;
        }
        hit
    }

    /// Fast-path restore: clones the template's page table.
    pub fn restore_fast(&mut self, id: SnapshotId) -> Result<AddressSpace, ProcError> {
        let Some(t) = self.entries.get(&id) else {
            self.stats.misses += 1;
            return Err(ProcError::TemplateMiss(id));
        };
        let space = t.fork();
        self.stats.fast_hits += 1;
        self.touch(id);
        Ok(space)
    }

    pub fn logical_bytes(&self) -> u64 {
        self.entries.values().map(Template::logical_bytes).sum()
    }
}
