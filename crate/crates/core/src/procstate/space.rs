use std::collections::{BTreeMap, BTreeSet};

use crate::blockstore::{BlockStore, BlockTable};
use crate::ids::{ImageId, RequestId, TemplateId};

use super::image::DumpImage;
use super::pool::Template;
use super::{FaultLog, ProcError, PAGE_SIZE};

/// One step of a warm-up interleaving.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarmStep {
    /// The warmer advances `n` positions through its page order.
    Warm(usize),
    /// The agent writes one byte at the start of `page`.
    Write { page: u64, byte: u8 },
}

/// The agent's memory plus the continuation state that travels with it.
#[derive(Debug)]
pub struct AddressSpace {
    store: BlockStore,
    pages: BlockTable,
    soft_dirty: BTreeSet<u64>,
    hot_zone: Vec<u64>,
    quiesced: bool,
    cursor: u64,
    outstanding: BTreeSet<RequestId>,
    // Restore-epoch bookkeeping. `inherited` holds pages that came from the
    // restore source and have not been privatized by either party yet.
    inherited: BTreeSet<u64>,
    faults: FaultLog,
    warm_order: Vec<u64>,
    warm_pos: usize,
    hot_len: usize,
}

impl AddressSpace {
    pub fn new(store: BlockStore) -> Self {
        let pages = store.new_table();
        AddressSpace {
            store,
            pages,
            soft_dirty: BTreeSet::new(),
            hot_zone: Vec::new(),
            quiesced: false,
            cursor: 0,
            outstanding: BTreeSet::new(),
            inherited: BTreeSet::new(),
            faults: FaultLog::default(),
            warm_order: Vec::new(),
            warm_pos: 0,
            hot_len: 0,
        }
    }

    /// Builds a space over an already-shared page table and opens a fresh
    /// fault epoch.
    pub(crate) fn restored(
        store: BlockStore,
        pages: BlockTable,
        hot_zone: Vec<u64>,
        cursor: u64,
        outstanding: BTreeSet<RequestId>,
    ) -> Self {
        let inherited: BTreeSet<u64> = pages.indices().collect();
        let mut warm_order: Vec<u64> = Vec::with_capacity(inherited.len());
        let mut seen = BTreeSet::new();
        for &p in &hot_zone {
            if inherited.contains(&p) && seen.insert(p) {
                warm_order.push(p);
            }
        }
        let hot_len = warm_order.len();
        warm_order.extend(inherited.iter().filter(|p| !seen.contains(p)));
        AddressSpace {
            store,
            pages,
            soft_dirty: BTreeSet::new(),
            hot_zone,
            quiesced: false,
            cursor,
            outstanding,
            inherited,
            faults: FaultLog::default(),
            warm_order,
            warm_pos: 0,
            hot_len,
        }
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn pages(&self) -> &BlockTable {
        &self.pages
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn soft_dirty(&self) -> &BTreeSet<u64> {
        &self.soft_dirty
    }

    pub fn hot_zone(&self) -> &[u64] {
        &self.hot_zone
    }

    pub fn is_quiesced(&self) -> bool {
        self.quiesced
    }

    pub fn quiesce(&mut self) {
        self.quiesced = true;
    }

    pub fn resume(&mut self) {
        self.quiesced = false;
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn advance_cursor(&mut self) {
        self.cursor += 1;
    }

    pub fn outstanding(&self) -> &BTreeSet<RequestId> {
        &self.outstanding
    }

    pub(crate) fn expect_response(&mut self, id: RequestId) {
        self.outstanding.insert(id);
    }

    pub(crate) fn take_expected(&mut self, id: RequestId) -> bool {
        self.outstanding.remove(&id)
    }

    pub fn fault_log(&self) -> FaultLog {
        self.faults
    }

    /// Writes `data` at `offset` inside `page`, allocating a zero page on
    /// first touch. Returns true when a shared page was privatized.
    pub fn write(&mut self, page: u64, offset: usize, data: &[u8]) -> bool {
        assert!(
            offset + data.len() <= PAGE_SIZE,
            "write crosses page boundary"
        );
        let privatized = self.store.write_block(&mut self.pages, page, offset, data);
        if self.inherited.remove(&page) && privatized {
            self.faults.cow_faults_on_critical_path += 1;
        }
        self.soft_dirty.insert(page);
        privatized
    }

    pub fn read_page(&self, page: u64) -> Vec<u8> {
        self.store.read_block(&self.pages, page).to_vec()
    }

    /// Page index to content for every mapped page.
    pub fn contents(&self) -> BTreeMap<u64, Vec<u8>> {
        self.pages
            .indices()
            .map(|p| (p, self.read_page(p)))
            .collect()
    }

    // ---- dumps and templates ------------------------------------------------

    /// Captures the pages an incremental dump would contain, by reference.
    /// Leaves the soft-dirty set untouched so a failed dump can be dropped
    /// without side effects; call [`commit_dump`](Self::commit_dump) once the
    /// image is accepted.
    pub fn capture_dump(
        &self,
        id: ImageId,
        parent: Option<ImageId>,
    ) -> Result<DumpImage, ProcError> {
        if !self.quiesced {
            return Err(ProcError::NotQuiesced);
        }
        let keys: Vec<u64> = match parent {
            None => self.pages.indices().collect(),
            Some(_) => self.soft_dirty.iter().copied().collect(),
        };
        let mut captured = self.store.new_table();
        for &p in &keys {
            self.store.share_entry(&mut captured, p, &self.pages, p);
        }
        Ok(DumpImage {
            id,
            parent,
            captured,
            hot_zone: self.soft_dirty.iter().copied().collect(),
            cursor: self.cursor,
            outstanding: self.outstanding.clone(),
        })
    }

    /// Clears soft-dirty tracking after a dump and makes the dumped delta
    /// the new hot zone.
    pub fn commit_dump(&mut self, image: &DumpImage) {
        self.hot_zone = image.hot_zone.clone();
        self.soft_dirty.clear();
    }

    pub fn incremental_dump(
        &mut self,
        id: ImageId,
        parent: Option<ImageId>,
    ) -> Result<DumpImage, ProcError> {
        let image = self.capture_dump(id, parent)?;
        self.commit_dump(&image);
        Ok(image)
    }

    /// Forks a frozen template sharing every page. Copies no data.
    pub fn create_template(&self, id: TemplateId) -> Result<Template, ProcError> {
        if !self.quiesced {
            return Err(ProcError::NotQuiesced);
        }
        Ok(Template {
            id,
            snapshot: self.store.share_table(&self.pages),
            hot_zone: self.hot_zone.clone(),
            cursor: self.cursor,
            outstanding: self.outstanding.clone(),
        })
    }

    // ---- async warm ---------------------------------------------------------

    /// Advances the warmer `n` positions through its order (hot zone first,
    /// then ascending page index). Each position privatizes its page if the
    /// page is still shared. Returns the number of pages privatized.
    pub fn warm_next(&mut self, n: usize) -> usize {
        let mut done = 0;
        for _ in 0..n {
            let Some(&page) = self.warm_order.get(self.warm_pos) else {
                break;
            };
            self.warm_pos += 1;
            if self.inherited.remove(&page) && self.store.privatize(&mut self.pages, page) {
                self.faults.cow_faults_absorbed += 1;
                self.faults.pages_warmed += 1;
                done += 1;
            }
        }
        done
    }

    /// Warms the remainder of the hot zone.
    pub fn warm_hot_zone(&mut self) -> usize {
        let remaining = self.hot_len.saturating_sub(self.warm_pos);
        self.warm_next(remaining)
    }

    /// Runs an interleaving of warm steps and agent writes in order and
    /// returns the epoch's fault log afterwards.
    pub fn async_warm(&mut self, schedule: &[WarmStep]) -> FaultLog {
        for step in schedule {
            match *step {
                WarmStep::Warm(n) => {
                    self.warm_next(n);
                }
                WarmStep::Write { page, byte } => {
                    self.write(page, 0, &[byte]);
                }
            }
        }
        self.faults
    }

    /// Pages of the current epoch not yet privatized by either party.
    pub fn unwarmed_inherited(&self) -> usize {
        self.inherited.len()
    }
}
