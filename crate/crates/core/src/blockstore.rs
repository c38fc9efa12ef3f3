//! Refcounted physical block storage.
//!
//! Every logical mapping (a file's extent map, a process address space, a
//! dump image, a template snapshot) is a [`BlockTable`] naming physical
//! blocks by id. Sharing a block between tables bumps its refcount; a write
//! through a table that does not exclusively own the target block first
//! privatizes it. All duplicated bytes are charged to
//! [`StoreStats::data_bytes_copied`], which is what makes write amplification
//! measurable.
//!
//! [`ShareMode::Reflink`] clones extents by reference. [`ShareMode::FullCopy`]
//! duplicates every block at clone time, modelling backing filesystems
//! without reflink support.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

/// Physical block and page granularity.
pub const BLOCK_SIZE: usize = 4096;

const BLOCK_SIZE_U64: u64 = BLOCK_SIZE as u64;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub u64);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.0)
    }
}

/// Identity of a [`BlockTable`], used only by the event journal.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct TableId(pub u64);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShareMode {
    Reflink,
    FullCopy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    /// Live physical blocks.
    pub physical_block_count: u64,
    /// Cumulative bytes physically duplicated (privatization + full-copy clone).
    pub data_bytes_copied: u64,
    /// Cumulative map-entry operations.
    pub metadata_ops: u64,
    /// Cumulative copy-on-write privatizations.
    pub privatizations: u64,
    /// Cumulative blocks duplicated by full-copy clones.
    pub full_copy_blocks: u64,
    /// Cumulative fresh allocations.
    pub allocations: u64,
}

impl StoreStats {
    pub fn copied_since(&self, earlier: &StoreStats) -> u64 {
        self.data_bytes_copied - earlier.data_bytes_copied
    }

    pub fn metadata_ops_since(&self, earlier: &StoreStats) -> u64 {
        self.metadata_ops - earlier.metadata_ops
    }
}

/// Table-level operations, recorded when the journal is enabled.
///
/// The journal lets an independent shadow model recount duplication events
/// without looking at refcounts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum JournalEvent {
    NewTable(TableId),
    /// `dst[dst_index]` now references the same block as `src[src_index]`.
    Share {
        dst: TableId,
        dst_index: u64,
        src: TableId,
        src_index: u64,
    },
    /// `dst[dst_index]` receives a physical duplicate of `src[src_index]`.
    Copy {
        dst: TableId,
        dst_index: u64,
        src: TableId,
        src_index: u64,
    },
    /// Bytes written into `table[index]` (allocating it if absent).
    Write {
        table: TableId,
        index: u64,
    },
    /// Privatization without content change (async warm).
    Touch {
        table: TableId,
        index: u64,
    },
    Remove {
        table: TableId,
        index: u64,
    },
    DropTable(TableId),
}

/// One refcount-conservation violation found by [`BlockStore::verify_refcounts`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RefcountViolation {
    pub block: BlockId,
    pub recorded: u32,
    pub referenced: u32,
}

impl fmt::Display for RefcountViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "block {}: refcount {} but {} live references",
            self.block, self.recorded, self.referenced
        )
    }
}

struct Slot {
    data: Box<[u8; BLOCK_SIZE]>,
    refcount: u32,
}

struct State {
    blocks: HashMap<BlockId, Slot>,
    next_block: u64,
    next_table: u64,
    stats: StoreStats,
    journal: Option<Vec<JournalEvent>>,
}

impl State {
    fn record(&mut self, ev: JournalEvent) {
        if let Some(j) = self.journal.as_mut() {
            j.push(ev);
        }
    }

    fn alloc(&mut self, data: Box<[u8; BLOCK_SIZE]>) -> BlockId {
        let id = BlockId(self.next_block);
        self.next_block += 1;
        self.blocks.insert(id, Slot { data, refcount: 1 });
        self.stats.physical_block_count += 1;
        self.stats.allocations += 1;
        id
    }

    fn share(&mut self, id: BlockId) {
        let slot = self
            .blocks
            .get_mut(&id)
            .unwrap_or_else(|| panic!("share of unknown block {id}"));
        slot.refcount += 1;
    }

    fn release(&mut self, id: BlockId) {
        let slot = self
            .blocks
            .get_mut(&id)
            .unwrap_or_else(|| panic!("block {id} released with no live references"));
        assert!(slot.refcount > 0, "block {id} released with refcount 0");
        slot.refcount -= 1;
        if slot.refcount == 0 {
            self.blocks.remove(&id);
            self.stats.physical_block_count -= 1;
        }
    }

    fn duplicate(&mut self, id: BlockId) -> BlockId {
        let data = self.blocks[&id].data.clone();
        self.stats.data_bytes_copied += BLOCK_SIZE_U64;
        self.alloc(data)
    }

    fn refcount(&self, id: BlockId) -> u32 {
        self.blocks.get(&id).map_or(0, |s| s.refcount)
    }
}

fn zero_block() -> Box<[u8; BLOCK_SIZE]> {
    vec![0u8; BLOCK_SIZE]
        .into_boxed_slice()
        .try_into()
        .expect("exact block length")
}

struct Inner {
    mode: ShareMode,
    state: Mutex<State>,
}

/// Shared handle to a block store. Cloning the handle does not clone blocks.
#[derive(Clone)]
pub struct BlockStore {
    inner: Arc<Inner>,
}

impl fmt::Debug for BlockStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlockStore")
            .field("mode", &self.inner.mode)
            .field("stats", &self.stats())
            .finish()
    }
}

impl BlockStore {
    pub fn new(mode: ShareMode) -> Self {
        BlockStore {
            inner: Arc::new(Inner {
                mode,
                state: Mutex::new(State {
                    blocks: HashMap::new(),
                    next_block: 0,
                    next_table: 0,
                    stats: StoreStats::default(),
                    journal: None,
                }),
            }),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        // A panic while holding the lock is already a hard fault; keep the
        // state reachable so Drop impls can still release their blocks.
        self.inner.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn mode(&self) -> ShareMode {
        self.inner.mode
    }

    pub fn stats(&self) -> StoreStats {
        self.lock().stats
    }

    pub fn same_store(&self, other: &BlockStore) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn enable_journal(&self) {
        let mut st = self.lock();
        if st.journal.is_none() {
            st.journal = Some(Vec::new());
        }
    }

    pub fn take_journal(&self) -> Vec<JournalEvent> {
        self.lock()
            .journal
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    /// Allocates an unmanaged block with refcount 1. The caller owns the
    /// reference and must hand it back with [`BlockStore::release_block`].
    pub fn alloc_block(&self, content: &[u8]) -> BlockId {
        assert_eq!(
            content.len(),
            BLOCK_SIZE,
            "block content must be exactly BLOCK_SIZE"
        );
        let mut data = zero_block();
        data.copy_from_slice(content);
        self.lock().alloc(data)
    }

    pub fn release_block(&self, id: BlockId) {
        self.lock().release(id);
    }

    pub fn refcount(&self, id: BlockId) -> u32 {
        self.lock().refcount(id)
    }

    pub fn block_content(&self, id: BlockId) -> Option<Vec<u8>> {
        self.lock().blocks.get(&id).map(|s| s.data.to_vec())
    }

    pub fn live_block_ids(&self) -> Vec<BlockId> {
        let mut ids: Vec<_> = self.lock().blocks.keys().copied().collect();
        ids.sort();
        ids
    }

    /// Compares recorded refcounts against a full census of live references.
    pub fn verify_refcounts(&self, referenced: &HashMap<BlockId, u32>) -> Vec<RefcountViolation> {
        let st = self.lock();
        let mut out = Vec::new();
        for (&id, slot) in &st.blocks {
            let seen = referenced.get(&id).copied().unwrap_or(0);
            if seen != slot.refcount {
                out.push(RefcountViolation {
                    block: id,
                    recorded: slot.refcount,
                    referenced: seen,
                });
            }
        }
        for (&id, &seen) in referenced {
            if !st.blocks.contains_key(&id) {
                out.push(RefcountViolation {
                    block: id,
                    recorded: 0,
                    referenced: seen,
                });
            }
        }
        out.sort_by_key(|v| v.block);
        out
    }

    #[doc(hidden)]
    pub fn debug_set_refcount(&self, id: BlockId, refcount: u32) {
        if let Some(slot) = self.lock().blocks.get_mut(&id) {
            slot.refcount = refcount;
        }
    }

    // ---- tables -----------------------------------------------------------

    pub fn new_table(&self) -> BlockTable {
        let mut st = self.lock();
        let id = TableId(st.next_table);
        st.next_table += 1;
        st.record(JournalEvent::NewTable(id));
        BlockTable {
            store: self.clone(),
            id,
            entries: BTreeMap::new(),
        }
    }

    fn assert_owned(&self, table: &BlockTable) {
        assert!(
            self.same_store(&table.store),
            "table belongs to a different store"
        );
    }

    fn put(st: &mut State, table: &mut BlockTable, index: u64, id: BlockId) {
        if let Some(old) = table.entries.insert(index, id) {
            st.release(old);
        }
    }

    /// Makes `dst[dst_index]` reference the block behind `src[src_index]`.
    pub fn share_entry(
        &self,
        dst: &mut BlockTable,
        dst_index: u64,
        src: &BlockTable,
        src_index: u64,
    ) {
        self.assert_owned(dst);
        self.assert_owned(src);
        let id = src.entries[&src_index];
        let mut st = self.lock();
        st.share(id);
        st.stats.metadata_ops += 1;
        Self::put(&mut st, dst, dst_index, id);
        st.record(JournalEvent::Share {
            dst: dst.id,
            dst_index,
            src: src.id,
            src_index,
        });
    }

    /// Gives `dst[dst_index]` a physical duplicate of `src[src_index]`.
    pub fn copy_entry(
        &self,
        dst: &mut BlockTable,
        dst_index: u64,
        src: &BlockTable,
        src_index: u64,
    ) {
        self.assert_owned(dst);
        self.assert_owned(src);
        let id = src.entries[&src_index];
        let mut st = self.lock();
        let copy = st.duplicate(id);
        st.stats.full_copy_blocks += 1;
        st.stats.metadata_ops += 1;
        Self::put(&mut st, dst, dst_index, copy);
        st.record(JournalEvent::Copy {
            dst: dst.id,
            dst_index,
            src: src.id,
            src_index,
        });
    }

    /// Clones every entry of `src` into a fresh table, honouring the share mode.
    pub fn clone_table(&self, src: &BlockTable) -> BlockTable {
        let mut dst = self.new_table();
        let indices: Vec<u64> = src.entries.keys().copied().collect();
        for idx in indices {
            match self.inner.mode {
                ShareMode::Reflink => self.share_entry(&mut dst, idx, src, idx),
                ShareMode::FullCopy => self.copy_entry(&mut dst, idx, src, idx),
            }
        }
        dst
    }

    /// Shares every entry of `src` into a fresh table regardless of mode.
    /// Process memory uses this: fork and dump capture are always by
    /// reference.
    pub fn share_table(&self, src: &BlockTable) -> BlockTable {
        let mut dst = self.new_table();
        let indices: Vec<u64> = src.entries.keys().copied().collect();
        for idx in indices {
            self.share_entry(&mut dst, idx, src, idx);
        }
        dst
    }

    /// Writes `data` at `offset` inside block `index`, allocating a zero
    /// block when absent and privatizing a shared block first. Returns
    /// `true` when a privatization happened.
    pub fn write_block(
        &self,
        table: &mut BlockTable,
        index: u64,
        offset: usize,
        data: &[u8],
    ) -> bool {
        self.assert_owned(table);
        assert!(
            offset + data.len() <= BLOCK_SIZE,
            "write crosses block boundary"
        );
        let mut st = self.lock();
        let mut privatized = false;
        let id = match table.entries.get(&index).copied() {
            None => {
                let id = st.alloc(zero_block());
                st.stats.metadata_ops += 1;
                table.entries.insert(index, id);
                id
            }
            Some(id) if st.refcount(id) > 1 => {
                let copy = st.duplicate(id);
                st.stats.privatizations += 1;
                st.stats.metadata_ops += 1;
                st.release(id);
                table.entries.insert(index, copy);
                privatized = true;
                copy
            }
            Some(id) => id,
        };
        let slot = st.blocks.get_mut(&id).expect("live block");
        slot.data[offset..offset + data.len()].copy_from_slice(data);
        st.record(JournalEvent::Write {
            table: table.id,
            index,
        });
        privatized
    }

    /// Privatizes `table[index]` without changing its content. Returns
    /// `true` when the block was shared and a copy was made.
    pub fn privatize(&self, table: &mut BlockTable, index: u64) -> bool {
        self.assert_owned(table);
        let Some(id) = table.entries.get(&index).copied() else {
            return false;
        };
        let mut st = self.lock();
        if st.refcount(id) <= 1 {
            return false;
        }
        let copy = st.duplicate(id);
        st.stats.privatizations += 1;
        st.stats.metadata_ops += 1;
        st.release(id);
        table.entries.insert(index, copy);
        st.record(JournalEvent::Touch {
            table: table.id,
            index,
        });
        true
    }

    pub fn remove_entry(&self, table: &mut BlockTable, index: u64) {
        self.assert_owned(table);
        if let Some(id) = table.entries.remove(&index) {
            let mut st = self.lock();
            st.release(id);
            st.stats.metadata_ops += 1;
            st.record(JournalEvent::Remove {
                table: table.id,
                index,
            });
        }
    }

    /// Copies out the content of `table[index]`; absent entries read as zeros.
    pub fn read_block(&self, table: &BlockTable, index: u64) -> Box<[u8; BLOCK_SIZE]> {
        match table.entries.get(&index) {
            Some(id) => self.lock().blocks[id].data.clone(),
            None => zero_block(),
        }
    }

    pub fn is_shared(&self, table: &BlockTable, index: u64) -> bool {
        table
            .entries
            .get(&index)
            .is_some_and(|id| self.lock().refcount(*id) > 1)
    }

    // ---- extent maps --------------------------------------------------------

    pub fn new_map(&self) -> ExtentMap {
        ExtentMap {
            table: self.new_table(),
            file_size: 0,
        }
    }

    /// Clones a file's extent map. Reflink shares blocks by reference;
    /// FullCopy duplicates every block.
    pub fn clone_map(&self, src: &ExtentMap) -> ExtentMap {
        ExtentMap {
            table: self.clone_table(&src.table),
            file_size: src.file_size,
        }
    }

    pub fn write_range(&self, map: &mut ExtentMap, offset: u64, data: &[u8]) {
        let end = offset + data.len() as u64;
        // Extend with zero blocks so every index below the new size is mapped.
        let old_blocks = map.block_count();
        let new_size = map.file_size.max(end);
        let new_blocks = new_size.div_ceil(BLOCK_SIZE_U64);
        let mut written = 0usize;
        let mut pos = offset;
        while written < data.len() {
            let index = pos / BLOCK_SIZE_U64;
            let in_block = (pos % BLOCK_SIZE_U64) as usize;
            let n = (BLOCK_SIZE - in_block).min(data.len() - written);
            self.write_block(&mut map.table, index, in_block, &data[written..written + n]);
            written += n;
            pos += n as u64;
        }
        for index in old_blocks..new_blocks {
            if !map.table.entries.contains_key(&index) {
                self.write_block(&mut map.table, index, 0, &[]);
            }
        }
        map.file_size = new_size;
    }

    /// Reads up to `len` bytes; the result is short past end of file.
    pub fn read_range(&self, map: &ExtentMap, offset: u64, len: usize) -> Vec<u8> {
        if offset >= map.file_size {
            return Vec::new();
        }
        let end = map.file_size.min(offset + len as u64);
        let mut out = Vec::with_capacity((end - offset) as usize);
        let st = self.lock();
        let mut pos = offset;
        while pos < end {
            let index = pos / BLOCK_SIZE_U64;
            let in_block = (pos % BLOCK_SIZE_U64) as usize;
            let n = ((BLOCK_SIZE - in_block) as u64).min(end - pos) as usize;
            let id = map.table.entries[&index];
            out.extend_from_slice(&st.blocks[&id].data[in_block..in_block + n]);
            pos += n as u64;
        }
        out
    }

    pub fn read_all(&self, map: &ExtentMap) -> Vec<u8> {
        self.read_range(map, 0, map.file_size as usize)
    }

    pub fn drop_map(&self, map: ExtentMap) {
        drop(map);
    }
}

/// Ordered index → block mapping whose references are released on drop.
pub struct BlockTable {
    store: BlockStore,
    id: TableId,
    entries: BTreeMap<u64, BlockId>,
}

impl BlockTable {
    pub fn id(&self) -> TableId {
        self.id
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: u64) -> Option<BlockId> {
        self.entries.get(&index).copied()
    }

    pub fn contains(&self, index: u64) -> bool {
        self.entries.contains_key(&index)
    }

    pub fn indices(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, BlockId)> + '_ {
        self.entries.iter().map(|(&i, &b)| (i, b))
    }
}

impl fmt::Debug for BlockTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlockTable")
            .field("id", &self.id)
            .field("entries", &self.entries)
            .finish()
    }
}

impl Drop for BlockTable {
    fn drop(&mut self) {
        let mut st = self.store.lock();
        for &id in self.entries.values() {
            st.release(id);
        }
        st.record(JournalEvent::DropTable(self.id));
    }
}

/// A file's logical-block → physical-block map.
#[derive(Debug)]
pub struct ExtentMap {
    table: BlockTable,
    file_size: u64,
}

impl ExtentMap {
    pub fn file_size(&self) -> u64 {
        self.file_size
    }

    pub fn block_count(&self) -> u64 {
        self.file_size.div_ceil(BLOCK_SIZE_U64)
    }

    pub fn table(&self) -> &BlockTable {
        &self.table
    }

    pub fn block_ids(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.table.entries.values().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(store: &BlockStore, len: usize, byte: u8) -> ExtentMap {
        let mut m = store.new_map();
        store.write_range(&mut m, 0, &vec![byte; len]);
        m
    }

    #[test]
    fn alloc_gives_distinct_ids_without_dedup() {
        let s = BlockStore::new(ShareMode::Reflink);
        let a = s.alloc_block(&[0u8; BLOCK_SIZE]);
        let b = s.alloc_block(&[0u8; BLOCK_SIZE]);
        assert_ne!(a, b);
        assert_eq!(s.refcount(a), 1);
        assert_eq!(s.stats().physical_block_count, 2);
        s.release_block(a);
        s.release_block(b);
        assert_eq!(s.stats().physical_block_count, 0);
    }

    #[test]
    #[should_panic(expected = "exactly BLOCK_SIZE")]
    fn alloc_rejects_short_content() {
        BlockStore::new(ShareMode::Reflink).alloc_block(&[1, 2, 3]);
    }

    #[test]
    #[should_panic(expected = "released")]
    fn double_release_is_fatal() {
        let s = BlockStore::new(ShareMode::Reflink);
        let a = s.alloc_block(&[0u8; BLOCK_SIZE]);
        s.release_block(a);
        s.release_block(a);
    }

    #[test]
    fn reflink_clone_copies_no_data() {
        let s = BlockStore::new(ShareMode::Reflink);
        let m = filled(&s, 1 << 20, 7);
        let before = s.stats();
        let c = s.clone_map(&m);
        let after = s.stats();
        assert_eq!(after.copied_since(&before), 0);
        assert_eq!(after.metadata_ops_since(&before), 256);
        assert_eq!(s.read_all(&c), s.read_all(&m));
    }

    #[test]
    fn fullcopy_clone_charges_rounded_size() {
        let s = BlockStore::new(ShareMode::FullCopy);
        let m = filled(&s, 256 * 1024, 1);
        let before = s.stats();
        let _c = s.clone_map(&m);
        assert_eq!(s.stats().copied_since(&before), 262_144);

        let odd = filled(&s, 5000, 2);
        let before = s.stats();
        let _c = s.clone_map(&odd);
        assert_eq!(s.stats().copied_since(&before), 8192);
    }

    #[test]
    fn clone_of_empty_map_is_free() {
        let s = BlockStore::new(ShareMode::FullCopy);
        let m = s.new_map();
        let before = s.stats();
        let c = s.clone_map(&m);
        assert_eq!(c.file_size(), 0);
        assert_eq!(s.stats().copied_since(&before), 0);
        assert_eq!(s.stats().metadata_ops_since(&before), 0);
    }

    #[test]
    fn write_privatizes_only_shared_blocks() {
        let s = BlockStore::new(ShareMode::Reflink);
        let mut m = filled(&s, 8 * BLOCK_SIZE, 3);
        let before = s.stats();
        s.write_range(&mut m, 10, &[9]);
        assert_eq!(
            s.stats().copied_since(&before),
            0,
            "exclusive owner writes in place"
        );

        let c = s.clone_map(&m);
        let before = s.stats();
        s.write_range(&mut m, 3 * BLOCK_SIZE as u64 + 5, &[1]);
        assert_eq!(s.stats().copied_since(&before), 4096);

        let before = s.stats();
        s.write_range(&mut m, 4 * BLOCK_SIZE as u64 - 1, &[1, 2]);
        assert_eq!(
            s.stats().copied_since(&before),
            4096,
            "block 3 already private, block 4 shared"
        );
        drop(c);
    }

    #[test]
    fn write_spanning_two_shared_blocks_costs_two() {
        let s = BlockStore::new(ShareMode::Reflink);
        let mut m = filled(&s, 8 * BLOCK_SIZE, 3);
        let _c = s.clone_map(&m);
        let before = s.stats();
        s.write_range(&mut m, 3 * BLOCK_SIZE as u64 + 100, &vec![5u8; BLOCK_SIZE]);
        assert_eq!(s.stats().copied_since(&before), 8192);
    }

    #[test]
    fn extending_write_zero_fills_gap() {
        let s = BlockStore::new(ShareMode::Reflink);
        let mut m = s.new_map();
        s.write_range(&mut m, 3 * BLOCK_SIZE as u64 + 1, b"xy");
        assert_eq!(m.file_size(), 3 * BLOCK_SIZE as u64 + 3);
        assert_eq!(m.table().len(), 4);
        let bytes = s.read_all(&m);
        assert!(bytes[..3 * BLOCK_SIZE + 1].iter().all(|&b| b == 0));
        assert_eq!(&bytes[3 * BLOCK_SIZE + 1..], b"xy");
        assert_eq!(s.read_range(&m, m.file_size() - 1, 100), b"y");
        assert!(s.read_range(&m, m.file_size(), 4).is_empty());
    }

    #[test]
    fn dropping_maps_frees_blocks() {
        let s = BlockStore::new(ShareMode::Reflink);
        let m = filled(&s, 3 * BLOCK_SIZE, 1);
        let c = s.clone_map(&m);
        assert_eq!(s.stats().physical_block_count, 3);
        s.drop_map(m);
        assert_eq!(
            s.stats().physical_block_count,
            3,
            "clone keeps shared blocks alive"
        );
        s.drop_map(c);
        assert_eq!(s.stats().physical_block_count, 0);
    }

    #[test]
    fn verify_refcounts_flags_corruption() {
        let s = BlockStore::new(ShareMode::Reflink);
        let m = filled(&s, BLOCK_SIZE, 1);
        let id = m.block_ids().next().unwrap();
        let census: HashMap<BlockId, u32> = [(id, 1)].into();
        assert!(s.verify_refcounts(&census).is_empty());
        s.debug_set_refcount(id, 2);
        let v = s.verify_refcounts(&census);
        assert_eq!(
            v,
            vec![RefcountViolation {
                block: id,
                recorded: 2,
                referenced: 1
            }]
        );
        s.debug_set_refcount(id, 1);
    }

    #[test]
    fn concurrent_writes_to_distinct_maps() {
        let s = BlockStore::new(ShareMode::Reflink);
        let base = filled(&s, 64 * BLOCK_SIZE, 0);
        let mut maps: Vec<_> = (0..4).map(|_| s.clone_map(&base)).collect();
        std::thread::scope(|scope| {
            for (i, m) in maps.iter_mut().enumerate() {
                let s = s.clone();
                scope.spawn(move || {
                    for b in 0..64u64 {
                        s.write_range(m, b * BLOCK_SIZE as u64, &[i as u8 + 1]);
                    }
                });
            }
        });
        assert_eq!(
            s.stats().copied_since(&StoreStats::default()),
            4 * 64 * 4096
        );
        for m in &maps {
            for id in m.block_ids() {
                assert_eq!(s.refcount(id), 1);
            }
        }
        for id in base.block_ids() {
            assert_eq!(s.refcount(id), 1);
        }
    }
}
