//! Layered copy-on-write filesystem with runtime layer switching.
//!
//! A mounted stack is an ordered list of frozen lower layers (topmost first)
//! plus one writable upper. Lookups go top-down: the first `File` wins, a
//! `Whiteout` hides everything below it, and directories merge.
//!
//! [`LayerFs::checkpoint_switch`] freezes the upper in place and splices it
//! in as the topmost lower, then installs a fresh upper. No file data moves.
//! [`LayerFs::restore_switch`] swaps in a saved lower list with a fresh
//! upper. Both bump `checkpoint_gen`; open handles notice the bump on their
//! next access and re-resolve against the new stack, copying up into the new
//! upper on first write.
//!
//! Stack switches take the stack lock exclusively; handle operations share
//! it. The displaced layer array is retired and kept alive for two further
//! generations.

mod layer;
pub mod path;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock, RwLockReadGuard, RwLockWriteGuard, Weak};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockstore::{BlockId, BlockStore, ExtentMap};

use layer::UpperLayer;
pub use layer::{FileEntry, FrozenLayer, LayerEntry, LayerId, LayerKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FsError {
    #[error("no such file or directory: {0}")]
    NotFound(String),
    #[error("is a directory: {0}")]
    IsDirectory(String),
    #[error("not a directory: {0}")]
    NotADirectory(String),
    #[error("already exists: {0}")]
    AlreadyExists(String),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("unknown layer {0}")]
    UnknownLayer(LayerId),
    #[error("{0} does not exist in the restored stack")]
    StaleAfterRestore(String),
    #[error("handle is not writable")]
    ReadOnlyHandle,
    #[error("cannot abort checkpoint: {0}")]
    AbortMismatch(String),
}

/// Serializable description of a layer stack.
///
/// Only `lowers` carry content. `upper` names the writable layer that was
/// installed when the config was taken; restoring never writes into it and
/// always stacks a fresh upper instead.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub lowers: Vec<LayerId>,
    pub upper: LayerId,
    pub gen: u64,
}

/// Strong references that keep a config's lower layers alive.
#[derive(Debug, Default)]
pub struct LayerPin {
    layers: Vec<Arc<FrozenLayer>>,
}

impl LayerPin {
    pub fn layer_ids(&self) -> Vec<LayerId> {
        self.layers.iter().map(|l| l.id).collect()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum OpenMode {
    Read,
    ReadWrite,
    /// Read-write, creating an empty file in the upper if the path is absent.
    Create,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct DirEntry {
    pub name: String,
    pub is_dir: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsCounters {
    pub checkpoints: u64,
    pub restores: u64,
    pub copy_ups: u64,
    pub copy_up_reuses: u64,
    pub stale_upper_clears: u64,
    pub slow_path_resolutions: u64,
}

#[derive(Clone, Debug)]
enum Source {
    Upper(Arc<UpperLayer>),
    Lower(Arc<FrozenLayer>),
}

#[derive(Debug)]
struct HandleState {
    cached_gen: u64,
    resolved: Source,
}

/// An open file. Caches the generation and layer it was resolved against.
#[derive(Debug)]
pub struct Handle {
    path: String,
    mode: OpenMode,
    state: Mutex<HandleState>,
}

impl Handle {
    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn mode(&self) -> OpenMode {
        self.mode
    }

    pub fn cached_gen(&self) -> u64 {
        self.lock().cached_gen
    }

    /// Layer the handle currently points at.
    pub fn resolved_layer(&self) -> LayerId {
        match &self.lock().resolved {
            Source::Upper(u) => u.id,
            Source::Lower(l) => l.id,
        }
    }

    fn lock(&self) -> MutexGuard<'_, HandleState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug)]
struct Retired {
    #[allow(dead_code)] // held only to defer the free
    lowers: Vec<Arc<FrozenLayer>>,
    #[allow(dead_code)]
    upper: Arc<UpperLayer>,
    retired_at: u64,
}

#[derive(Debug)]
struct Stack {
    lowers: Vec<Arc<FrozenLayer>>,
    upper: Arc<UpperLayer>,
    gen: u64,
    retired: Vec<Retired>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Where {
    Upper,
    Lower(usize),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Kind {
    File(Where),
    Dir,
    Missing,
}

type Entries = BTreeMap<String, LayerEntry>;

impl Stack {
    /// First explicit entry for `path`, top-down.
    fn lookup(&self, upper: &Entries, path: &str) -> Option<(Where, bool, bool)> {
        // (location, is_file, is_dir); whiteout returns both false
        let classify = |e: &LayerEntry| match e {
            LayerEntry::File(_) => (true, false),
            LayerEntry::Directory => (false, true),
            LayerEntry::Whiteout => (false, false),
        };
        if let Some(e) = upper.get(path) {
            let (f, d) = classify(e);
            return Some((Where::Upper, f, d));
        }
        for (i, l) in self.lowers.iter().enumerate() {
            if let Some(e) = l.entries.get(path) {
                let (f, d) = classify(e);
                return Some((Where::Lower(i), f, d));
            }
        }
        None
    }

    fn explicit_kind(&self, upper: &Entries, path: &str) -> Kind {
        match self.lookup(upper, path) {
            Some((w, true, _)) => Kind::File(w),
            Some((_, _, true)) => Kind::Dir,
            _ => Kind::Missing,
        }
    }

    fn kind(&self, upper: &Entries, path: &str) -> Kind {
        if path == "/" {
            return Kind::Dir;
        }
        match self.explicit_kind(upper, path) {
            Kind::Missing if self.has_visible_descendant(upper, path) => Kind::Dir,
            k => k,
        }
    }

    fn candidate_paths_under<'a>(
        &'a self,
        upper: &'a Entries,
        prefix: &'a str,
    ) -> impl Iterator<Item = &'a String> + 'a {
        let layers = std::iter::once(upper).chain(self.lowers.iter().map(|l| &l.entries));
        layers.flat_map(move |entries| {
            entries
                .range::<str, _>((
                    std::ops::Bound::Included(prefix),
                    std::ops::Bound::Unbounded,
                ))
                .take_while(move |(p, _)| p.starts_with(prefix))
                .map(|(p, _)| p)
        })
    }

    fn has_visible_descendant(&self, upper: &Entries, dir: &str) -> bool {
        let prefix = path::child_prefix(dir);
        let found = self
            .candidate_paths_under(upper, &prefix)
            .any(|p| self.explicit_kind(upper, p) != Kind::Missing);
        found
    }

    /// Every visible explicit path with its kind.
    fn merged(&self, upper: &Entries) -> BTreeMap<String, Kind> {
        let mut all: BTreeSet<&String> = upper.keys().collect();
        for l in &self.lowers {
            all.extend(l.entries.keys());
        }
        all.into_iter()
            .filter_map(|p| match self.explicit_kind(upper, p) {
                Kind::Missing => None,
                k => Some((p.clone(), k)),
            })
            .collect()
    }

    /// True when the lowers alone resolve `path` to a file.
    fn lowers_have_file(&self, path: &str) -> bool {
        for l in &self.lowers {
            if let Some(e) = l.entries.get(path) {
                return matches!(e, LayerEntry::File(_));
            }
        }
        false
    }

    fn check_parents(&self, upper: &Entries, path: &str) -> Result<(), FsError> {
        for anc in path::ancestors(path) {
            if let Kind::File(_) = self.explicit_kind(upper, anc) {
                return Err(FsError::NotADirectory(anc.to_string()));
            }
        }
        Ok(())
    }

    fn file_map<'a>(&'a self, upper: &'a Entries, w: Where, path: &str) -> &'a ExtentMap {
        let entry = match w {
            Where::Upper => upper.get(path),
            Where::Lower(i) => self.lowers[i].entries.get(path),
        };
        match entry {
            Some(LayerEntry::File(f)) => &f.map,
            _ => unreachable!("resolved file entry vanished: {path}"),
        }
    }

    fn source(&self, w: Where) -> Source {
        match w {
            Where::Upper => Source::Upper(self.upper.clone()),
            Where::Lower(i) => Source::Lower(self.lowers[i].clone()),
        }
    }

    fn config(&self) -> LayerConfig {
        LayerConfig {
            lowers: self.lowers.iter().map(|l| l.id).collect(),
            upper: self.upper.id,
            gen: self.gen,
        }
    }
}

/// A mounted layer stack over a [`BlockStore`].
#[derive(Debug)]
pub struct LayerFs {
    store: BlockStore,
    stack: RwLock<Stack>,
    frozen: Mutex<HashMap<LayerId, Weak<FrozenLayer>>>,
    uppers: Mutex<Vec<Weak<UpperLayer>>>,
    next_layer: AtomicU64,
    dir_cache: Mutex<HashMap<String, Vec<DirEntry>>>,
    counters: Mutex<FsCounters>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl LayerFs {
    /// Mounts `base` as a single frozen lower under an empty upper, at
    /// generation 0.
    pub fn mount(store: BlockStore, base: &BTreeMap<String, Vec<u8>>) -> Result<Self, FsError> {
        let mut entries = Entries::new();
        for (p, bytes) in base {
            let p = path::normalize(p)?;
            if p == "/" {
                return Err(FsError::IsDirectory(p));
            }
            let mut map = store.new_map();
            store.write_range(&mut map, 0, bytes);
            entries.insert(
                p,
                LayerEntry::File(FileEntry {
                    map,
                    created_gen: 0,
                }),
            );
        }
        let base_layer = Arc::new(FrozenLayer::freeze(LayerId(0), entries, 0, &store));
        let upper = Arc::new(UpperLayer::new(LayerId(1)));
        let fs = LayerFs {
            store,
            stack: RwLock::new(Stack {
                lowers: vec![base_layer.clone()],
                upper: upper.clone(),
                gen: 0,
                retired: Vec::new(),
            }),
            frozen: Mutex::new(HashMap::from([(LayerId(0), Arc::downgrade(&base_layer))])),
            uppers: Mutex::new(vec![Arc::downgrade(&upper)]),
            next_layer: AtomicU64::new(2),
            dir_cache: Mutex::new(HashMap::new()),
            counters: Mutex::new(FsCounters::default()),
        };
        Ok(fs)
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    fn stack_read(&self) -> RwLockReadGuard<'_, Stack> {
        self.stack.read().unwrap_or_else(|e| e.into_inner())
    }

    fn stack_write(&self) -> RwLockWriteGuard<'_, Stack> {
        self.stack.write().unwrap_or_else(|e| e.into_inner())
    }

    fn fresh_upper(&self) -> Arc<UpperLayer> {
        let id = LayerId(self.next_layer.fetch_add(1, Ordering::Relaxed));
        self.register_upper(UpperLayer::new(id))
    }

    fn register_upper(&self, upper: UpperLayer) -> Arc<UpperLayer> {
        let upper = Arc::new(upper);
        let mut uppers = lock(&self.uppers);
        uppers.retain(|w| w.strong_count() > 0);
        uppers.push(Arc::downgrade(&upper));
        upper
    }

    fn invalidate_dirs(&self) {
        lock(&self.dir_cache).clear();
    }

    fn bump(&self, f: impl FnOnce(&mut FsCounters)) {
        f(&mut lock(&self.counters));
    }

    fn collect_retired(st: &mut Stack) {
        let gen = st.gen;
        st.retired.retain(|r| gen < r.retired_at + 2);
    }

    pub fn gen(&self) -> u64 {
        self.stack_read().gen
    }

    pub fn config(&self) -> LayerConfig {
        self.stack_read().config()
    }

    pub fn counters(&self) -> FsCounters {
        *lock(&self.counters)
    }

    pub fn lower_count(&self) -> usize {
        self.stack_read().lowers.len()
    }

    pub fn retired_count(&self) -> usize {
        self.stack_read().retired.len()
    }

    pub fn upper_is_empty(&self) -> bool {
        self.stack_read().upper.lock().is_empty()
    }

    pub fn upper_paths(&self) -> Vec<String> {
        self.stack_read().upper.lock().keys().cloned().collect()
    }

    pub fn layer(&self, id: LayerId) -> Option<Arc<FrozenLayer>> {
        lock(&self.frozen).get(&id).and_then(Weak::upgrade)
    }

    pub fn is_layer_alive(&self, id: LayerId) -> bool {
        self.layer(id).is_some()
    }

    /// Takes strong references on every lower named by `config`.
    pub fn pin(&self, config: &LayerConfig) -> Result<LayerPin, FsError> {
        let layers = config
            .lowers
            .iter()
            .map(|&id| self.layer(id).ok_or(FsError::UnknownLayer(id)))
            .collect::<Result<_, _>>()?;
        Ok(LayerPin { layers })
    }

    // ---- stack switching ----------------------------------------------------

    /// Freezes the upper, splices it in as the topmost lower and installs a
    /// fresh upper. Copies no data.
    pub fn checkpoint_switch(&self) -> LayerConfig {
        let mut st = self.stack_write();
        let new_gen = st.gen + 1;
        let entries = std::mem::take(&mut *st.upper.lock());
        let frozen = Arc::new(FrozenLayer::freeze(
            st.upper.id,
            entries,
            new_gen,
            &self.store,
        ));
        lock(&self.frozen).insert(frozen.id, Arc::downgrade(&frozen));

        let old_lowers = st.lowers.clone();
        let old_upper = std::mem::replace(&mut st.upper, self.fresh_upper());
        st.lowers.insert(0, frozen);
        st.gen = new_gen;
        st.retired.push(Retired {
            lowers: old_lowers,
            upper: old_upper,
            retired_at: new_gen,
        });
        Self::collect_retired(&mut st);
        self.prune_registry();
        self.invalidate_dirs();
        self.bump(|c| c.checkpoints += 1);
        st.config()
    }

    /// Replaces the stack with `target`'s lowers under a fresh upper.
    pub fn restore_switch(&self, target: &LayerConfig) -> Result<(), FsError> {
        let lowers: Vec<_> = target
            .lowers
            .iter()
            .map(|&id| self.layer(id).ok_or(FsError::UnknownLayer(id)))
            .collect::<Result<_, _>>()?;
        let mut st = self.stack_write();
        let new_gen = st.gen + 1;
        let old_lowers = std::mem::replace(&mut st.lowers, lowers);
        let old_upper = std::mem::replace(&mut st.upper, self.fresh_upper());
        st.gen = new_gen;
        st.retired.push(Retired {
            lowers: old_lowers,
            upper: old_upper,
            retired_at: new_gen,
        });
        Self::collect_retired(&mut st);
        self.prune_registry();
        self.invalidate_dirs();
        self.bump(|c| c.restores += 1);
        Ok(())
    }

    /// Undoes the `checkpoint_switch` that produced `config`, turning its
    /// frozen layer back into the writable upper. Only valid while nothing
    /// has been written to the new upper.
    pub fn abort_checkpoint(&self, config: &LayerConfig) -> Result<(), FsError> {
        let mut st = self.stack_write();
        let top = st.lowers.first().map(|l| l.id);
        if top != config.lowers.first().copied() || st.upper.id != config.upper {
            return Err(FsError::AbortMismatch(
                "stack moved since checkpoint".into(),
            ));
        }
        if !st.upper.lock().is_empty() {
            return Err(FsError::AbortMismatch("upper already written".into()));
        }
        let new_gen = st.gen + 1;
        let frozen = st.lowers.remove(0);
        let old_lowers = st.lowers.clone();
        let (id, mut entries) = match Arc::try_unwrap(frozen) {
            Ok(layer) => {
                lock(&self.frozen).remove(&layer.id);
                (layer.id, layer.entries)
            }
            Err(shared) => {
                // Someone (an open handle) still reads the frozen layer. Keep
                // it registered and thaw a copy under a new id.
                let id = LayerId(self.next_layer.fetch_add(1, Ordering::Relaxed));
                (id, self.clone_entries(&shared.entries))
            }
        };
        for e in entries.values_mut() {
            if let LayerEntry::File(f) = e {
                f.created_gen = new_gen;
            }
        }
        let thawed = self.register_upper(UpperLayer {
            id,
            entries: Mutex::new(entries),
        });
        let old_upper = std::mem::replace(&mut st.upper, thawed);
        st.gen = new_gen;
        st.retired.push(Retired {
            lowers: old_lowers,
            upper: old_upper,
            retired_at: new_gen,
        });
        Self::collect_retired(&mut st);
        self.invalidate_dirs();
        Ok(())
    }

    fn clone_entries(&self, entries: &Entries) -> Entries {
        entries
            .iter()
            .map(|(p, e)| {
                let e = match e {
                    LayerEntry::File(f) => LayerEntry::File(FileEntry {
                        map: self.store.clone_map(&f.map),
                        created_gen: f.created_gen,
                    }),
                    LayerEntry::Directory => LayerEntry::Directory,
                    LayerEntry::Whiteout => LayerEntry::Whiteout,
                };
                (p.clone(), e)
            })
            .collect()
    }

    fn prune_registry(&self) {
        lock(&self.frozen).retain(|_, w| w.strong_count() > 0);
    }

    // ---- handle operations --------------------------------------------------

    pub fn open(&self, path: &str, mode: OpenMode) -> Result<Handle, FsError> {
        let path = path::normalize(path)?;
        if path == "/" {
            return Err(FsError::IsDirectory(path));
        }
        let st = self.stack_read();
        let mut upper = st.upper.lock();
        let resolved = match st.kind(&upper, &path) {
            Kind::File(w) => st.source(w),
            Kind::Dir => return Err(FsError::IsDirectory(path)),
            Kind::Missing if mode == OpenMode::Create => {
                st.check_parents(&upper, &path)?;
                let map = self.store.new_map();
                upper.insert(
                    path.clone(),
                    LayerEntry::File(FileEntry {
                        map,
                        created_gen: st.gen,
                    }),
                );
                self.invalidate_dirs();
                Source::Upper(st.upper.clone())
            }
            Kind::Missing => return Err(FsError::NotFound(path)),
        };
        drop(upper);
        Ok(Handle {
            path,
            mode,
            state: Mutex::new(HandleState {
                cached_gen: st.gen,
                resolved,
            }),
        })
    }

    /// Generation check shared by reads and writes. On mismatch the handle is
    /// re-resolved against the current stack.
    fn revalidate(&self, st: &Stack, h: &Handle, hs: &mut HandleState) -> Result<(), FsError> {
        if hs.cached_gen == st.gen {
            return Ok(());
        }
        self.bump(|c| c.slow_path_resolutions += 1);
        let upper = st.upper.lock();
        match st.kind(&upper, &h.path) {
            Kind::File(w) => hs.resolved = st.source(w),
            Kind::Dir => return Err(FsError::IsDirectory(h.path.clone())),
            Kind::Missing => return Err(FsError::StaleAfterRestore(h.path.clone())),
        }
        hs.cached_gen = st.gen;
        Ok(())
    }

    pub fn write(&self, h: &Handle, offset: u64, data: &[u8]) -> Result<(), FsError> {
        if h.mode == OpenMode::Read {
            return Err(FsError::ReadOnlyHandle);
        }
        let st = self.stack_read();
        let mut hs = h.lock();
        let was_stale = hs.cached_gen != st.gen || matches!(hs.resolved, Source::Lower(_));
        self.revalidate(&st, h, &mut hs)?;

        let mut upper = st.upper.lock();
        let needs_copy_up = match upper.get(&h.path) {
            Some(LayerEntry::File(f)) if f.created_gen == st.gen => {
                if was_stale {
                    // A concurrent writer already copied this path up.
                    self.bump(|c| c.copy_up_reuses += 1);
                }
                false
            }
            Some(LayerEntry::File(_)) => {
                // Left over from an older generation: discard and redo.
                upper.remove(&h.path);
                self.bump(|c| c.stale_upper_clears += 1);
                true
            }
            Some(LayerEntry::Directory) => return Err(FsError::IsDirectory(h.path.clone())),
            Some(LayerEntry::Whiteout) => return Err(FsError::NotFound(h.path.clone())),
            None => true,
        };
        if needs_copy_up {
            let src = match &hs.resolved {
                Source::Lower(l) => match l.entries.get(&h.path) {
                    Some(LayerEntry::File(f)) => &f.map,
                    _ => return Err(FsError::NotFound(h.path.clone())),
                },
                Source::Upper(_) => return Err(FsError::NotFound(h.path.clone())),
            };
            let map = self.store.clone_map(src);
            upper.insert(
                h.path.clone(),
                LayerEntry::File(FileEntry {
                    map,
                    created_gen: st.gen,
                }),
            );
            self.bump(|c| c.copy_ups += 1);
        }
        let Some(LayerEntry::File(f)) = upper.get_mut(&h.path) else {
            unreachable!("upper entry present after copy-up");
        };
        self.store.write_range(&mut f.map, offset, data);
        hs.resolved = Source::Upper(st.upper.clone());
        Ok(())
    }

    /// Reads up to `len` bytes; short past end of file.
    pub fn read(&self, h: &Handle, offset: u64, len: usize) -> Result<Vec<u8>, FsError> {
        let st = self.stack_read();
        let mut hs = h.lock();
        self.revalidate(&st, h, &mut hs)?;
        let upper = st.upper.lock();
        match upper.get(&h.path) {
            Some(LayerEntry::File(f)) => return Ok(self.store.read_range(&f.map, offset, len)),
            Some(LayerEntry::Directory) => return Err(FsError::IsDirectory(h.path.clone())),
            Some(LayerEntry::Whiteout) => return Err(FsError::NotFound(h.path.clone())),
            None => {}
        }
        match &hs.resolved {
            Source::Lower(l) => match l.entries.get(&h.path) {
                Some(LayerEntry::File(f)) => Ok(self.store.read_range(&f.map, offset, len)),
                _ => Err(FsError::NotFound(h.path.clone())),
            },
            Source::Upper(_) => Err(FsError::NotFound(h.path.clone())),
        }
    }

    // ---- path operations ----------------------------------------------------

    pub fn write_file(&self, path: &str, offset: u64, data: &[u8]) -> Result<(), FsError> {
        let h = self.open(path, OpenMode::Create)?;
        self.write(&h, offset, data)
    }

    pub fn read_file(&self, path: &str) -> Result<Vec<u8>, FsError> {
        let h = self.open(path, OpenMode::Read)?;
        self.read(&h, 0, usize::MAX)
    }

    pub fn unlink(&self, path: &str) -> Result<(), FsError> {
        let path = path::normalize(path)?;
        let st = self.stack_read();
        let mut upper = st.upper.lock();
        match st.kind(&upper, &path) {
            Kind::Missing => return Err(FsError::NotFound(path)),
            Kind::Dir => return Err(FsError::IsDirectory(path)),
            Kind::File(_) => {}
        }
        upper.remove(&path);
        if st.lowers_have_file(&path) {
            upper.insert(path, LayerEntry::Whiteout);
        }
        self.invalidate_dirs();
        Ok(())
    }

    pub fn mkdir(&self, path: &str) -> Result<(), FsError> {
        let path = path::normalize(path)?;
        let st = self.stack_read();
        let mut upper = st.upper.lock();
        if st.kind(&upper, &path) != Kind::Missing {
            return Err(FsError::AlreadyExists(path));
        }
        st.check_parents(&upper, &path)?;
        upper.insert(path, LayerEntry::Directory);
        self.invalidate_dirs();
        Ok(())
    }

    /// Merged directory listing, sorted by name.
    pub fn readdir(&self, path: &str) -> Result<Vec<DirEntry>, FsError> {
        let path = path::normalize(path)?;
        if let Some(hit) = lock(&self.dir_cache).get(&path) {
            return Ok(hit.clone());
        }
        let st = self.stack_read();
        let upper = st.upper.lock();
        match st.kind(&upper, &path) {
            Kind::Dir => {}
            Kind::File(_) => return Err(FsError::NotADirectory(path)),
            Kind::Missing => return Err(FsError::NotFound(path)),
        }
        let mut names: BTreeMap<String, bool> = BTreeMap::new();
        for (p, kind) in st.merged(&upper) {
            if let Some((name, deeper)) = path::child_name(&path, &p) {
                let is_dir = deeper || kind == Kind::Dir;
                *names.entry(name.to_string()).or_default() |= is_dir;
            }
        }
        let listing: Vec<DirEntry> = names
            .into_iter()
            .map(|(name, is_dir)| DirEntry { name, is_dir })
            .collect();
        lock(&self.dir_cache).insert(path, listing.clone());
        Ok(listing)
    }

    pub fn exists(&self, path: &str) -> bool {
        let Ok(path) = path::normalize(path) else {
            return false;
        };
        let st = self.stack_read();
        let upper = st.upper.lock();
        st.kind(&upper, &path) != Kind::Missing
    }

    /// Full merged file content. Read-only.
    pub fn materialize(&self) -> BTreeMap<String, Vec<u8>> {
        let st = self.stack_read();
        let upper = st.upper.lock();
        st.merged(&upper)
            .into_iter()
            .filter_map(|(p, k)| match k {
                Kind::File(w) => {
                    let bytes = self.store.read_all(st.file_map(&upper, w, &p));
                    Some((p, bytes))
                }
                _ => None,
            })
            .collect()
    }

    /// Explicitly created directories visible in the merged view.
    pub fn directories(&self) -> BTreeSet<String> {
        let st = self.stack_read();
        let upper = st.upper.lock();
        st.merged(&upper)
            .into_iter()
            .filter_map(|(p, k)| (k == Kind::Dir).then_some(p))
            .collect()
    }

    // ---- integrity ----------------------------------------------------------

    /// Adds one count per live block reference held by any layer.
    pub fn add_block_references(&self, census: &mut HashMap<BlockId, u32>) {
        let mut count = |entries: &Entries| {
            for e in entries.values() {
                if let LayerEntry::File(f) = e {
                    for id in f.map.block_ids() {
                        *census.entry(id).or_default() += 1;
                    }
                }
            }
        };
        let frozen: Vec<_> = lock(&self.frozen)
            .values()
            .filter_map(Weak::upgrade)
            .collect();
        for l in &frozen {
            count(&l.entries);
        }
        let uppers: Vec<_> = lock(&self.uppers)
            .iter()
            .filter_map(Weak::upgrade)
            .collect();
        for u in &uppers {
            count(&u.lock());
        }
    }

    /// Ids of live frozen layers whose current digest differs from the one
    /// taken at freeze time.
    pub fn verify_frozen_digests(&self) -> Vec<LayerId> {
        let frozen: Vec<_> = lock(&self.frozen)
            .values()
            .filter_map(Weak::upgrade)
            .collect();
        let mut bad: Vec<_> = frozen
            .iter()
            .filter(|l| !l.digest_matches(&self.store))
            .map(|l| l.id)
            .collect();
        bad.sort();
        bad
    }

    pub fn live_frozen_layers(&self) -> Vec<LayerId> {
        let mut ids: Vec<_> = lock(&self.frozen)
            .iter()
            .filter(|(_, w)| w.strong_count() > 0)
            .map(|(id, _)| *id)
            .collect();
        ids.sort();
        ids
    }
}
