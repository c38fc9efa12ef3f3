use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blockstore::{BlockStore, ExtentMap};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(pub u64);

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    ReadOnlyLower,
    WritableUpper,
}

#[derive(Debug)]
pub struct FileEntry {
    pub(crate) map: ExtentMap,
    /// Generation of the stack that created this upper entry.
    pub(crate) created_gen: u64,
}

impl FileEntry {
    pub fn map(&self) -> &ExtentMap {
        &self.map
    }
}

#[derive(Debug)]
pub enum LayerEntry {
    File(FileEntry),
    Directory,
    /// Masks every same-path entry in strictly lower layers.
    Whiteout,
}

impl LayerEntry {
    pub fn is_whiteout(&self) -> bool {
        matches!(self, LayerEntry::Whiteout)
    }
}

/// A read-only lower layer. Entries never change after freezing.
#[derive(Debug)]
pub struct FrozenLayer {
    pub(crate) id: LayerId,
    pub(crate) entries: BTreeMap<String, LayerEntry>,
    pub(crate) frozen_at_gen: u64,
    pub(crate) digest: [u8; 32],
}

impl FrozenLayer {
    pub(crate) fn freeze(
        id: LayerId,
        entries: BTreeMap<String, LayerEntry>,
        gen: u64,
        store: &BlockStore,
    ) -> Self {
        let digest = digest_entries(&entries, store);
        FrozenLayer {
            id,
            entries,
            frozen_at_gen: gen,
            digest,
        }
    }

    pub fn id(&self) -> LayerId {
        self.id
    }

    pub fn kind(&self) -> LayerKind {
        LayerKind::ReadOnlyLower
    }

    pub fn frozen_at_gen(&self) -> u64 {
        self.frozen_at_gen
    }

    pub fn entries(&self) -> &BTreeMap<String, LayerEntry> {
        &self.entries
    }

    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    pub fn digest_matches(&self, store: &BlockStore) -> bool {
        digest_entries(&self.entries, store) == self.digest
    }
}

/// The single writable layer of a mounted stack.
#[derive(Debug)]
pub(crate) struct UpperLayer {
    pub(crate) id: LayerId,
    pub(crate) entries: Mutex<BTreeMap<String, LayerEntry>>,
}

impl UpperLayer {
    pub(crate) fn new(id: LayerId) -> Self {
        UpperLayer {
            id,
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    pub(crate) fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, LayerEntry>> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Hash of a layer's entry set, including block identities and contents.
pub(crate) fn digest_entries(
    entries: &BTreeMap<String, LayerEntry>,
    store: &BlockStore,
) -> [u8; 32] {
    let mut h = Sha256::new();
    for (path, entry) in entries {
        h.update(path.as_bytes());
        h.update([0u8]);
        match entry {
            LayerEntry::Directory => h.update(b"D"),
            LayerEntry::Whiteout => h.update(b"W"),
            LayerEntry::File(f) => {
                h.update(b"F");
                h.update(f.map.file_size().to_le_bytes());
                for (idx, id) in f.map.table().iter() {
                    h.update(idx.to_le_bytes());
                    h.update(id.0.to_le_bytes());
                    if let Some(bytes) = store.block_content(id) {
                        h.update(&bytes);
                    }
                }
            }
        }
    }
    h.finalize().into()
}
