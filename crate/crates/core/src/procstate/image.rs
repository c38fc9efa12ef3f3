use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::blockstore::{BlockId, BlockStore, BlockTable};
use crate::ids::{ImageId, RequestId};

use super::space::AddressSpace;
use super::{ProcError, PAGE_SIZE};

/// An incremental memory image. Immutable once created.
#[derive(Debug)]
pub struct DumpImage {
    pub(crate) id: ImageId,
    pub(crate) parent: Option<ImageId>,
    pub(crate) captured: BlockTable,
    pub(crate) hot_zone: Vec<u64>,
    pub(crate) cursor: u64,
    pub(crate) outstanding: BTreeSet<RequestId>,
}

/// JSON manifest of one image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageManifest {
    pub image_id: ImageId,
    pub parent: Option<ImageId>,
    pub pages: Vec<u64>,
    pub blocks: Vec<BlockId>,
}

impl DumpImage {
    pub fn id(&self) -> ImageId {
        self.id
    }

    pub fn parent(&self) -> Option<ImageId> {
        self.parent
    }

    pub fn captured_pages(&self) -> Vec<u64> {
        self.captured.indices().collect()
    }

    pub fn captured(&self) -> &BlockTable {
        &self.captured
    }

    pub fn logical_bytes(&self) -> u64 {
        (self.captured.len() * PAGE_SIZE) as u64
    }

    pub fn manifest(&self) -> ImageManifest {
        ImageManifest {
            image_id: self.id,
            parent: self.parent,
            pages: self.captured_pages(),
            blocks: self.captured.iter().map(|(_, b)| b).collect(),
        }
    }
}

/// All live dump images, keyed by id. Parent links form chains.
#[derive(Debug, Default)]
pub struct ImageStore {
    images: BTreeMap<ImageId, DumpImage>,
    next: u64,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allocate_id(&mut self) -> ImageId {
        let id = ImageId(self.next);
        self.next += 1;
        id
    }

    pub fn insert(&mut self, image: DumpImage) {
        self.images.insert(image.id, image);
    }

    pub fn get(&self, id: ImageId) -> Option<&DumpImage> {
        self.images.get(&id)
    }

    pub fn contains(&self, id: ImageId) -> bool {
        self.images.contains_key(&id)
    }

    /// Drops an image and releases its page references.
    pub fn remove(&mut self, id: ImageId) -> bool {
        self.images.remove(&id).is_some()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.images.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DumpImage> + '_ {
        self.images.values()
    }

    /// Sum of captured pages times page size over live images.
    pub fn logical_bytes(&self) -> u64 {
        self.images.values().map(DumpImage::logical_bytes).sum()
    }

    /// Ids along the parent chain, target first.
    pub fn chain_ids(&self, target: ImageId) -> Result<Vec<ImageId>, ProcError> {
        let mut out = Vec::new();
        let mut cur = Some(target);
        while let Some(id) = cur {
            let img = self.images.get(&id).ok_or(ProcError::UnknownImage(id))?;
            out.push(id);
            cur = img.parent;
        }
        Ok(out)
    }

    /// Reconstructs the address space at `target` by applying the chain
    /// root-first, newest image winning per page. Shares blocks; copies no
    /// data.
    pub fn restore_slow(
        &self,
        store: &BlockStore,
        target: ImageId,
    ) -> Result<AddressSpace, ProcError> {
        let chain = self.chain_ids(target)?;
        let mut table = store.new_table();
        for id in chain.iter().rev() {
            let img = &self.images[id];
            for p in img.captured.indices() {
                store.share_entry(&mut table, p, &img.captured, p);
            }
        }
        let top = &self.images[&target];
        Ok(AddressSpace::restored(
            store.clone(),
            table,
            top.hot_zone.clone(),
            top.cursor,
            top.outstanding.clone(),
        ))
    }
}
