//! Store integrity scans.

use serde::{Deserialize, Serialize};

use crate::blockstore::RefcountViolation;
use crate::layerfs::LayerId;
use crate::statemanager::StateManager;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsckReport {
    pub blocks_checked: usize,
    pub layers_checked: usize,
    pub refcount_violations: Vec<String>,
    pub digest_mismatches: Vec<LayerId>,
}

impl FsckReport {
    pub fn is_clean(&self) -> bool {
        self.refcount_violations.is_empty() && self.digest_mismatches.is_empty()
    }
}

/// Recounts every block reference held by `mgr` and compares against the
/// store's refcounts, then re-hashes every live frozen layer.
pub fn fsck(mgr: &StateManager) -> FsckReport {
    let census = mgr.block_census();
    let violations: Vec<RefcountViolation> = mgr.store().verify_refcounts(&census);
    FsckReport {
        blocks_checked: mgr.store().live_block_ids().len(),
        layers_checked: mgr.fs().live_frozen_layers().len(),
        refcount_violations: violations.iter().map(ToString::to_string).collect(),
        digest_mismatches: mgr.fs().verify_frozen_digests(),
    }
}
