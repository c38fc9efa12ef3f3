//! Process-memory model: soft-dirty pages, incremental dump chains, a
//! bounded fork-template pool, fast and slow restore, async warm-up and an
//! I/O broker that lives outside checkpointed state.
//!
//! Pages are blocks from the shared [`BlockStore`](crate::blockstore::BlockStore).
//! Dumps and templates capture pages by reference; physical copies happen
//! only when a page is later written while shared.

mod broker;
mod image;
mod pool;
mod space;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockstore::BLOCK_SIZE;
use crate::ids::{ImageId, RequestId, SnapshotId};

pub use broker::IoBroker;
pub use image::{DumpImage, ImageManifest, ImageStore};
pub use pool::{PoolStats, Template, TemplatePool};
pub use space::{AddressSpace, WarmStep};

pub const PAGE_SIZE: usize = BLOCK_SIZE;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProcError {
    #[error("address space is not quiesced")]
    NotQuiesced,
    #[error("dump failed (injected at dump #{0})")]
    DumpFailure(u64),
    #[error("unknown image {0}")]
    UnknownImage(ImageId),
    #[error("no live template for {0}")]
    TemplateMiss(SnapshotId),
    #[error("response {0} is not expected by the current continuation")]
    DeliverToWrongEpoch(RequestId),
    #[error("response {0} has not arrived")]
    NotReady(RequestId),
}

/// Copy-on-write fault attribution for one restore epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultLog {
    pub cow_faults_on_critical_path: u64,
    pub cow_faults_absorbed: u64,
    pub pages_warmed: u64,
}
