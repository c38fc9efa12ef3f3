//! Coupled filesystem and process-memory checkpoint/rollback for agent
//! sandboxes, plus the search drivers and replay harness used to exercise it.

pub mod blockstore;
pub mod config;
pub mod ids;
pub mod integrity;
pub mod layerfs;
pub mod procstate;
pub mod searchsim;
pub mod statemanager;

pub use blockstore::{BlockStore, ShareMode, StoreStats};
pub use config::{ConfigError, RunConfig};
pub use ids::{ImageId, RequestId, SnapshotId, TemplateId};
pub use integrity::{fsck, FsckReport};
pub use statemanager::{
    BaseImage, CostModel, GcPolicy, ManagerConfig, ManagerError, RestorePath, StateManager, Tag,
};
