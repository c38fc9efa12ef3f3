//! Coupled filesystem/memory checkpoint and restore.
//!
//! [`StateManager`] owns one sandbox: a [`LayerFs`], the agent's
//! [`AddressSpace`], the dump images, the template pool and the I/O broker.
//! Checkpoints either take the standard path (dump in the background while
//! the layer stack is switched, then fork a template) or, when every action
//! since the previous checkpoint was read-only, register a lightweight alias
//! of the nearest standard ancestor.

pub mod classifier;
pub mod cost;
pub mod gc;
pub mod report;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockstore::{BlockId, BlockStore, ShareMode, StoreStats};
use crate::ids::{ImageId, SnapshotId, TemplateId};
use crate::layerfs::{FsError, LayerConfig, LayerFs, LayerId, LayerPin};
use crate::procstate::{AddressSpace, DumpImage, ImageStore, IoBroker, ProcError, TemplatePool};

pub use classifier::Classifier;
pub use cost::CostModel;
pub use gc::{GcPolicy, NodeFlags, SearchView};
pub use report::{BlockingEvent, ColumnStats, Lanes, Phase, RestorePath};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ManagerError {
    #[error("unknown snapshot id {0}")]
    UnknownSnapshotId(SnapshotId),
    #[error("unknown image {0}")]
    UnknownImage(ImageId),
    #[error("unknown layer {0}")]
    UnknownLayer(LayerId),
    #[error("dump failed at dump #{0}; checkpoint aborted")]
    DumpFailure(u64),
    #[error("lightweight checkpoint left dirty state after `{command}` (pattern `{pattern}`)")]
    LightweightUnsound { command: String, pattern: String },
    #[error(transparent)]
    Fs(FsError),
    #[error(transparent)]
    Proc(ProcError),
}

impl From<FsError> for ManagerError {
    fn from(e: FsError) -> Self {
        match e {
            FsError::UnknownLayer(id) => ManagerError::UnknownLayer(id),
            e => ManagerError::Fs(e),
        }
    }
}

impl From<ProcError> for ManagerError {
    fn from(e: ProcError) -> Self {
        match e {
            ProcError::DumpFailure(n) => ManagerError::DumpFailure(n),
            ProcError::UnknownImage(id) => ManagerError::UnknownImage(id),
            e => ManagerError::Proc(e),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Standard,
    Lightweight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeStatus {
    Live,
    Terminal,
    Failed,
    Pruned,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotNode {
    pub id: SnapshotId,
    pub parent: Option<SnapshotId>,
    pub layer_config: Option<LayerConfig>,
    pub dump_image: Option<ImageId>,
    pub template_present: bool,
    pub tag: Tag,
    pub alias_of: Option<SnapshotId>,
    pub status: NodeStatus,
    pub created_seq: u64,
    /// Taken by the manager itself (value-time tests), not by the caller.
    pub internal: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerConfig {
    pub share_mode: ShareMode,
    pub n_tpl: usize,
    pub cost: CostModel,
    pub read_only_patterns: Vec<String>,
    /// Fail the n-th checkpoint dump (0-based, not counting the root).
    pub fault_dump_at: Option<u64>,
    pub warm_on_restore: bool,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            share_mode: ShareMode::Reflink,
            n_tpl: 16,
            cost: CostModel::default(),
            read_only_patterns: classifier::DEFAULT_READ_ONLY_PATTERNS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            fault_dump_at: None,
            warm_on_restore: true,
        }
    }
}

/// Initial sandbox content.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BaseImage {
    pub files: BTreeMap<String, Vec<u8>>,
    pub pages: BTreeMap<u64, Vec<u8>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManagerMetrics {
    pub checkpoints_standard: u64,
    pub checkpoints_lightweight: u64,
    pub checkpoints_internal: u64,
    pub restores_fast: u64,
    pub restores_slow: u64,
    pub restores_to_lightweight: u64,
    pub aborts: u64,
    pub failed_restores: u64,
    pub lightweight_violations: u64,
    pub tests_run: u64,
    pub llm_calls: u64,
    pub responses_delivered: u64,
}

impl ManagerMetrics {
    /// Fraction of caller-requested checkpoints that were elided.
    pub fn skip_ratio(&self) -> f64 {
        let caller_std = self.checkpoints_standard - self.checkpoints_internal;
        let total = caller_std + self.checkpoints_lightweight;
        if total == 0 {
            0.0
        } else {
            self.checkpoints_lightweight as f64 / total as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageCensus {
    pub live_nodes: usize,
    pub physical_blocks: u64,
    pub logical_dump_bytes: u64,
    pub live_images: usize,
    pub live_templates: usize,
    pub template_bytes: u64,
    pub frozen_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcReport {
    pub policy: GcPolicy,
    pub evicted: Vec<SnapshotId>,
    pub retained: Vec<SnapshotId>,
    pub before: StorageCensus,
    pub after: StorageCensus,
}

#[derive(Clone, Debug)]
struct Action {
    read_only: bool,
    command: Option<String>,
    dirtied: bool,
}

/// One sandbox's coupled state and its snapshot registry.
#[derive(Debug)]
pub struct StateManager {
    config: ManagerConfig,
    store: BlockStore,
    fs: LayerFs,
    space: AddressSpace,
    images: ImageStore,
    pool: TemplatePool,
    broker: IoBroker,
    classifier: Classifier,
    nodes: BTreeMap<SnapshotId, SnapshotNode>,
    pins: HashMap<SnapshotId, LayerPin>,
    lineage: SnapshotId,
    actions: Vec<Action>,
    recording: bool,
    next_snapshot: u64,
    next_template: u64,
    next_seq: u64,
    dump_calls: u64,
    next_window_us: Option<u64>,
    events: Vec<BlockingEvent>,
    metrics: ManagerMetrics,
}

impl StateManager {
    /// Mounts `base` and registers it as the root snapshot.
    pub fn new(config: ManagerConfig, base: &BaseImage) -> Result<Self, ManagerError> {
        let store = BlockStore::new(config.share_mode);
        let fs = LayerFs::mount(store.clone(), &base.files)?;
        let mut space = AddressSpace::new(store.clone());
        for (&page, bytes) in &base.pages {
            space.write(page, 0, bytes);
        }
        let classifier = Classifier::new(&config.read_only_patterns);
        let pool = TemplatePool::new(config.n_tpl);
        let mut mgr = StateManager {
            config,
            store,
            fs,
            space,
            images: ImageStore::new(),
            pool,
            broker: IoBroker::new(),
            classifier,
            nodes: BTreeMap::new(),
            pins: HashMap::new(),
            lineage: SnapshotId(0),
            actions: Vec::new(),
            recording: true,
            next_snapshot: 0,
            next_template: 0,
            next_seq: 0,
            dump_calls: 0,
            next_window_us: None,
            events: Vec::new(),
            metrics: ManagerMetrics::default(),
        };
        // The root reuses the mounted stack as-is: nothing to switch.
        let img_id = mgr.images.allocate_id();
        mgr.space.quiesce();
        let image = mgr.space.incremental_dump(img_id, None)?;
        mgr.images.insert(image);
        let cfg = mgr.fs.config();
        let sid = mgr.register_standard(None, cfg, img_id, false)?;
        mgr.space.resume();
        mgr.lineage = sid;
        Ok(mgr)
    }

    // ---- accessors ----------------------------------------------------------

    pub fn config(&self) -> &ManagerConfig {
        &self.config
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn store_stats(&self) -> StoreStats {
        self.store.stats()
    }

    pub fn fs(&self) -> &LayerFs {
        &self.fs
    }

    pub fn space(&self) -> &AddressSpace {
        &self.space
    }

    pub fn images(&self) -> &ImageStore {
        &self.images
    }

    pub fn pool(&self) -> &TemplatePool {
        &self.pool
    }

    pub fn broker(&self) -> &IoBroker {
        &self.broker
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn cost(&self) -> &CostModel {
        &self.config.cost
    }

    pub fn lineage(&self) -> SnapshotId {
        self.lineage
    }

    pub fn root(&self) -> SnapshotId {
        SnapshotId(0)
    }

    pub fn node(&self, id: SnapshotId) -> Option<&SnapshotNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SnapshotNode> + '_ {
        self.nodes.values()
    }

    pub fn events(&self) -> &[BlockingEvent] {
        &self.events
    }

    pub fn metrics(&self) -> ManagerMetrics {
        self.metrics
    }

    pub fn breakdown(&self) -> BTreeMap<String, ColumnStats> {
        report::breakdown(&self.events)
    }

    pub fn set_fault_dump_at(&mut self, n: Option<u64>) {
        self.config.fault_dump_at = n;
    }

    pub fn dump_calls(&self) -> u64 {
        self.dump_calls
    }

    pub fn registry_json(&self) -> serde_json::Value {
        serde_json::to_value(self.nodes.values().collect::<Vec<_>>()).expect("registry serializes")
    }

    pub fn image_manifests(&self) -> Vec<crate::procstate::ImageManifest> {
        self.images.iter().map(DumpImage::manifest).collect()
    }

    /// Standard node whose state `id` denotes.
    pub fn effective(&self, id: SnapshotId) -> Result<SnapshotId, ManagerError> {
        let mut cur = id;
        loop {
            let node = self
                .nodes
                .get(&cur)
                .ok_or(ManagerError::UnknownSnapshotId(id))?;
            if node.status == NodeStatus::Pruned {
                return Err(ManagerError::UnknownSnapshotId(id));
            }
            match (node.tag, node.alias_of) {
                (Tag::Lightweight, Some(a)) => cur = a,
                _ => return Ok(cur),
            }
        }
    }

    pub fn set_status(&mut self, id: SnapshotId, status: NodeStatus) -> Result<(), ManagerError> {
        let node = self
            .nodes
            .get_mut(&id)
            .ok_or(ManagerError::UnknownSnapshotId(id))?;
        if node.status != NodeStatus::Pruned {
            node.status = status;
        }
        Ok(())
    }

    // ---- agent actions --------------------------------------------------------

    fn record(&mut self, read_only: bool, command: Option<String>) {
        if self.recording {
            self.actions.push(Action {
                read_only,
                command,
                dirtied: false,
            });
        }
    }

    pub fn write_file(&mut self, path: &str, offset: u64, data: &[u8]) -> Result<(), FsError> {
        self.fs.write_file(path, offset, data)?;
        self.record(false, None);
        Ok(())
    }

    pub fn read_file(&mut self, path: &str) -> Result<Vec<u8>, FsError> {
        let bytes = self.fs.read_file(path)?;
        self.record(true, None);
        Ok(bytes)
    }

    pub fn unlink(&mut self, path: &str) -> Result<(), FsError> {
        self.fs.unlink(path)?;
        self.record(false, None);
        Ok(())
    }

    pub fn mkdir(&mut self, path: &str) -> Result<(), FsError> {
        self.fs.mkdir(path)?;
        self.record(false, None);
        Ok(())
    }

    pub fn mem_write(&mut self, page: u64, offset: usize, data: &[u8]) {
        self.space.write(page, offset, data);
        self.record(false, None);
    }

    /// Runs a shell command with no side effects of its own.
    pub fn exec(&mut self, cmd: &str) {
        self.exec_with(cmd, |_| ());
    }

    /// Runs a shell command whose side effects are performed by `effect`.
    /// The effect's own operations are attributed to the command.
    pub fn exec_with<R>(&mut self, cmd: &str, effect: impl FnOnce(&mut Self) -> R) -> R {
        let clean_before = self.is_clean();
        let was_recording = std::mem::replace(&mut self.recording, false);
        let out = effect(self);
        self.recording = was_recording;
        let read_only = self.classifier.is_read_only(cmd);
        let dirtied = clean_before && !self.is_clean();
        if self.recording {
            self.actions.push(Action {
                read_only,
                command: Some(cmd.to_string()),
                dirtied,
            });
        }
        out
    }

    fn is_clean(&self) -> bool {
        self.fs.upper_is_empty() && self.space.soft_dirty().is_empty()
    }

    /// Issues an LLM request through the broker. The response arrives while
    /// the agent is frozen at the next checkpoint; `window_us` is the
    /// inference time that checkpoint can hide under.
    pub fn llm_call(&mut self, window_us: u64) {
        let payload = self.metrics.llm_calls.to_le_bytes().to_vec();
        self.broker.submit(&mut self.space, payload);
        self.next_window_us = Some(window_us);
        self.metrics.llm_calls += 1;
    }

    fn complete_pending(&self) {
        while self
            .broker
            .complete_next(|p| p.iter().rev().copied().collect())
            .is_some()
        {}
    }

    fn deliver_ready(&mut self) {
        for id in self.broker.poll(&self.space) {
            if self.broker.deliver(&mut self.space, id).is_ok() {
                self.metrics.responses_delivered += 1;
            }
        }
    }

    /// Would the next checkpoint be elided?
    pub fn next_checkpoint_is_lightweight(&self) -> bool {
        !self.actions.is_empty() && self.actions.iter().all(|a| a.read_only)
    }

    // ---- checkpoint -----------------------------------------------------------

    pub fn checkpoint(&mut self) -> Result<SnapshotId, ManagerError> {
        if self.next_checkpoint_is_lightweight() {
            self.checkpoint_lightweight()
        } else {
            self.checkpoint_standard(false)
        }
    }

    fn next_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    fn checkpoint_lightweight(&mut self) -> Result<SnapshotId, ManagerError> {
        if !self.is_clean() {
            self.metrics.lightweight_violations += 1;
            let offender = self
                .actions
                .iter()
                .find(|a| a.dirtied)
                .or_else(|| self.actions.iter().find(|a| a.command.is_some()))
                .and_then(|a| a.command.clone())
                .unwrap_or_default();
            let pattern = self
                .classifier
                .matching_pattern(&offender)
                .unwrap_or("")
                .to_string();
            return Err(ManagerError::LightweightUnsound {
                command: offender,
                pattern,
            });
        }
        let alias = self.effective(self.lineage)?;
        self.complete_pending();
        self.deliver_ready();
        let sid = SnapshotId(self.next_snapshot);
        self.next_snapshot += 1;
        let seq = self.next_seq();
        self.nodes.insert(
            sid,
            SnapshotNode {
                id: sid,
                parent: Some(self.lineage),
                layer_config: None,
                dump_image: None,
                template_present: false,
                tag: Tag::Lightweight,
                alias_of: Some(alias),
                status: NodeStatus::Live,
                created_seq: seq,
                internal: false,
            },
        );
        let window = self
            .next_window_us
            .take()
            .unwrap_or(self.config.cost.llm_window_us);
        self.push_event(
            Phase::Checkpoint,
            Tag::Lightweight,
            sid,
            None,
            false,
            Lanes::default(),
            window,
            0,
        );
        self.metrics.checkpoints_lightweight += 1;
        self.lineage = sid;
        self.actions.clear();
        Ok(sid)
    }

    fn checkpoint_standard(&mut self, internal: bool) -> Result<SnapshotId, ManagerError> {
        let parent_eff = self.effective(self.lineage)?;
        let parent_img = self.nodes[&parent_eff].dump_image;
        let dump_index = self.dump_calls;
        self.dump_calls += 1;
        let inject = self.config.fault_dump_at == Some(dump_index);
        let img_id = self.images.allocate_id();

        self.space.quiesce();
        self.complete_pending();
        let (dumped, cfg) = self.dump_and_switch(img_id, parent_img, inject, dump_index);
        let image = match dumped {
            Ok(image) => image,
            Err(e) => {
                self.fs.abort_checkpoint(&cfg)?;
                self.space.resume();
                self.metrics.aborts += 1;
                return Err(e.into());
            }
        };
        self.space.commit_dump(&image);
        self.images.insert(image);
        let sid = self.register_standard(Some(self.lineage), cfg, img_id, internal)?;
        self.space.resume();
        self.deliver_ready();

        let window = self
            .next_window_us
            .take()
            .unwrap_or(self.config.cost.llm_window_us);
        let c = self.config.cost;
        let lanes = Lanes {
            ioctl_us: c.t_ioctl_ck_us,
            dump_fork_us: c.t_dump_plus_fork_us,
            ..Lanes::default()
        };
        self.push_event(
            Phase::Checkpoint,
            Tag::Standard,
            sid,
            None,
            internal,
            lanes,
            window,
            c.checkpoint_perceived_us(window),
        );
        self.metrics.checkpoints_standard += 1;
        if internal {
            self.metrics.checkpoints_internal += 1;
        }
        self.lineage = sid;
        self.actions.clear();
        Ok(sid)
    }

    /// Runs the incremental dump concurrently with the layer switch and
    /// waits for both.
    fn dump_and_switch(
        &self,
        img_id: ImageId,
        parent: Option<ImageId>,
        inject: bool,
        dump_index: u64,
    ) -> (Result<DumpImage, ProcError>, LayerConfig) {
        let dump = || {
            if inject {
                Err(ProcError::DumpFailure(dump_index))
            } else {
                self.space.capture_dump(img_id, parent)
            }
        };
        #[cfg(not(target_arch = "wasm32"))]
        {
            std::thread::scope(|s| {
                let worker = s.spawn(dump);
                let cfg = self.fs.checkpoint_switch();
                let dumped = worker.join().expect("dump worker panicked");
                (dumped, cfg)
            })
        }
        #[cfg(target_arch = "wasm32")]
        {
            let dumped = dump();
            (dumped, self.fs.checkpoint_switch())
        }
    }

    /// Forks a template of the (quiesced) space, pins the layers and adds
    /// a standard node.
    fn register_standard(
        &mut self,
        parent: Option<SnapshotId>,
        cfg: LayerConfig,
        img_id: ImageId,
        internal: bool,
    ) -> Result<SnapshotId, ManagerError> {
        let sid = SnapshotId(self.next_snapshot);
        self.next_snapshot += 1;
        let template = self.space.create_template(TemplateId(self.next_template))?;
        self.next_template += 1;
        self.pool_insert(sid, template);
        let pin = self.fs.pin(&cfg)?;
        self.pins.insert(sid, pin);
        let seq = self.next_seq();
        self.nodes.insert(
            sid,
            SnapshotNode {
                id: sid,
                parent,
                layer_config: Some(cfg),
                dump_image: Some(img_id),
                template_present: true,
                tag: Tag::Standard,
                alias_of: None,
                status: NodeStatus::Live,
                created_seq: seq,
                internal,
            },
        );
        Ok(sid)
    }

    fn pool_insert(&mut self, sid: SnapshotId, template: crate::procstate::Template) {
        if let Some(evicted) = self.pool.insert(sid, template) {
            if let Some(n) = self.nodes.get_mut(&evicted) {
                n.template_present = false;
            }
        }
        if let Some(n) = self.nodes.get_mut(&sid) {
            n.template_present = true;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push_event(
        &mut self,
        phase: Phase,
        tag: Tag,
        snapshot: SnapshotId,
        path: Option<RestorePath>,
        internal: bool,
        lanes: Lanes,
        llm_window_us: u64,
        perceived_us: u64,
    ) {
        let seq = self.events.len() as u64;
        self.events.push(BlockingEvent {
            seq,
            phase,
            tag,
            snapshot,
            path,
            internal,
            lanes,
            llm_window_us,
            perceived_us,
        });
    }

    // ---- restore --------------------------------------------------------------

    pub fn restore(&mut self, target: SnapshotId) -> Result<RestorePath, ManagerError> {
        self.restore_inner(target, false)
    }

    fn restore_inner(
        &mut self,
        target: SnapshotId,
        internal: bool,
    ) -> Result<RestorePath, ManagerError> {
        let eff = match self.effective(target) {
            Ok(e) => e,
            Err(e) => {
                self.metrics.failed_restores += 1;
                return Err(e);
            }
        };
        let target_tag = self.nodes[&target].tag;
        let (cfg, img) = {
            let n = &self.nodes[&eff];
            (
                n.layer_config
                    .clone()
                    .expect("standard node has a layer config"),
                n.dump_image.expect("standard node has an image"),
            )
        };

        let (mut space, path) = match self.pool.restore_fast(eff) {
            Ok(space) => (space, RestorePath::Fast),
            Err(_) => match self.images.restore_slow(&self.store, img) {
                Ok(space) => (space, RestorePath::Slow),
                Err(e) => {
                    self.metrics.failed_restores += 1;
                    return Err(e.into());
                }
            },
        };
        if let Err(e) = self.fs.restore_switch(&cfg) {
            self.metrics.failed_restores += 1;
            return Err(e.into());
        }
        if path == RestorePath::Slow {
            // Re-template so later restores of this node take the fast path.
            space.quiesce();
            let template = space.create_template(TemplateId(self.next_template))?;
            self.next_template += 1;
            space.resume();
            self.pool_insert(eff, template);
        }
        if self.config.warm_on_restore {
            space.warm_hot_zone();
        }
        self.space = space;
        self.deliver_ready();

        let c = self.config.cost;
        let (lanes, perceived) = match path {
            RestorePath::Fast => (
                Lanes {
                    ioctl_us: c.t_ioctl_rs_us,
                    tpl_fork_us: c.t_tpl_fork_us,
                    dispatch_us: c.t_dispatch_fast_us,
                    ..Lanes::default()
                },
                c.restore_fast_us(),
            ),
            RestorePath::Slow => (
                Lanes {
                    ioctl_us: c.t_ioctl_rs_us,
                    criu_rs_us: c.t_criu_rs_us,
                    dispatch_us: c.t_dispatch_slow_us,
                    ..Lanes::default()
                },
                c.restore_slow_us(),
            ),
        };
        let window = self.config.cost.llm_window_us;
        self.push_event(
            Phase::Restore,
            target_tag,
            target,
            Some(path),
            internal,
            lanes,
            window,
            perceived,
        );
        match path {
            RestorePath::Fast => self.metrics.restores_fast += 1,
            RestorePath::Slow => self.metrics.restores_slow += 1,
        }
        if target_tag == Tag::Lightweight {
            self.metrics.restores_to_lightweight += 1;
        }
        self.lineage = target;
        self.actions.clear();
        Ok(path)
    }

    // ---- value-time test ------------------------------------------------------

    /// Checkpoints, runs `test`, then rolls back unconditionally. Only the
    /// returned observation survives.
    pub fn value_time_test<R>(
        &mut self,
        test: impl FnOnce(&mut Self) -> R,
    ) -> Result<R, ManagerError> {
        let pre = self.checkpoint_standard(true)?;
        let observation = test(self);
        self.restore_inner(pre, true)?;
        self.metrics.tests_run += 1;
        Ok(observation)
    }

    // ---- garbage collection ---------------------------------------------------

    pub fn storage(&self) -> StorageCensus {
        StorageCensus {
            live_nodes: self
                .nodes
                .values()
                .filter(|n| n.status != NodeStatus::Pruned)
                .count(),
            physical_blocks: self.store.stats().physical_block_count,
            logical_dump_bytes: self.images.logical_bytes(),
            live_images: self.images.len(),
            live_templates: self.pool.len(),
            template_bytes: self.pool.logical_bytes(),
            frozen_layers: self.fs.live_frozen_layers().len(),
        }
    }

    pub fn gc(&mut self, policy: GcPolicy, view: &SearchView) -> GcReport {
        let before = self.storage();
        let keep = gc::keep_set(policy, &self.nodes, view, self.lineage, &self.images);
        let victims: Vec<SnapshotId> = self
            .nodes
            .values()
            .filter(|n| n.status != NodeStatus::Pruned && !keep.contains(&n.id))
            .map(|n| n.id)
            .collect();
        for &id in &victims {
            self.prune(id);
        }
        GcReport {
            policy,
            evicted: victims,
            retained: keep.into_iter().collect(),
            before,
            after: self.storage(),
        }
    }

    fn prune(&mut self, id: SnapshotId) {
        let Some(node) = self.nodes.get_mut(&id) else {
            return;
        };
        node.status = NodeStatus::Pruned;
        node.template_present = false;
        if let Some(img) = node.dump_image {
            self.images.remove(img);
        }
        self.pool.remove(id);
        self.pins.remove(&id);
    }

    // ---- integrity ------------------------------------------------------------

    /// Reference count of every block named by any live structure.
    pub fn block_census(&self) -> HashMap<BlockId, u32> {
        let mut census = HashMap::new();
        self.fs.add_block_references(&mut census);
        let mut add = |t: &crate::blockstore::BlockTable| {
            for (_, b) in t.iter() {
                *census.entry(b).or_default() += 1;
            }
        };
        add(self.space.pages());
        for img in self.images.iter() {
            add(img.captured());
        }
        for &sid in self.pool.lru_order() {
            if let Some(t) = self.pool.get(sid) {
                add(t.snapshot());
            }
        }
        census
    }
}

#[cfg(test)]
mod tests;
