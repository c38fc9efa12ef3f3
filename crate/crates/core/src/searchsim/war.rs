//! Write-amplification sweep: copy-up cost of one edit to a frozen file.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::content_bytes;
use crate::blockstore::{BlockStore, ShareMode, BLOCK_SIZE};
use crate::layerfs::LayerFs;

const FILE: &str = "/data.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarParams {
    pub file_sizes: Vec<u64>,
    pub edit_sizes: Vec<u64>,
    pub modes: Vec<ShareMode>,
    pub samples: usize,
    pub seed: u64,
}

impl Default for WarParams {
    fn default() -> Self {
        WarParams {
            file_sizes: vec![4096, 16384, 102_400, 262_144, 1 << 20],
            edit_sizes: vec![1, 100, 4096, 8192],
            modes: vec![ShareMode::Reflink, ShareMode::FullCopy],
            samples: 9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarPoint {
    pub file_size: u64,
    pub edit_size: u64,
    pub samples: usize,
    /// Lower median over the seeded edit offsets.
    pub median_copy_bytes: u64,
    pub median_metadata_ops: u64,
    pub min_copy_bytes: u64,
    pub max_copy_bytes: u64,
    pub offsets: Vec<u64>,
    /// Copy-up bytes per sample, aligned with `offsets`.
    pub copy_bytes: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarCurve {
    pub mode: ShareMode,
    pub points: Vec<WarPoint>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlateauReport {
    pub mode: ShareMode,
    pub file_size: u64,
    pub edit_size: u64,
    pub checkpoints: u64,
    pub base_blocks: u64,
    pub physical_blocks: u64,
    /// base + checkpoints × blocks per edit.
    pub bound_blocks: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarReport {
    pub curves: Vec<WarCurve>,
    pub plateau: Vec<PlateauReport>,
}

fn lower_median(v: &mut [u64]) -> u64 {
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

fn frozen_file(mode: ShareMode, size: u64, seed: u64) -> (BlockStore, LayerFs) {
    let store = BlockStore::new(mode);
    let files = BTreeMap::from([(FILE.to_string(), content_bytes(seed, size as usize))]);
    let fs = LayerFs::mount(store.clone(), &files).expect("mount of a single file");
    fs.checkpoint_switch();
    (store, fs)
}

/// Copy-up bytes and metadata operations of one `k`-byte edit.
pub(crate) fn one_edit(mode: ShareMode, size: u64, k: u64, offset: u64, seed: u64) -> (u64, u64) {
    let (store, fs) = frozen_file(mode, size, seed);
    let before = store.stats();
    fs.write_file(FILE, offset, &vec![0xA5; k as usize])
        .expect("edit inside the file");
    let after = store.stats();
    (
        after.copied_since(&before),
        after.metadata_ops_since(&before),
    )
}

pub fn war_sweep(p: &WarParams) -> WarReport {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut report = WarReport::default();
    // Offsets are drawn once per bin so every mode sees the same edits.
    let mut bins = Vec::new();
    for &s in &p.file_sizes {
        for &k in &p.edit_sizes {
            if k == 0 || k > s {
                continue;
            }
            let offsets: Vec<u64> = (0..p.samples.max(1))
                .map(|_| rng.random_range(0..=s - k))
                .collect();
            bins.push((s, k, offsets));
        }
    }
    for &mode in &p.modes {
        let points = bins
            .iter()
            .map(|(s, k, offsets)| {
                let (mut copy, mut meta): (Vec<u64>, Vec<u64>) = offsets
                    .iter()
                    .map(|&o| one_edit(mode, *s, *k, o, p.seed))
                    .unzip();
                let samples = copy.clone();
                WarPoint {
                    file_size: *s,
                    edit_size: *k,
                    samples: offsets.len(),
                    min_copy_bytes: *copy.iter().min().unwrap_or(&0),
                    max_copy_bytes: *copy.iter().max().unwrap_or(&0),
                    median_copy_bytes: lower_median(&mut copy),
                    median_metadata_ops: lower_median(&mut meta),
                    offsets: offsets.clone(),
                    copy_bytes: samples,
                }
            })
            .collect();
        report.curves.push(WarCurve { mode, points });
    }
    report
}

/// Edits `file_size` bytes with block-aligned `edit_size`-byte writes, one
/// per checkpoint, and counts the physical blocks left behind.
pub fn plateau_run(
    mode: ShareMode,
    file_size: u64,
    edit_size: u64,
    checkpoints: u64,
    seed: u64,
) -> PlateauReport {
    let bs = BLOCK_SIZE as u64;
    let (store, fs) = frozen_file(mode, file_size, seed);
    let base_blocks = store.stats().physical_block_count;
    let edit_blocks = edit_size.div_ceil(bs);
    let slots = (file_size / bs).saturating_sub(edit_blocks) + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in 0..checkpoints {
        let offset = rng.random_range(0..slots) * bs;
        fs.write_file(FILE, offset, &vec![c as u8; edit_size as usize])
            .expect("aligned edit");
        fs.checkpoint_switch();
    }
    PlateauReport {
        mode,
        file_size,
        edit_size,
        checkpoints,
        base_blocks,
        physical_blocks: store.stats().physical_block_count,
        bound_blocks: base_blocks + checkpoints * edit_blocks,
    }
}
