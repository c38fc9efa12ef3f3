//! Best-of-N: N independent trajectories cloned from one checkpoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gen::random_action;
use super::harness::{Harness, Mode, ReplayError};
use super::trace::TraceEvent;
use super::{state_digest, synthetic_base, ReportKind, RunReport};
use crate::config::RunConfig;
use crate::procstate::PAGE_SIZE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonParams {
    pub n: usize,
    pub trajectory_len: usize,
    pub base_files: usize,
    pub file_len: usize,
    pub base_pages: u64,
    pub mode: Mode,
}

impl Default for BonParams {
    fn default() -> Self {
        BonParams {
            n: 4,
            trajectory_len: 20,
            base_files: 100,
            file_len: 4096,
            base_pages: 16,
            mode: Mode::Delta,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BonSummary {
    pub n: usize,
    /// Physical blocks right after the base image was mounted.
    pub base_blocks: u64,
    /// Blocks allocated after that point.
    pub allocated_after_base: u64,
    pub physical_blocks: u64,
    /// Data bytes copied by each trajectory's initial restore.
    pub restore_bytes_copied: Vec<u64>,
    /// Hex digest of each leaf state.
    pub leaf_digests: Vec<String>,
    pub distinct_leaves: usize,
}

fn hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn run_bon(config: &RunConfig, p: &BonParams) -> Result<(BonSummary, Harness), ReplayError> {
    let base = synthetic_base(config.seed, p.base_files, p.file_len, p.base_pages);
    let mut h = Harness::new(p.mode, config.manager_config(), &base)
        .map_err(|source| ReplayError::Manager { index: 0, source })?;
    let stats = |h: &Harness| h.manager().map(|m| m.store_stats()).unwrap_or_default();
    let at_base = stats(&h);
    let mut s = BonSummary {
        n: p.n,
        base_blocks: at_base.physical_block_count,
        ..Default::default()
    };

    let mut event = 0usize;
    h.apply(
        event,
        &TraceEvent::Checkpoint {
            label: Some("start".into()),
        },
    )?;
    event += 1;
    for i in 0..p.n {
        let before = stats(&h);
        h.apply(
            event,
            &TraceEvent::Restore {
                label: "start".into(),
            },
        )?;
        event += 1;
        s.restore_bytes_copied.push(stats(&h).copied_since(&before));

        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ (i as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407),
        );
        // Tag the branch so leaves differ even when the actions coincide.
        let tag = TraceEvent::MemWrite {
            page: p.base_pages,
            count: 1,
            offset: 0,
            len: PAGE_SIZE,
            seed: i as u64,
        };
        h.apply(event, &tag)?;
        event += 1;
        for _ in 0..p.trajectory_len {
            let a = random_action(&mut rng, config.read_only_ratio, p.base_pages.max(1));
            h.apply(event, &a)?;
            event += 1;
        }
        h.apply(
            event,
            &TraceEvent::Checkpoint {
                label: Some(format!("leaf{i}")),
            },
        )?;
        event += 1;
        s.leaf_digests.push(hex(&state_digest(&h.state())));
    }
    let end = stats(&h);
    s.allocated_after_base = end.allocations - at_base.allocations;
    s.physical_blocks = end.physical_block_count;
    let mut d = s.leaf_digests.clone();
    d.sort();
    d.dedup();
    s.distinct_leaves = d.len();
    Ok((s, h))
}

impl BonSummary {
    pub fn report(self, h: Harness, config: &RunConfig) -> RunReport {
        let mut r = RunReport::new(ReportKind::Bon, config.clone());
        let (replay, manager) = h.finish();
        if let Some(m) = &manager {
            r.absorb_manager(m);
        }
        r.replay = Some(replay);
        r.bon = Some(self);
        r
    }
}
