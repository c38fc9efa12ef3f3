//! RL fan-out: one warm template cloned into N rollout children per step.

use serde::{Deserialize, Serialize};

use super::page_bytes;
use crate::blockstore::{BlockStore, ShareMode};
use crate::ids::TemplateId;
use crate::procstate::{AddressSpace, PAGE_SIZE};
use crate::statemanager::cost::us_to_ms;
use crate::statemanager::CostModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanoutParams {
    pub n: usize,
    pub steps: usize,
    pub t_gen_ms: f64,
    pub t_train_ms: f64,
    /// Pages each child writes during its rollout.
    pub child_write_pages: u64,
    pub template_pages: u64,
    /// Replaces the cost-model fan-out time when set.
    pub sandbox_ms: Option<f64>,
    pub seed: u64,
}

impl Default for FanoutParams {
    fn default() -> Self {
        FanoutParams {
            n: 16,
            steps: 3,
            t_gen_ms: 1630.0,
            t_train_ms: 220.0,
            child_write_pages: 64,
            template_pages: 256,
            sandbox_ms: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanoutReport {
    pub step: usize,
    pub n: usize,
    pub template_pages: u64,
    /// Store-wide physical blocks with all N children forked and idle.
    pub physical_blocks_after_fork: u64,
    pub per_child_private_bytes: Vec<u64>,
    /// Shared pages counted once per child, plus private pages.
    pub aggregate_resident_bytes: u64,
    pub shared_physical_bytes: u64,
    pub sandbox_time_ms: f64,
    pub t_gen_ms: f64,
    pub t_train_ms: f64,
    pub gpu_util: f64,
}

/// Fraction of a synchronous step the accelerator is busy.
pub fn gpu_util(sandbox_ms: f64, t_gen_ms: f64, t_train_ms: f64) -> f64 {
    let busy = t_gen_ms + t_train_ms;
    let total = sandbox_ms + busy;
    if total <= 0.0 {
        return 1.0;
    }
    busy / total
}

/// Bytes of pages in `child` that no longer point at the template's block.
fn private_bytes(child: &AddressSpace, template: &crate::procstate::Template) -> u64 {
    let shared = template.snapshot();
    let private = child
        .pages()
        .iter()
        .filter(|&(i, b)| shared.get(i) != Some(b))
        .count();
    (private * PAGE_SIZE) as u64
}

pub fn run_rl_fanout(cost: &CostModel, mode: ShareMode, p: &FanoutParams) -> Vec<FanoutReport> {
    let store = BlockStore::new(mode);
    let mut trainer = AddressSpace::new(store.clone());
    for page in 0..p.template_pages {
        trainer.write(page, 0, &page_bytes(p.seed, page, PAGE_SIZE));
    }
    let sandbox_time_ms = p
        .sandbox_ms
        .unwrap_or_else(|| us_to_ms(cost.fanout_us(p.n as u64)));
    let mut out = Vec::with_capacity(p.steps);
    for step in 0..p.steps {
        trainer.quiesce();
        let template = trainer
            .create_template(TemplateId(step as u64))
            .expect("trainer is quiesced");
        trainer.resume();

        let children: Vec<AddressSpace> = (0..p.n).map(|_| template.fork()).collect();
        let physical_blocks_after_fork = store.stats().physical_block_count;
        let mut per_child = Vec::with_capacity(p.n);
        let mut aggregate = 0u64;
        // Children run one after another and are discarded once measured.
        for (c, mut child) in children.into_iter().enumerate() {
            let marker = (step as u64) << 32 | c as u64;
            for page in 0..p.child_write_pages {
                child.write(page, 0, &marker.to_le_bytes());
            }
            per_child.push(private_bytes(&child, &template));
            aggregate += (child.page_count() * PAGE_SIZE) as u64;
        }
        out.push(FanoutReport {
            step,
            n: p.n,
            template_pages: template.page_count() as u64,
            physical_blocks_after_fork,
            per_child_private_bytes: per_child,
            aggregate_resident_bytes: aggregate,
            shared_physical_bytes: template.logical_bytes(),
            sandbox_time_ms,
            t_gen_ms: p.t_gen_ms,
            t_train_ms: p.t_train_ms,
            gpu_util: gpu_util(sandbox_time_ms, p.t_gen_ms, p.t_train_ms),
        });
        // Policy update before the next step's template.
        trainer.write(
            step as u64 % p.template_pages.max(1),
            0,
            &(step as u64).to_le_bytes(),
        );
    }
    out
}
