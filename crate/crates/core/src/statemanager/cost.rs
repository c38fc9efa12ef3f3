//! Logical-time cost model. Every duration is an integer number of
//! microseconds so that compositions are exact.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub t_ioctl_ck_us: u64,
    pub t_ioctl_rs_us: u64,
    pub t_dump_plus_fork_us: u64,
    pub t_tpl_fork_us: u64,
    pub t_criu_rs_us: u64,
    pub t_dispatch_fast_us: u64,
    pub t_dispatch_slow_us: u64,
    /// LLM inference window that a background dump can hide under.
    pub llm_window_us: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            t_ioctl_ck_us: 1_120,
            t_ioctl_rs_us: 1_660,
            t_dump_plus_fork_us: 13_450,
            t_tpl_fork_us: 3_750,
            t_criu_rs_us: 7_250,
            t_dispatch_fast_us: 1_390,
            t_dispatch_slow_us: 790,
            llm_window_us: 2_000_000,
        }
    }
}

pub fn us_to_ms(us: u64) -> f64 {
    us as f64 / 1000.0
}

pub fn ms_to_us(ms: f64) -> u64 {
    (ms * 1000.0).round().max(0.0) as u64
}

impl CostModel {
    /// Synchronous layer switch plus background dump, as the agent sees it
    /// under an inference window of `window_us`.
    pub fn checkpoint_perceived_us(&self, window_us: u64) -> u64 {
        (self.t_ioctl_ck_us + self.t_dump_plus_fork_us).saturating_sub(window_us)
    }

    /// The layer switch and the template fork run in parallel.
    pub fn restore_fast_us(&self) -> u64 {
        self.t_ioctl_rs_us.max(self.t_tpl_fork_us) + self.t_dispatch_fast_us
    }

    pub fn restore_slow_us(&self) -> u64 {
        self.t_ioctl_rs_us.max(self.t_criu_rs_us) + self.t_dispatch_slow_us
    }

    /// Spawning `n` children from one template. Forks are serialized on the
    /// template; the layer switch overlaps them.
    pub fn fanout_us(&self, n: u64) -> u64 {
        self.t_ioctl_rs_us.max(n * self.t_tpl_fork_us) + self.t_dispatch_fast_us
    }
}
