//! Run configuration: flat `key = value` text with `#` comments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockstore::ShareMode;
use crate::statemanager::cost::ms_to_us;
use crate::statemanager::{CostModel, GcPolicy, ManagerConfig};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub gc: GcPolicy,
    pub n_tpl: usize,
    pub share_mode: ShareMode,
    pub cost: CostModel,
    pub read_only_patterns: Vec<String>,
    pub fault_dump_at: Option<u64>,
    pub warm_on_restore: bool,
    pub livelock_streak: u32,
    pub read_only_ratio: f64,
    pub output: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ManagerConfig::default();
        RunConfig {
            seed: 0,
            gc: GcPolicy::Reachability,
            n_tpl: m.n_tpl,
            share_mode: m.share_mode,
            cost: m.cost,
            read_only_patterns: m.read_only_patterns,
            fault_dump_at: None,
            warm_on_restore: true,
            livelock_streak: 25,
            read_only_ratio: 0.6,
            output: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse()
        .map_err(|_| format!("`{key}` expects a number, got `{v}`"))
}

fn parse_ms(key: &str, v: &str) -> Result<u64, String> {
    let ms: f64 = parse_num(key, v)?;
    if !ms.is_finite() || ms < 0.0 {
        return Err(format!("`{key}` must be a non-negative duration"));
    }
    Ok(ms_to_us(ms))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("`{key}` expects a boolean, got `{v}`")),
    }
}

impl RunConfig {
    /// Sets one key. Durations under `cost.` are in milliseconds.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let c = &mut self.cost;
        match key.trim() {
            "seed" => self.seed = parse_num(key, v)?,
            "gc" => self.gc = v.parse()?,
            "n_tpl" => {
                self.n_tpl = parse_num(key, v)?;
                if self.n_tpl == 0 {
                    return Err("`n_tpl` must be positive".into());
                }
            }
            "share_mode" => {
                self.share_mode = match v {
                    "reflink" => ShareMode::Reflink,
                    "fullcopy" => ShareMode::FullCopy,
                    _ => return Err(format!("unknown share mode `{v}`")),
                }
            }
            "cost.t_ioctl_ck" => c.t_ioctl_ck_us = parse_ms(key, v)?,
            "cost.t_ioctl_rs" => c.t_ioctl_rs_us = parse_ms(key, v)?,
            "cost.t_dump_plus_fork" => c.t_dump_plus_fork_us = parse_ms(key, v)?,
            "cost.t_tpl_fork" => c.t_tpl_fork_us = parse_ms(key, v)?,
            "cost.t_criu_rs" => c.t_criu_rs_us = parse_ms(key, v)?,
            "cost.t_dispatch_fast" => c.t_dispatch_fast_us = parse_ms(key, v)?,
            "cost.t_dispatch_slow" => c.t_dispatch_slow_us = parse_ms(key, v)?,
            "cost.llm_window" => c.llm_window_us = parse_ms(key, v)?,
            "classifier.patterns" => {
                self.read_only_patterns = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "fault.dump_at" => self.fault_dump_at = Some(parse_num(key, v)?),
            "warm_on_restore" => self.warm_on_restore = parse_bool(key, v)?,
            "mcts.livelock_streak" => self.livelock_streak = parse_num(key, v)?,
            "gen.read_only_ratio" => {
                let f: f64 = parse_num(key, v)?;
                if !(0.0..=1.0).contains(&f) {
                    return Err("`gen.read_only_ratio` must lie in [0, 1]".into());
                }
                self.read_only_ratio = f;
            }
            "output" => self.output = Some(v.to_string()),
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError {
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            self.set(k, v).map_err(err)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn manager_config(&self) -> ManagerConfig {
        ManagerConfig {
            share_mode: self.share_mode,
            n_tpl: self.n_tpl,
            cost: self.cost,
            read_only_patterns: self.read_only_patterns.clone(),
            fault_dump_at: self.fault_dump_at,
            warm_on_restore: self.warm_on_restore,
        }
    }
}
