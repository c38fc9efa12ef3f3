//! Browser bindings. Each export takes plain numbers and returns a JSON
//! string, so the page needs no generated glue beyond wasm-bindgen's.

use serde_json::json;
use wasm_bindgen::prelude::*;

use deltastate::searchsim::{gpu_util, plateau_run, run_mcts, war_sweep, MctsParams, WarParams};
use deltastate::statemanager::cost::us_to_ms;
use deltastate::{CostModel, GcPolicy, RunConfig, ShareMode};

/// Copy-up bytes per edit size for one file size, in both share modes.
pub fn war_json(file_size: u64, samples: usize, seed: u64) -> String {
    let file_size = file_size.clamp(4096, 4 << 20) / 4096 * 4096;
    let p = WarParams {
        file_sizes: vec![file_size],
        edit_sizes: vec![1, 100, 4096, 8192, 65536],
        samples: samples.clamp(1, 25),
        seed,
        ..WarParams::default()
    };
    let r = war_sweep(&p);
    let curves: Vec<_> = r
        .curves
        .iter()
        .map(|c| {
            json!({
                "mode": c.mode,
                "points": c.points.iter().map(|p| json!({
                    "edit": p.edit_size,
                    "median": p.median_copy_bytes,
                    "min": p.min_copy_bytes,
                    "max": p.max_copy_bytes,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    let plateau = plateau_run(ShareMode::Reflink, file_size, 4096, 50, seed);
    json!({ "file_size": file_size, "curves": curves, "plateau": plateau }).to_string()
}

/// Accelerator utilisation of a synchronous RL step. A negative
/// `sandbox_ms` asks the default cost model for the N-way fan-out time.
pub fn fanout_json(n: u32, t_gen_ms: f64, t_train_ms: f64, sandbox_ms: f64) -> String {
    let cost = CostModel::default();
    let sandbox = if sandbox_ms < 0.0 {
        us_to_ms(cost.fanout_us(u64::from(n)))
    } else {
        sandbox_ms
    };
    let sweep: Vec<_> = [0.0, 10.0, 50.0, 100.0, 250.0, 500.0, 1000.0, 2000.0]
        .iter()
        .map(|&s| json!({ "sandbox_ms": s, "gpu_util": gpu_util(s, t_gen_ms, t_train_ms) }))
        .collect();
    json!({
        "n": n,
        "sandbox_ms": sandbox,
        "gpu_util": gpu_util(sandbox, t_gen_ms, t_train_ms),
        "sweep": sweep,
    })
    .to_string()
}

/// The same seeded search under three collection policies.
pub fn gc_json(seed: u64, budget: u32, recency: usize) -> String {
    let p = MctsParams {
        budget: budget.clamp(1, 400),
        ..MctsParams::default()
    };
    let policies = [
        GcPolicy::KeepAll,
        GcPolicy::Recency(recency.max(1)),
        GcPolicy::Reachability,
    ];
    let runs: Vec<_> = policies
        .iter()
        .map(|&gc| {
            let cfg = RunConfig {
                seed,
                gc,
                ..RunConfig::default()
            };
            match run_mcts(&cfg, &p) {
                Ok(run) => json!({ "policy": gc.to_string(), "summary": run.summary }),
                Err(e) => json!({ "policy": gc.to_string(), "error": e.to_string() }),
            }
        })
        .collect();
    json!({ "seed": seed, "budget": p.budget, "runs": runs }).to_string()
}

#[wasm_bindgen]
pub fn war_curves(file_size: u32, samples: u32, seed: u32) -> String {
    war_json(u64::from(file_size), samples as usize, u64::from(seed))
}

#[wasm_bindgen]
pub fn fanout_util(n: u32, t_gen_ms: f64, t_train_ms: f64, sandbox_ms: f64) -> String {
    fanout_json(n, t_gen_ms, t_train_ms, sandbox_ms)
}

#[wasm_bindgen]
pub fn gc_dichotomy(seed: u32, budget: u32, recency: u32) -> String {
    gc_json(u64::from(seed), budget, recency as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn war_payload() {
        let v: Value = serde_json::from_str(&war_json(1 << 20, 3, 0)).unwrap();
        assert_eq!(v["curves"].as_array().unwrap().len(), 2);
        assert_eq!(v["curves"][1]["points"][0]["median"], 1 << 20);
        assert_eq!(v["plateau"]["physical_blocks"], 306);
    }

    #[test]
    fn fanout_payload() {
        let v: Value = serde_json::from_str(&fanout_json(16, 1630.0, 220.0, 100.0)).unwrap();
        assert!((v["gpu_util"].as_f64().unwrap() - 1850.0 / 1950.0).abs() < 1e-12);
    }

    #[test]
    fn gc_payload() {
        let v: Value = serde_json::from_str(&gc_json(0, 200, 5)).unwrap();
        let runs = v["runs"].as_array().unwrap();
        assert!(runs[1]["summary"]["livelock"].is_object());
        assert_eq!(runs[2]["summary"]["failed_restores"], 0);
    }
}
