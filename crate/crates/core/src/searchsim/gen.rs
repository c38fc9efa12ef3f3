//! Seeded synthetic agent actions and traces.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::trace::{Dirt, TraceEvent};
use crate::procstate::PAGE_SIZE;

/// Commands the default classifier treats as read-only.
pub const READ_ONLY_COMMANDS: &[&str] = &[
    "grep -r TODO /src",
    "cat /src/a.py",
    "find /src -name '*.py'",
    "ls -la /src",
    "git diff",
    "git diff --stat",
    "python -m pytest --collect-only -q",
];

/// Commands that may change the sandbox.
pub const MUTATING_COMMANDS: &[&str] = &[
    "sed -i s/foo/bar/",
    "python tools/gen.py",
    "rm -f",
    "make build",
];

const DIRS: &[&str] = &["/src", "/src/pkg", "/tests", "/build"];
const NAMES: &[&str] = &["a.py", "b.py", "data.bin", "notes.md"];

#[derive(Clone, Debug, PartialEq)]
pub struct GenParams {
    pub len: usize,
    /// Probability that an agent action is a read-only exec.
    pub read_only_ratio: f64,
    /// Memory writes land in pages `0..pages`.
    pub pages: u64,
    pub restores: bool,
    pub tests: bool,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            len: 200,
            read_only_ratio: 0.6,
            pages: 48,
            restores: true,
            tests: true,
        }
    }
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

fn random_path<R: Rng>(rng: &mut R) -> String {
    if rng.random_bool(0.05) {
        // Occasionally aim at a directory or a path below a file.
        return pick(rng, &["/src", "/src/a.py/x", "/README.md"]).to_string();
    }
    format!("{}/{}", pick(rng, DIRS), pick(rng, NAMES))
}

fn random_write<R: Rng>(rng: &mut R) -> TraceEvent {
    let offset = if rng.random_bool(0.5) {
        0
    } else {
        rng.random_range(0..3 * 4096u64)
    };
    TraceEvent::Write {
        path: random_path(rng),
        offset,
        len: rng.random_range(1..=6000),
        seed: rng.random(),
    }
}

fn random_memwrite<R: Rng>(rng: &mut R, pages: u64) -> TraceEvent {
    let page = rng.random_range(0..pages.max(1));
    let count = rng.random_range(1..=3);
    let (offset, len) = if rng.random_bool(0.5) {
        (0, PAGE_SIZE)
    } else {
        let off = rng.random_range(0..PAGE_SIZE);
        (off, rng.random_range(1..=PAGE_SIZE - off))
    };
    TraceEvent::MemWrite {
        page,
        count,
        offset,
        len,
        seed: rng.random(),
    }
}

fn read_only_exec<R: Rng>(rng: &mut R) -> TraceEvent {
    TraceEvent::Exec {
        cmd: pick(rng, READ_ONLY_COMMANDS).to_string(),
        effect: None,
    }
}

/// One state-changing agent action.
fn mutating_action<R: Rng>(rng: &mut R, pages: u64) -> TraceEvent {
    match rng.random_range(0..9) {
        0..=2 => random_write(rng),
        3..=5 => random_memwrite(rng, pages),
        6 => TraceEvent::Unlink {
            path: random_path(rng),
        },
        7 => TraceEvent::Mkdir {
            path: pick(rng, &["/src", "/src/pkg", "/tests", "/docs", "/build/out"]).to_string(),
        },
        _ => {
            let cmd = pick(rng, MUTATING_COMMANDS);
            let effect = match cmd {
                "sed -i s/foo/bar/" => Some(random_write(rng)),
                "python tools/gen.py" => Some(random_memwrite(rng, pages)),
                "rm -f" => Some(TraceEvent::Unlink {
                    path: random_path(rng),
                }),
                _ => None,
            };
            let cmd = match &effect {
                Some(TraceEvent::Write { path, .. }) | Some(TraceEvent::Unlink { path }) => {
                    format!("{cmd} {path}")
                }
                _ => cmd.to_string(),
            };
            TraceEvent::Exec {
                cmd,
                effect: effect.map(Box::new),
            }
        }
    }
}

/// One agent action: a read-only exec with probability `read_only_ratio`,
/// otherwise something that changes state.
pub fn random_action<R: Rng>(rng: &mut R, read_only_ratio: f64, pages: u64) -> TraceEvent {
    if rng.random_bool(read_only_ratio.clamp(0.0, 1.0)) {
        read_only_exec(rng)
    } else {
        mutating_action(rng, pages)
    }
}

/// Mixed trace over the full event alphabet with restores to arbitrary
/// earlier checkpoints.
pub fn random_trace(seed: u64, p: &GenParams) -> Vec<TraceEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<String> = vec!["root".into()];
    let mut out = Vec::with_capacity(p.len);
    while out.len() < p.len {
        let u: f64 = rng.random();
        let ev = if u < 0.11 {
            let label = format!("c{}", labels.len());
            labels.push(label.clone());
            TraceEvent::Checkpoint { label: Some(label) }
        } else if u < 0.19 && p.restores {
            TraceEvent::Restore {
                label: labels[rng.random_range(0..labels.len())].clone(),
            }
        } else if u < 0.22 && p.tests {
            let dirt = Dirt {
                files: rng.random_range(0..3),
                pages: rng.random_range(0..3),
            };
            TraceEvent::Test {
                dirt,
                seed: rng.random(),
            }
        } else if u < 0.25 {
            TraceEvent::Llm {
                window_ms: f64::from(rng.random_range(0..40u32)),
            }
        } else if u < 0.31 {
            TraceEvent::Read {
                path: random_path(&mut rng),
            }
        } else {
            random_action(&mut rng, p.read_only_ratio, p.pages)
        };
        out.push(ev);
    }
    out
}

/// `intervals` checkpoint intervals of one action each. Exactly
/// `round(ratio * intervals)` of them hold a read-only exec; the order is a
/// seeded shuffle.
pub fn interval_trace(seed: u64, intervals: usize, ratio: f64) -> Vec<TraceEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let read_only = (ratio * intervals as f64).round() as usize;
    let mut kinds: Vec<bool> = (0..intervals).map(|i| i < read_only).collect();
    kinds.shuffle(&mut rng);
    let mut out = Vec::with_capacity(intervals * 2);
    for (i, ro) in kinds.into_iter().enumerate() {
        out.push(if ro {
            read_only_exec(&mut rng)
        } else {
            mutating_action(&mut rng, 32)
        });
        out.push(TraceEvent::Checkpoint {
            label: Some(format!("i{i}")),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statemanager::Classifier;

    #[test]
    fn deterministic() {
        let p = GenParams::default();
        assert_eq!(random_trace(5, &p), random_trace(5, &p));
        assert_ne!(random_trace(5, &p), random_trace(6, &p));
        assert_eq!(random_trace(5, &p).len(), 200);
    }

    #[test]
    fn read_only_pool_matches_default_classifier() {
        let c = Classifier::default();
        for cmd in READ_ONLY_COMMANDS {
            assert!(c.is_read_only(cmd), "{cmd}");
        }
        for cmd in MUTATING_COMMANDS {
            assert!(!c.is_read_only(cmd), "{cmd}");
        }
    }

    #[test]
    fn interval_trace_counts_are_exact() {
        let c = Classifier::default();
        for (f, want) in [(0.25, 25), (0.6, 60), (0.9, 90)] {
            let t = interval_trace(1, 100, f);
            let ro = t
                .iter()
                .filter(|e| matches!(e, TraceEvent::Exec { cmd, .. } if c.is_read_only(cmd)))
                .count();
            assert_eq!(ro, want);
            assert_eq!(t.len(), 200);
        }
    }

    #[test]
    fn generated_events_validate() {
        for s in 0..20 {
            for e in random_trace(s, &GenParams::default()) {
                e.validate().unwrap();
            }
        }
    }
}
