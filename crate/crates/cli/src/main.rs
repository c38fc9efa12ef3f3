use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use deltastate::searchsim::{
    parse_trace, plateau_run, random_trace, replay_trace, run_bon, run_mcts, run_rl_fanout,
    synthetic_base, war_sweep, write_trace, BonParams, FanoutParams, GenParams, Harness,
    MctsParams, Mode, ReportKind, RunReport, TraceEvent, WarParams,
};
use deltastate::{fsck, GcPolicy, RunConfig, ShareMode, StateManager};

/// Exit statuses.
const INVARIANT: u8 = 1;
const INPUT: u8 = 2;

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }

    fn input(message: impl Into<String>) -> Self {
        Failure::new(INPUT, message)
    }
}

type Outcome = Result<(), Failure>;

#[derive(Parser)]
#[command(
    name = "deltastate",
    version,
    about = "Coupled filesystem/memory checkpoint model: replay, benchmarks, fsck"
)]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (overrides the config file and DELTASTATE_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// keepall, reachability or recency:K.
    #[arg(long, global = true)]
    gc: Option<String>,
    /// Template pool capacity.
    #[arg(long = "n-tpl", global = true)]
    n_tpl: Option<usize>,
    /// Extra config assignment, e.g. --set cost.llm_window=20. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a JSON-lines trace through the model and/or the oracle.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "both")]
        mode: Mode,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a workload driver and write its report.
    Bench {
        #[command(subcommand)]
        which: Bench,
    },
    /// Check refcount conservation and frozen-layer digests.
    Fsck {
        /// Replay this trace (model only) before checking.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Test hook: bump the refcount of one live block before checking.
        #[arg(long)]
        corrupt_refcount: bool,
    },
    /// Write a seeded random trace.
    GenTrace {
        #[arg(long, default_value_t = 200)]
        len: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ReportArg {
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Bench {
    Mcts {
        #[arg(long, default_value_t = 200)]
        budget: u32,
        #[arg(long)]
        branching: Option<usize>,
        #[arg(long)]
        depth: Option<u32>,
        #[arg(long, default_value = "delta")]
        mode: Mode,
        #[command(flatten)]
        out: ReportArg,
    },
    Bon {
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        len: usize,
        #[arg(long, default_value_t = 100)]
        base_files: usize,
        #[arg(long, default_value = "both")]
        mode: Mode,
        #[command(flatten)]
        out: ReportArg,
    },
    Fanout {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long, default_value_t = 1630.0)]
        tgen: f64,
        #[arg(long, default_value_t = 220.0)]
        ttrain: f64,
        /// Fixed sandbox time per step; the cost model is used otherwise.
        #[arg(long)]
        sandbox_ms: Option<f64>,
        #[arg(long, default_value_t = 64)]
        child_pages: u64,
        #[arg(long, default_value_t = 256)]
        template_pages: u64,
        #[command(flatten)]
        out: ReportArg,
    },
    War {
        #[arg(long, value_delimiter = ',', default_value = "reflink,fullcopy")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        file_sizes: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        edit_sizes: Vec<u64>,
        #[arg(long, default_value_t = 9)]
        samples: usize,
        /// Checkpoints in the reflink plateau run (1 MiB file, 4 KiB edits).
        #[arg(long, default_value_t = 50)]
        plateau: u64,
        #[command(flatten)]
        out: ReportArg,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    }
    if let Ok(seed) = std::env::var("DELTASTATE_SEED") {
        cfg.set("seed", &seed)
            .map_err(|e| Failure::input(format!("DELTASTATE_SEED: {e}")))?;
    }
    let mut flags: Vec<(String, String)> = Vec::new();
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::input(format!("--set expects KEY=VALUE, got `{s}`")))?;
        flags.push((k.to_string(), v.to_string()));
    }
    if let Some(seed) = cli.seed {
        flags.push(("seed".into(), seed.to_string()));
    }
    if let Some(gc) = &cli.gc {
        flags.push(("gc".into(), gc.clone()));
    }
    if let Some(n) = cli.n_tpl {
        flags.push(("n_tpl".into(), n.to_string()));
    }
    for (k, v) in flags {
        cfg.set(&k, &v)
            .map_err(|e| Failure::input(format!("--{k}: {e}")))?;
    }
    Ok(cfg)
}

fn timestamp() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

/// Writes next to the destination, then renames over it.
fn write_atomic(path: &Path, body: &str) -> Outcome {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let fail = |e: &dyn std::fmt::Display| Failure::input(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| fail(&e))?;
    tmp.write_all(body.as_bytes()).map_err(|e| fail(&e))?;
    tmp.as_file().sync_all().map_err(|e| fail(&e))?;
    tmp.persist(path).map_err(|e| fail(&e.error))?;
    Ok(())
}

fn emit(mut report: RunReport, explicit: &Option<PathBuf>, cfg: &RunConfig) -> Outcome {
    if !report.breakdown.is_empty() {
        println!("{}", report.table());
    }
    let dest = explicit
        .clone()
        .or_else(|| cfg.output.as_ref().map(PathBuf::from));
    if let Some(path) = dest {
        report.timestamp = Some(timestamp());
        write_atomic(&path, &report.to_json())?;
        println!("report: {}", path.display());
    }
    match &report.fsck {
        Some(f) if !f.is_clean() => Err(Failure::new(
            INVARIANT,
            format!("fsck: {:?}", f.refcount_violations),
        )),
        _ => Ok(()),
    }
}

fn read_trace(path: &Path) -> Result<Vec<TraceEvent>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    parse_trace(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn cmd_replay(cfg: &RunConfig, trace: &Path, mode: Mode, report: &Option<PathBuf>) -> Outcome {
    let events = read_trace(trace)?;
    let r = replay_trace(&events, mode, cfg).map_err(|e| {
        let code = e.exit_code() as u8;
        Failure::new(code, e.to_string())
    })?;
    let s = r.replay.clone().unwrap_or_default();
    println!(
        "replay {}: {} events, {} checks, {} mismatches, tests {} passed / {} failed",
        s.mode.map(|m| m.to_string()).unwrap_or_default(),
        s.events,
        s.checks,
        s.mismatches.len(),
        s.tests_passed,
        s.tests_failed
    );
    let first = s.mismatches.first().cloned();
    emit(r, report, cfg)?;
    match first {
        Some(m) => Err(Failure::new(
            INVARIANT,
            format!(
                "first mismatch at event {} ({}): {}",
                m.index, m.op, m.detail
            ),
        )),
        None => Ok(()),
    }
}

fn parse_modes(modes: &[String]) -> Result<Vec<ShareMode>, Failure> {
    modes
        .iter()
        .map(|m| match m.trim() {
            "reflink" => Ok(ShareMode::Reflink),
            "fullcopy" | "full-copy" => Ok(ShareMode::FullCopy),
            other => Err(Failure::input(format!("unknown share mode `{other}`"))),
        })
        .collect()
}

fn cmd_bench(cfg: &RunConfig, which: Bench) -> Outcome {
    match which {
        Bench::Mcts {
            budget,
            branching,
            depth,
            mode,
            out,
        } => {
            if budget == 0 {
                return Err(Failure::input("--budget must be at least 1"));
            }
            let d = MctsParams::default();
            let p = MctsParams {
                budget,
                branching: branching.unwrap_or(d.branching),
                depth_limit: depth.unwrap_or(d.depth_limit),
                mode,
                ..d
            };
            let run =
                run_mcts(cfg, &p).map_err(|e| Failure::new(e.exit_code() as u8, e.to_string()))?;
            let s = run.summary.clone();
            println!(
                "mcts gc={}: {} iterations, {} nodes, {} failed restores, best reward {:.3}, dump bytes {}",
                cfg.gc, s.iterations, s.tree_size, s.failed_restores, s.best_reward, s.final_dump_bytes
            );
            if let Some(l) = &s.livelock {
                println!(
                    "livelock: node {} re-selected {} times, detected at iteration {}",
                    l.label, l.streak, l.detected_at_iteration
                );
            }
            let mismatches = run.harness.summary().mismatches.len();
            emit(run.report(cfg), &out.report, cfg)?;
            if cfg.gc == GcPolicy::Reachability && s.failed_restores > 0 {
                return Err(Failure::new(
                    INVARIANT,
                    "failed restores under reachability gc",
                ));
            }
            if mismatches > 0 {
                return Err(Failure::new(
                    INVARIANT,
                    format!("{mismatches} oracle mismatches"),
                ));
            }
            Ok(())
        }
        Bench::Bon {
            n,
            len,
            base_files,
            mode,
            out,
        } => {
            let p = BonParams {
                n,
                trajectory_len: len,
                base_files,
                mode,
                ..BonParams::default()
            };
            let (s, h) =
                run_bon(cfg, &p).map_err(|e| Failure::new(e.exit_code() as u8, e.to_string()))?;
            println!(
                "bon n={}: {} distinct leaves, base blocks {}, physical blocks {}, restore copies {:?}",
                s.n, s.distinct_leaves, s.base_blocks, s.physical_blocks, s.restore_bytes_copied
            );
            let mismatches = h.summary().mismatches.len();
            emit(s.report(h, cfg), &out.report, cfg)?;
            if mismatches > 0 {
                return Err(Failure::new(
                    INVARIANT,
                    format!("{mismatches} oracle mismatches"),
                ));
            }
            Ok(())
        }
        Bench::Fanout {
            n,
            steps,
            tgen,
            ttrain,
            sandbox_ms,
            child_pages,
            template_pages,
            out,
        } => {
            let p = FanoutParams {
                n,
                steps,
                t_gen_ms: tgen,
                t_train_ms: ttrain,
                child_write_pages: child_pages,
                template_pages,
                sandbox_ms,
                seed: cfg.seed,
            };
            let reports = run_rl_fanout(&cfg.cost, cfg.share_mode, &p);
            for r in &reports {
                println!(
                    "step {}: n={} sandbox {:.3} ms, gpu_util {:.4}, private/child {} B, physical after fork {}",
                    r.step,
                    r.n,
                    r.sandbox_time_ms,
                    r.gpu_util,
                    r.per_child_private_bytes.first().copied().unwrap_or(0),
                    r.physical_blocks_after_fork
                );
            }
            let mut report = RunReport::new(ReportKind::Fanout, cfg.clone());
            report.fanout = reports;
            emit(report, &out.report, cfg)
        }
        Bench::War {
            modes,
            file_sizes,
            edit_sizes,
            samples,
            plateau,
            out,
        } => {
            let d = WarParams::default();
            let p = WarParams {
                modes: parse_modes(&modes)?,
                file_sizes: if file_sizes.is_empty() {
                    d.file_sizes
                } else {
                    file_sizes
                },
                edit_sizes: if edit_sizes.is_empty() {
                    d.edit_sizes
                } else {
                    edit_sizes
                },
                samples,
                seed: cfg.seed,
            };
            let mut w = war_sweep(&p);
            for c in &w.curves {
                for pt in &c.points {
                    println!(
                        "{:>8} S={:>8} k={:>5} copy-up median {:>8} B, metadata ops {}",
                        format!("{:?}", c.mode).to_lowercase(),
                        pt.file_size,
                        pt.edit_size,
                        pt.median_copy_bytes,
                        pt.median_metadata_ops
                    );
                }
            }
            if plateau > 0 {
                let pr = plateau_run(ShareMode::Reflink, 1 << 20, 4096, plateau, cfg.seed);
                println!(
                    "plateau: {} blocks after {} edits (bound {})",
                    pr.physical_blocks, plateau, pr.bound_blocks
                );
                w.plateau.push(pr);
            }
            let mut report = RunReport::new(ReportKind::War, cfg.clone());
            report.war = Some(w);
            emit(report, &out.report, cfg)
        }
    }
}

fn cmd_fsck(cfg: &RunConfig, trace: &Option<PathBuf>, corrupt: bool) -> Outcome {
    let m = match trace {
        None => {
            let base = synthetic_base(cfg.seed, 8, 4096, 4);
            StateManager::new(cfg.manager_config(), &base)
                .map_err(|e| Failure::new(INVARIANT, e.to_string()))?
        }
        Some(path) => {
            let events = read_trace(path)?;
            let mut h = Harness::new(Mode::Delta, cfg.manager_config(), &Default::default())
                .map_err(|e| Failure::new(INVARIANT, e.to_string()))?;
            for (i, e) in events.iter().enumerate() {
                h.apply(i, e)
                    .map_err(|e| Failure::new(e.exit_code() as u8, e.to_string()))?;
            }
            h.into_manager().expect("delta mode keeps a manager")
        }
    };
    if corrupt {
        let store = m.store().clone();
        let id = *store
            .live_block_ids()
            .first()
            .ok_or_else(|| Failure::input("store has no blocks to corrupt"))?;
        store.debug_set_refcount(id, store.refcount(id) + 1);
    }
    let r = fsck(&m);
    println!(
        "fsck: {} blocks, {} frozen layers checked",
        r.blocks_checked, r.layers_checked
    );
    if r.is_clean() {
        println!("clean");
        return Ok(());
    }
    for v in &r.refcount_violations {
        println!("violation: {v}");
    }
    for l in &r.digest_mismatches {
        println!("digest mismatch: layer {l:?}");
    }
    Err(Failure::new(INVARIANT, "store invariants violated"))
}

fn cmd_gen(cfg: &RunConfig, len: usize, out: &Option<PathBuf>) -> Outcome {
    let p = GenParams {
        len,
        read_only_ratio: cfg.read_only_ratio,
        ..GenParams::default()
    };
    let text = write_trace(&random_trace(cfg.seed, &p));
    match out {
        Some(path) => write_atomic(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(&cli).and_then(|cfg| match cli.cmd {
        Command::Replay {
            trace,
            mode,
            report,
        } => cmd_replay(&cfg, &trace, mode, &report),
        Command::Bench { which } => cmd_bench(&cfg, which),
        Command::Fsck {
            trace,
            corrupt_refcount,
        } => cmd_fsck(&cfg, &trace, corrupt_refcount),
        Command::GenTrace { len, out } => cmd_gen(&cfg, len, &out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
