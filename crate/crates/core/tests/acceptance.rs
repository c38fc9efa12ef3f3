//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{warm_sim, ShadowStore};
use deltastate::blockstore::BLOCK_SIZE;
use deltastate::layerfs::LayerFs;
use deltastate::procstate::{AddressSpace, TemplatePool, WarmStep};
use deltastate::searchsim::*;
use deltastate::statemanager::cost::ms_to_us;
use deltastate::{
    fsck, BaseImage, BlockStore, CostModel, GcPolicy, ImageId, ManagerConfig, RestorePath,
    RunConfig, ShareMode, SnapshotId, StateManager, TemplateId,
};

type Verdict = Result<String, String>;
type Criterion = fn(&mut Integrity) -> Verdict;

/// Integrity bookkeeping shared by every criterion.
#[derive(Default)]
struct Integrity {
    fsck_runs: u64,
    teardowns: u64,
    problems: Vec<String>,
}

impl Integrity {
    fn check(&mut self, what: &str, m: &StateManager) {
        self.fsck_runs += 1;
        let r = fsck(m);
        if !r.is_clean() {
            self.problems.push(format!(
                "{what}: fsck {:?} {:?}",
                r.refcount_violations, r.digest_mismatches
            ));
        }
    }

    /// fsck, then drop the manager and require an empty store.
    fn teardown(&mut self, what: &str, m: StateManager) {
        self.check(what, &m);
        let store = m.store().clone();
        drop(m);
        self.teardowns += 1;
        let left = store.stats().physical_block_count;
        if left != 0 {
            self.problems
                .push(format!("{what}: {left} blocks left after teardown"));
        }
    }

    fn harness(&mut self, what: &str, h: Harness) {
        if let (_, Some(m)) = h.finish() {
            self.teardown(what, m);
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run_events(h: &mut Harness, events: &[TraceEvent]) -> Result<(), String> {
    for (i, e) in events.iter().enumerate() {
        h.apply(i, e).map_err(|e| e.to_string())?;
    }
    Ok(())
}

// 1 ---------------------------------------------------------------------------

fn oracle_equivalence(ig: &mut Integrity) -> Verdict {
    let mut checks = 0;
    let mut restores = 0;
    for seed in 0..1000u64 {
        let t = random_trace(seed, &GenParams::default());
        restores += t
            .iter()
            .filter(|e| matches!(e, TraceEvent::Restore { .. }))
            .count();
        let mut h =
            Harness::new(Mode::Both, ManagerConfig::default(), &BaseImage::default()).unwrap();
        run_events(&mut h, &t).map_err(|e| format!("seed {seed}: {e}"))?;
        let s = h.summary();
        ensure(s.mismatches.is_empty(), || {
            format!("seed {seed}: first mismatch {:?}", s.mismatches[0])
        })?;
        checks += s.checks;
        ig.harness(&format!("trace {seed}"), h);
    }
    Ok(format!(
        "1000 traces, {restores} restores, {checks} boundary comparisons, 0 mismatches"
    ))
}

// 2 ---------------------------------------------------------------------------

fn cost_composition(ig: &mut Integrity) -> Verdict {
    let c = CostModel::default();
    ensure(c.checkpoint_perceived_us(ms_to_us(14.57)) == 0, || {
        "masked checkpoint not 0".into()
    })?;
    ensure(c.checkpoint_perceived_us(ms_to_us(20.0)) == 0, || {
        "longer window not 0".into()
    })?;
    ensure(c.restore_fast_us() == 5_140, || {
        format!("fast {}", c.restore_fast_us())
    })?;
    ensure(c.restore_slow_us() == 8_040, || {
        format!("slow {}", c.restore_slow_us())
    })?;
    ensure(c.checkpoint_perceived_us(ms_to_us(5.0)) == 9_570, || {
        "window 5 ms".into()
    })?;

    // The same numbers through the manager's event log.
    let base = synthetic_base(1, 4, 1000, 4);
    let mut m = StateManager::new(
        ManagerConfig {
            n_tpl: 1,
            ..ManagerConfig::default()
        },
        &base,
    )
    .unwrap();
    m.write_file("/a", 0, b"a").unwrap();
    m.llm_call(ms_to_us(14.57));
    let a = m.checkpoint().unwrap();
    let ck = m.events().last().unwrap().perceived_us;
    m.write_file("/a", 0, b"b").unwrap();
    let b = m.checkpoint().unwrap();
    let path_b = m.restore(b).unwrap();
    let fast = m.events().last().unwrap().perceived_us;
    let path_a = m.restore(a).unwrap();
    let slow = m.events().last().unwrap().perceived_us;
    ig.teardown("cost", m);
    ensure(ck == 0, || format!("masked checkpoint event {ck}"))?;
    ensure(path_b == RestorePath::Fast && fast == 5_140, || {
        format!("fast event {path_b:?} {fast}")
    })?;
    ensure(path_a == RestorePath::Slow && slow == 8_040, || {
        format!("slow event {path_a:?} {slow}")
    })?;
    Ok(
        "ck 0 ms (window >= 14.57), rs fast 5.14 ms, rs slow 8.04 ms, window 5 ms -> 9.57 ms"
            .into(),
    )
}

// 3 ---------------------------------------------------------------------------

fn change_proportional(ig: &mut Integrity) -> Verdict {
    let mut dup_total = 0;
    for mode in [ShareMode::Reflink, ShareMode::FullCopy] {
        for seed in 0..60u64 {
            let cfg = ManagerConfig {
                share_mode: mode,
                ..ManagerConfig::default()
            };
            let mut h = Harness::new(Mode::Delta, cfg, &BaseImage::default()).unwrap();
            let store = h.manager().unwrap().store().clone();
            ensure(store.stats().physical_block_count == 0, || {
                "store not empty at start".into()
            })?;
            let start = store.stats().data_bytes_copied;
            store.enable_journal();
            let mut shadow = ShadowStore::default();
            for (i, e) in random_trace(seed, &GenParams::default()).iter().enumerate() {
                h.apply(i, e).map_err(|e| e.to_string())?;
                for j in store.take_journal() {
                    shadow.apply(&j);
                }
                let copied = store.stats().data_bytes_copied - start;
                ensure(copied == shadow.duplications * BLOCK_SIZE as u64, || {
                    format!(
                        "{mode:?} seed {seed} event {i}: copied {copied}, shadow {}",
                        shadow.duplications
                    )
                })?;
                ensure(
                    shadow.live_blocks() == store.stats().physical_block_count,
                    || format!("{mode:?} seed {seed} event {i}: live block count differs"),
                )?;
            }
            dup_total += shadow.duplications;
            ig.harness("shadow", h);
        }
    }

    // The stack switches themselves never move data.
    let mut switches = 0;
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = BlockStore::new(ShareMode::Reflink);
        let base: BTreeMap<String, Vec<u8>> = (0..6)
            .map(|i| {
                (
                    format!("/f{i}"),
                    content_bytes(seed + i, 3 * BLOCK_SIZE + 17),
                )
            })
            .collect();
        let fs = LayerFs::mount(store.clone(), &base).unwrap();
        let mut configs = Vec::new();
        let mut pins = Vec::new();
        for _ in 0..30 {
            for _ in 0..rng.random_range(0..4) {
                let path = format!("/f{}", rng.random_range(0..8));
                let off = rng.random_range(0..4 * BLOCK_SIZE as u64);
                let _ = fs.write_file(&path, off, &[rng.random(); 100]);
            }
            let before = store.stats().data_bytes_copied;
            if !configs.is_empty() && rng.random_bool(0.3) {
                fs.restore_switch(&configs[rng.random_range(0..configs.len())])
                    .unwrap();
            } else {
                let c = fs.checkpoint_switch();
                pins.push(fs.pin(&c).unwrap());
                configs.push(c);
            }
            switches += 1;
            ensure(store.stats().data_bytes_copied == before, || {
                format!("switch copied data (seed {seed})")
            })?;
        }
    }
    Ok(format!(
        "120 traces, {dup_total} duplications matched exactly; {switches} switches charged 0 bytes"
    ))
}

// 4 ---------------------------------------------------------------------------

fn write_amplification(_: &mut Integrity) -> Verdict {
    let r = war_sweep(&WarParams::default());
    let mut bins = 0;
    for curve in &r.curves {
        for p in &curve.points {
            for (&off, &got) in p.offsets.iter().zip(&p.copy_bytes) {
                let bs = BLOCK_SIZE as u64;
                let touched = (off + p.edit_size - 1) / bs - off / bs + 1;
                let want = match curve.mode {
                    ShareMode::FullCopy => p.file_size,
                    ShareMode::Reflink => bs * touched,
                };
                ensure(got == want, || {
                    format!(
                        "{:?} S={} k={} off={off}: {got} != {want}",
                        curve.mode, p.file_size, p.edit_size
                    )
                })?;
            }
            bins += 1;
        }
    }
    let p = plateau_run(ShareMode::Reflink, 1 << 20, 4096, 50, 0);
    ensure(
        p.physical_blocks == 256 + 50 && p.bound_blocks == 306,
        || format!("plateau {p:?}"),
    )?;
    Ok(format!(
        "{bins} bins exact per sample; plateau {} == B + N*k = 306 blocks",
        p.physical_blocks
    ))
}

// 5 ---------------------------------------------------------------------------

fn template_pool(ig: &mut Integrity) -> Verdict {
    let cfg = RunConfig {
        n_tpl: 8,
        gc: GcPolicy::KeepAll,
        ..RunConfig::default()
    };
    let p = MctsParams {
        budget: 80,
        mode: Mode::Both,
        ..MctsParams::default()
    };
    let run = run_mcts(&cfg, &p).map_err(|e| e.to_string())?;
    let mism = run.harness.summary().mismatches.len();
    let m = run.harness.manager().unwrap();
    let pool = m.pool().stats();
    let metrics = m.metrics();
    let (slow, failed, evictions) = (
        metrics.restores_slow,
        metrics.failed_restores,
        pool.evictions,
    );
    ig.harness("mcts n_tpl=8", run.harness);
    ensure(pool.max_len <= 8, || {
        format!("pool reached {}", pool.max_len)
    })?;
    ensure(slow > 0 && evictions > 0, || {
        format!("no slow restores ({slow}) / evictions ({evictions})")
    })?;
    ensure(failed == 0 && mism == 0, || {
        format!("{failed} failed restores, {mism} mismatches")
    })?;

    // Insert-only stress on the pool itself and through the manager.
    let store = BlockStore::new(ShareMode::Reflink);
    let mut space = AddressSpace::new(store.clone());
    let mut tp = TemplatePool::new(8);
    for i in 0..100u64 {
        space.write(i % 16, 0, &i.to_le_bytes());
        space.quiesce();
        tp.insert(SnapshotId(i), space.create_template(TemplateId(i)).unwrap());
        space.resume();
        ensure(tp.len() <= 8, || "pool over capacity".into())?;
    }
    let s = tp.stats();
    ensure(s.evictions == s.inserts - 8 && s.inserts == 100, || {
        format!("pool stress {s:?}")
    })?;

    let mut m = StateManager::new(
        ManagerConfig {
            n_tpl: 8,
            ..ManagerConfig::default()
        },
        &BaseImage::default(),
    )
    .unwrap();
    for i in 0..60u64 {
        m.mem_write(i, 0, &[1]);
        m.checkpoint().unwrap();
    }
    let ms = m.pool().stats();
    ig.teardown("pool stress", m);
    ensure(ms.evictions == ms.inserts - 8 && ms.max_len == 8, || {
        format!("manager stress {ms:?}")
    })?;
    Ok(format!(
        "max pool {}, {slow} slow restores oracle-equal; stress evictions {} == {} - 8",
        pool.max_len, s.evictions, s.inserts
    ))
}

// 6 ---------------------------------------------------------------------------

fn gc_dichotomy(ig: &mut Integrity) -> Verdict {
    let p = MctsParams::default();
    let seed = RunConfig::default().seed;
    let run = |gc| {
        run_mcts(
            &RunConfig {
                gc,
                ..RunConfig::default()
            },
            &p,
        )
        .map_err(|e| e.to_string())
    };
    let good = run(GcPolicy::Reachability)?;
    let bad = run(GcPolicy::Recency(5))?;
    let all = run(GcPolicy::KeepAll)?;
    let (g, b, a) = (
        good.summary.clone(),
        bad.summary.clone(),
        all.summary.clone(),
    );
    ig.harness("reachability", good.harness);
    ig.harness("recency", bad.harness);
    ig.harness("keepall", all.harness);
    let ll = b
        .livelock
        .clone()
        .ok_or_else(|| format!("seed {seed}: Recency(5) never livelocked: {b:?}"))?;
    ensure(
        ll.streak >= 25 && ll.detected_at_iteration <= p.budget,
        || format!("livelock {ll:?}"),
    )?;
    ensure(g.failed_restores == 0 && g.livelock.is_none(), || {
        format!("reachability failed {}", g.failed_restores)
    })?;
    let reduction = 1.0 - g.final_dump_bytes as f64 / a.final_dump_bytes as f64;
    ensure((0.30..=0.70).contains(&reduction), || {
        format!("storage reduction {reduction:.3}")
    })?;
    Ok(format!(
        "seed {seed}: Recency(5) livelock at iteration {} (streak {}); Reachability 0 failed restores; dump storage {:.1}% below KeepAll",
        ll.detected_at_iteration,
        ll.streak,
        reduction * 100.0
    ))
}

// 7 ---------------------------------------------------------------------------

fn skip_ratio(ig: &mut Integrity) -> Verdict {
    let mut out = Vec::new();
    for f in [0.25, 0.6, 0.9] {
        let t = interval_trace(3, 100, f);
        let mut h =
            Harness::new(Mode::Both, ManagerConfig::default(), &BaseImage::default()).unwrap();
        run_events(&mut h, &t)?;
        let m = h.manager().unwrap().metrics();
        ensure(h.summary().mismatches.is_empty(), || {
            "oracle mismatch".into()
        })?;
        ensure(m.skip_ratio() == f, || {
            format!("f={f}: measured {}", m.skip_ratio())
        })?;
        ensure(m.lightweight_violations == 0, || {
            format!("{} violations", m.lightweight_violations)
        })?;
        out.push(format!("{f} -> {}", m.skip_ratio()));
        ig.harness("skip ratio", h);
    }
    Ok(format!("{}; 0 violations", out.join(", ")))
}

// 8 ---------------------------------------------------------------------------

/// A restored space over `pages` shared pages whose hot zone is `hot`.
fn restored(pages: u64, hot: &[u64]) -> (AddressSpace, TemplatePool) {
    let mut s = AddressSpace::new(BlockStore::new(ShareMode::Reflink));
    for p in 0..pages {
        s.write(p, 0, &[1]);
    }
    s.quiesce();
    s.incremental_dump(ImageId(0), None).unwrap();
    s.resume();
    for &p in hot {
        s.write(p, 0, &[2]);
    }
    s.quiesce();
    s.incremental_dump(ImageId(1), Some(ImageId(0))).unwrap();
    let mut pool = TemplatePool::new(1);
    pool.insert(SnapshotId(0), s.create_template(TemplateId(0)).unwrap());
    (pool.restore_fast(SnapshotId(0)).unwrap(), pool)
}

fn warm_accounting(_: &mut Integrity) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cases = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..64u64);
        let mut hot: Vec<u64> = (0..rng.random_range(0..n))
            .map(|_| rng.random_range(0..n))
            .collect();
        hot.sort_unstable();
        hot.dedup();
        let shared: BTreeSet<u64> = (0..n).collect();
        let write = |rng: &mut ChaCha8Rng| WarmStep::Write {
            page: rng.random_range(0..n + 8),
            byte: 9,
        };

        // Warm disabled.
        let sched: Vec<WarmStep> = (0..rng.random_range(0..3 * n))
            .map(|_| write(&mut rng))
            .collect();
        let distinct: BTreeSet<u64> = sched
            .iter()
            .filter_map(|s| match s {
                WarmStep::Write { page, .. } if *page < n => Some(*page),
                _ => None,
            })
            .collect();
        let (mut r, _pool) = restored(n, &hot);
        let log = r.async_warm(&sched);
        ensure(
            log.cow_faults_on_critical_path == distinct.len() as u64,
            || "warm disabled".into(),
        )?;

        // Warm fully ahead.
        let mut sched = vec![WarmStep::Warm(n as usize)];
        sched.extend((0..rng.random_range(0..3 * n)).map(|_| write(&mut rng)));
        let (mut r, _pool) = restored(n, &hot);
        ensure(
            r.async_warm(&sched).cow_faults_on_critical_path == 0,
            || "warm ahead".into(),
        )?;

        // Interleaved.
        let sched: Vec<WarmStep> = (0..rng.random_range(0..4 * n))
            .map(|_| {
                if rng.random_bool(0.5) {
                    WarmStep::Warm(rng.random_range(0..4))
                } else {
                    write(&mut rng)
                }
            })
            .collect();
        let (mut r, _pool) = restored(n, &hot);
        let log = r.async_warm(&sched);
        let want = warm_sim(&shared, &hot, &sched);
        ensure(
            (log.cow_faults_absorbed, log.cow_faults_on_critical_path) == want,
            || format!("interleaved n={n}: got {log:?}, sim {want:?}"),
        )?;
        ensure(r.soft_dirty().len() as u64 <= n + 8, || "soft dirty".into())?;
        cases += 3;
    }
    Ok(format!(
        "{cases} schedules: disabled = distinct shared writes, ahead = 0, interleaved = simulation"
    ))
}

// 9 ---------------------------------------------------------------------------

fn fanout_sharing(_: &mut Integrity) -> Verdict {
    let cost = CostModel::default();
    let idle = FanoutParams {
        n: 16,
        steps: 2,
        child_write_pages: 0,
        ..FanoutParams::default()
    };
    for r in run_rl_fanout(&cost, ShareMode::Reflink, &idle) {
        ensure(r.physical_blocks_after_fork == r.template_pages, || {
            format!("idle fork {r:?}")
        })?;
        ensure(
            r.aggregate_resident_bytes == 16 * r.shared_physical_bytes,
            || "aggregate resident".into(),
        )?;
        ensure(r.per_child_private_bytes.iter().all(|&b| b == 0), || {
            "idle child private".into()
        })?;
    }
    let busy = FanoutParams {
        n: 16,
        steps: 1,
        child_write_pages: 25_600,
        template_pages: 25_600,
        sandbox_ms: Some(100.0),
        ..FanoutParams::default()
    };
    let r = &run_rl_fanout(&cost, ShareMode::Reflink, &busy)[0];
    ensure(
        r.per_child_private_bytes.iter().all(|&b| b == 104_857_600),
        || format!("private bytes {:?}", r.per_child_private_bytes),
    )?;
    let round6 = |x: f64| (x * 1e6).round();
    ensure(round6(r.gpu_util) == round6(1850.0 / 1950.0), || {
        format!("gpu_util {}", r.gpu_util)
    })?;
    Ok(format!(
        "idle fork shares exactly; 16 x 104857600 private bytes; gpu_util {:.6}",
        r.gpu_util
    ))
}

// 10 --------------------------------------------------------------------------

fn abort_atomicity(ig: &mut Integrity) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for run in 0..50u64 {
        let t = random_trace(5000 + run, &GenParams::default());
        let mut probe =
            Harness::new(Mode::Delta, ManagerConfig::default(), &BaseImage::default()).unwrap();
        run_events(&mut probe, &t)?;
        let dumps = probe.manager().unwrap().dump_calls();
        ig.harness("abort probe", probe);
        if dumps == 0 {
            return Err(format!("run {run}: trace has no checkpoint"));
        }
        let at = rng.random_range(0..dumps);
        let cfg = ManagerConfig {
            fault_dump_at: Some(at),
            ..ManagerConfig::default()
        };
        let mut h = Harness::new(Mode::Both, cfg, &BaseImage::default()).unwrap();
        let mut hit = false;
        for (i, e) in t.iter().enumerate() {
            let pre = h.state();
            let registry = h.manager().unwrap().registry_json();
            match h.apply(i, e) {
                Ok(_) => {}
                Err(ReplayError::Fault { .. }) => {
                    let m = h.manager().unwrap();
                    ensure(observe(m) == pre, || {
                        format!("run {run}: state changed by abort")
                    })?;
                    ensure(&pre == h.oracle().unwrap().state(), || {
                        format!("run {run}: oracle differs")
                    })?;
                    ensure(m.registry_json() == registry, || {
                        format!("run {run}: registry changed")
                    })?;
                    ensure(m.metrics().aborts == 1, || "abort not counted".into())?;
                    hit = true;
                    break;
                }
                Err(e) => return Err(format!("run {run}: {e}")),
            }
        }
        ensure(hit, || format!("run {run}: fault at dump {at} never fired"))?;
        ig.harness("abort", h);
    }
    Ok("50 injected dump failures: state byte-identical, registry unchanged".into())
}

// 11 --------------------------------------------------------------------------

fn integrity(ig: &mut Integrity) -> Verdict {
    let bon = run_bon(&RunConfig::default(), &BonParams::default()).map_err(|e| e.to_string())?;
    ig.harness("bon", bon.1);
    if ig.problems.is_empty() {
        Ok(format!(
            "{} fsck passes clean, {} teardowns to 0 blocks",
            ig.fsck_runs, ig.teardowns
        ))
    } else {
        Err(format!(
            "{} problems, first: {}",
            ig.problems.len(),
            ig.problems[0]
        ))
    }
}

fn main() {
    let criteria: [(&str, Criterion); 11] = [
        ("oracle equivalence", oracle_equivalence),
        ("cost composition", cost_composition),
        ("change-proportional checkpointing", change_proportional),
        ("write-amplification curves", write_amplification),
        ("template pool", template_pool),
        ("gc dichotomy", gc_dichotomy),
        ("lightweight skip ratio", skip_ratio),
        ("async-warm fault accounting", warm_accounting),
        ("fan-out sharing", fanout_sharing),
        ("abort atomicity", abort_atomicity),
        ("store integrity", integrity),
    ];
    let mut ig = Integrity::default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(|| f(&mut ig))).unwrap_or_else(|p| {
            Err(format!(
                "panic: {}",
                p.downcast_ref::<String>().cloned().unwrap_or_default()
            ))
        });
        let secs = t0.elapsed().as_secs_f64();
        match v {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} ({secs:.1}s)", i + 1)
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
