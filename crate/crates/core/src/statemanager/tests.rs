use std::collections::BTreeMap;

use super::*;
use crate::blockstore::BLOCK_SIZE;

fn base() -> BaseImage {
    BaseImage {
        files: [
            ("/src/a.py".to_string(), vec![b'a'; 3 * BLOCK_SIZE]),
            ("/README".to_string(), b"readme".to_vec()),
        ]
        .into(),
        pages: (0..8u64).map(|p| (p, vec![p as u8; 32])).collect(),
    }
}

fn mgr() -> StateManager {
    StateManager::new(ManagerConfig::default(), &base()).unwrap()
}

fn state(m: &StateManager) -> (BTreeMap<String, Vec<u8>>, BTreeMap<u64, Vec<u8>>) {
    (m.fs().materialize(), m.space().contents())
}

fn census_ok(m: &StateManager) {
    assert!(m.store().verify_refcounts(&m.block_census()).is_empty());
    assert!(m.fs().verify_frozen_digests().is_empty());
}

#[test]
fn root_snapshot_registered() {
    let m = mgr();
    let root = m.node(m.root()).unwrap();
    assert_eq!(root.tag, Tag::Standard);
    assert!(root.template_present);
    assert_eq!(
        m.images()
            .get(root.dump_image.unwrap())
            .unwrap()
            .captured_pages()
            .len(),
        8
    );
    assert!(m.events().is_empty());
    census_ok(&m);
}

#[test]
fn read_only_command_is_lightweight() {
    let mut m = mgr();
    m.exec("grep -r foo src/");
    let before = m.store_stats();
    let images = m.images().len();
    let gen = m.fs().gen();
    let sid = m.checkpoint().unwrap();
    let n = m.node(sid).unwrap();
    assert_eq!(n.tag, Tag::Lightweight);
    assert_eq!(n.alias_of, Some(m.root()));
    assert_eq!(m.store_stats(), before);
    assert_eq!(m.images().len(), images);
    assert_eq!(m.fs().gen(), gen);
    let ev = m.events().last().unwrap();
    assert_eq!(
        (ev.column(), ev.perceived_us, ev.lanes),
        ("LW ck", 0, Lanes::default())
    );
}

#[test]
fn mutating_actions_take_standard_path() {
    let mut m = mgr();
    m.exec("pip install foo");
    m.write_file("/src/a.py", 0, b"x").unwrap();
    m.write_file("/src/a.py", BLOCK_SIZE as u64, b"y").unwrap();
    m.write_file("/new.txt", 0, b"z").unwrap();
    m.mem_write(2, 0, b"m1");
    m.mem_write(9, 0, b"m2");
    let copied = m.store_stats().data_bytes_copied;
    let sid = m.checkpoint().unwrap();
    let n = m.node(sid).unwrap().clone();
    assert_eq!(n.tag, Tag::Standard);
    assert_eq!(
        m.images()
            .get(n.dump_image.unwrap())
            .unwrap()
            .captured_pages(),
        vec![2, 9]
    );
    assert_eq!(m.store_stats().data_bytes_copied, copied);
    assert!(m.fs().upper_is_empty());
    // The first write after the checkpoint pays the copy-up.
    m.write_file("/new.txt", 0, b"Z").unwrap();
    assert_eq!(
        m.store_stats().data_bytes_copied,
        copied + BLOCK_SIZE as u64
    );
    census_ok(&m);
}

#[test]
fn empty_interval_is_standard() {
    let mut m = mgr();
    let sid = m.checkpoint().unwrap();
    assert_eq!(m.node(sid).unwrap().tag, Tag::Standard);
}

#[test]
fn unsound_lightweight_detected() {
    let mut m = mgr();
    m.exec_with("cat notes.txt > out.txt", |m| {
        m.write_file("/out.txt", 0, b"notes").unwrap()
    });
    let err = m.checkpoint().unwrap_err();
    assert_eq!(
        err,
        ManagerError::LightweightUnsound {
            command: "cat notes.txt > out.txt".into(),
            pattern: "cat".into()
        }
    );
    assert_eq!(m.metrics().lightweight_violations, 1);
}

#[test]
fn dump_failure_aborts_atomically() {
    let mut m = mgr();
    m.checkpoint().unwrap();
    m.write_file("/src/a.py", 10, b"edit").unwrap();
    m.mem_write(3, 0, b"dirty");
    m.set_fault_dump_at(Some(1));
    let pre = state(&m);
    let registry = m.registry_json();
    let dirty = m.space().soft_dirty().clone();
    let err = m.checkpoint().unwrap_err();
    assert_eq!(err, ManagerError::DumpFailure(1));
    assert_eq!(state(&m), pre);
    assert_eq!(m.registry_json(), registry);
    assert_eq!(m.space().soft_dirty(), &dirty);
    assert!(!m.space().is_quiesced());
    assert_eq!(m.metrics().aborts, 1);
    census_ok(&m);
    // The retry is a normal checkpoint that still captures the dirty page.
    let sid = m.checkpoint().unwrap();
    let img = m.node(sid).unwrap().dump_image.unwrap();
    assert_eq!(m.images().get(img).unwrap().captured_pages(), vec![3]);
}

#[test]
fn restore_paths_and_costs() {
    let mut m = mgr();
    m.write_file("/f", 0, b"one").unwrap();
    m.mem_write(1, 0, b"one");
    let a = m.checkpoint().unwrap();
    let at_a = state(&m);
    m.write_file("/f", 0, b"two").unwrap();
    m.mem_write(1, 0, b"two");
    m.checkpoint().unwrap();

    assert_eq!(m.restore(a).unwrap(), RestorePath::Fast);
    assert_eq!(state(&m), at_a);
    assert_eq!(m.events().last().unwrap().perceived_us, 5_140);

    // Force eviction of a's template with a tiny pool.
    let cfg = ManagerConfig {
        n_tpl: 1,
        ..ManagerConfig::default()
    };
    let mut m = StateManager::new(cfg, &base()).unwrap();
    m.write_file("/f", 0, b"one").unwrap();
    let a = m.checkpoint().unwrap();
    let at_a = state(&m);
    m.write_file("/f", 0, b"two").unwrap();
    m.checkpoint().unwrap();
    assert!(!m.node(a).unwrap().template_present);
    assert_eq!(m.restore(a).unwrap(), RestorePath::Slow);
    assert_eq!(state(&m), at_a);
    assert_eq!(m.events().last().unwrap().perceived_us, 8_040);
    assert!(m.node(a).unwrap().template_present);
    assert_eq!(m.restore(a).unwrap(), RestorePath::Fast);
    assert_eq!(state(&m), at_a);
    census_ok(&m);
}

#[test]
fn checkpoint_masking() {
    let mut m = mgr();
    m.mem_write(0, 0, b"x");
    m.checkpoint().unwrap();
    assert_eq!(m.events().last().unwrap().perceived_us, 0);
    m.llm_call(5_000);
    m.mem_write(0, 0, b"y");
    m.checkpoint().unwrap();
    assert_eq!(m.events().last().unwrap().perceived_us, 9_570);
    assert_eq!(m.events().last().unwrap().llm_window_us, 5_000);
}

#[test]
fn lightweight_restore_equals_ancestor() {
    let mut m = mgr();
    m.write_file("/f", 0, b"std").unwrap();
    let s = m.checkpoint().unwrap();
    m.exec("ls -la");
    m.exec("git diff");
    let lw = m.checkpoint().unwrap();
    m.write_file("/f", 0, b"later").unwrap();
    m.mem_write(4, 0, b"later");
    m.checkpoint().unwrap();
    m.restore(lw).unwrap();
    let via_alias = state(&m);
    assert_eq!(m.lineage(), lw);
    assert_eq!(m.events().last().unwrap().column(), "LW rs");
    m.restore(s).unwrap();
    assert_eq!(state(&m), via_alias);
    // A lightweight child of a lightweight node aliases the same ancestor.
    m.restore(lw).unwrap();
    m.exec("cat README");
    let lw2 = m.checkpoint().unwrap();
    assert_eq!(m.node(lw2).unwrap().alias_of, Some(s));
}

#[test]
fn value_time_test_isolation() {
    let mut m = mgr();
    m.write_file("/src/a.py", 0, b"patched").unwrap();
    let pre = state(&m);
    let verdict = m
        .value_time_test(|m| {
            m.mkdir("/.pytest_cache").unwrap();
            m.write_file("/.pytest_cache/v", 0, b"cache").unwrap();
            m.mem_write(40, 0, b"heap");
            "FAILED test_a"
        })
        .unwrap();
    assert_eq!(verdict, "FAILED test_a");
    assert_eq!(state(&m), pre);
    assert!(!m.fs().exists("/.pytest_cache"));
    let internal = m.node(m.lineage()).unwrap();
    assert!(internal.internal);
    assert_eq!(m.metrics().tests_run, 1);
    census_ok(&m);
}

#[test]
fn nested_value_time_tests() {
    let mut m = mgr();
    m.write_file("/x", 0, b"outer").unwrap();
    let pre = state(&m);
    let (outer_seen, inner) = m
        .value_time_test(|m| {
            m.write_file("/x", 0, b"OUTER").unwrap();
            let mid = state(m);
            let inner = m
                .value_time_test(|m| {
                    m.write_file("/x", 0, b"INNER").unwrap();
                    m.read_file("/x").unwrap()
                })
                .unwrap();
            assert_eq!(state(m), mid);
            (m.read_file("/x").unwrap(), inner)
        })
        .unwrap();
    assert_eq!(inner, b"INNER");
    assert_eq!(outer_seen, b"OUTER");
    assert_eq!(state(&m), pre);
}

#[test]
fn unknown_and_pruned_ids() {
    let mut m = mgr();
    assert_eq!(
        m.restore(SnapshotId(99)).unwrap_err(),
        ManagerError::UnknownSnapshotId(SnapshotId(99))
    );
    m.mem_write(0, 0, b"a");
    let a = m.checkpoint().unwrap();
    m.mem_write(0, 0, b"b");
    m.checkpoint().unwrap();
    m.gc(GcPolicy::Recency(1), &SearchView::new());
    // a is the dump parent of the lineage, so it survives.
    assert_eq!(m.node(a).unwrap().status, NodeStatus::Live);
    m.restore(m.root()).unwrap();
    m.exec("ls");
    m.checkpoint().unwrap();
    let report = m.gc(GcPolicy::Recency(1), &SearchView::new());
    assert!(report.evicted.contains(&a));
    assert_eq!(
        m.restore(a).unwrap_err(),
        ManagerError::UnknownSnapshotId(a)
    );
    assert_eq!(m.metrics().failed_restores, 2);
    census_ok(&m);
}

#[test]
fn gc_chain_closure_and_reachability() {
    let mut m = mgr();
    m.mem_write(0, 0, b"a");
    let a = m.checkpoint().unwrap();
    m.mem_write(1, 0, b"b");
    let b = m.checkpoint().unwrap();
    m.restore(m.root()).unwrap();
    m.mem_write(2, 0, b"x");
    let x = m.checkpoint().unwrap();
    m.mem_write(3, 0, b"y");
    let y = m.checkpoint().unwrap();
    m.restore(m.root()).unwrap();

    // Only b is selectable: a and the root come along as chain ancestors.
    let view: SearchView = [
        (b, NodeFlags::default()),
        (
            x,
            NodeFlags {
                failed: true,
                ..Default::default()
            },
        ),
    ]
    .into();
    let before = m.storage();
    let r = m.gc(GcPolicy::Reachability, &view);
    assert_eq!(r.retained, vec![m.root(), a, b]);
    assert_eq!(r.evicted, vec![x, y]);
    assert!(r.after.logical_dump_bytes < before.logical_dump_bytes);
    assert!(r.after.physical_blocks <= before.physical_blocks);
    assert_eq!(m.restore(b).unwrap(), RestorePath::Fast);
    census_ok(&m);

    // Nothing left to prune: storage unchanged.
    let r2 = m.gc(GcPolicy::Reachability, &view);
    assert!(r2.evicted.is_empty());
    assert_eq!(r2.before, r2.after);
}

fn old_node_then_newer() -> (StateManager, SnapshotId) {
    let mut m = mgr();
    m.mem_write(0, 0, b"x");
    let x = m.checkpoint().unwrap();
    for i in 0..6u8 {
        m.restore(m.root()).unwrap();
        m.mem_write(5, 0, &[i]);
        m.checkpoint().unwrap();
    }
    (m, x)
}

#[test]
fn reachability_keeps_old_selectable_node() {
    let (mut m, x) = old_node_then_newer();
    let view: SearchView = [(x, NodeFlags::default())].into();
    m.gc(GcPolicy::Reachability, &view);
    assert_eq!(m.node(x).unwrap().status, NodeStatus::Live);

    let (mut m, x) = old_node_then_newer();
    m.gc(GcPolicy::Recency(2), &SearchView::new());
    assert_eq!(m.node(x).unwrap().status, NodeStatus::Pruned);
}

#[test]
fn keep_all_is_noop() {
    let mut m = mgr();
    for i in 0..4u8 {
        m.mem_write(0, 0, &[i]);
        m.checkpoint().unwrap();
    }
    let r = m.gc(GcPolicy::KeepAll, &SearchView::new());
    assert!(r.evicted.is_empty());
    assert_eq!(r.before, r.after);
}

#[test]
fn broker_responses_follow_restores() {
    let mut m = mgr();
    m.llm_call(1_000_000);
    m.mem_write(0, 0, b"a");
    let a = m.checkpoint().unwrap();
    assert_eq!(m.metrics().responses_delivered, 1);
    m.mem_write(0, 0, b"b");
    m.checkpoint().unwrap();
    m.restore(a).unwrap();
    assert_eq!(m.metrics().responses_delivered, 2);
    assert!(m.space().outstanding().is_empty());
}

#[test]
fn skip_ratio_counts_caller_checkpoints() {
    let mut m = mgr();
    m.exec("ls");
    m.checkpoint().unwrap();
    m.write_file("/a", 0, b"1").unwrap();
    m.checkpoint().unwrap();
    m.value_time_test(|_| ()).unwrap();
    assert_eq!(m.metrics().skip_ratio(), 0.5);
}

#[test]
fn registry_serializes() {
    let mut m = mgr();
    m.exec("ls");
    m.checkpoint().unwrap();
    let v = m.registry_json();
    let arr = v.as_array().unwrap();
    assert_eq!(arr.len(), 2);
    assert_eq!(arr[0]["tag"], "standard");
    assert_eq!(arr[0]["layer_config"]["lowers"], serde_json::json!([0]));
    assert_eq!(arr[1]["tag"], "lightweight");
    assert_eq!(arr[1]["alias_of"], 0);
}

#[test]
fn teardown_frees_everything() {
    let store;
    {
        let mut m = mgr();
        store = m.store().clone();
        for i in 0..5u8 {
            m.write_file("/src/a.py", i as u64 * 100, &[i; 10]).unwrap();
            m.mem_write(i as u64, 0, &[i]);
            m.checkpoint().unwrap();
        }
        m.restore(SnapshotId(2)).unwrap();
        m.value_time_test(|m| m.mem_write(50, 0, b"t")).unwrap();
        m.gc(GcPolicy::Recency(2), &SearchView::new());
    }
    assert_eq!(store.stats().physical_block_count, 0);
}
