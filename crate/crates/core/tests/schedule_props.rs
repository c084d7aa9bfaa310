use std::collections::HashMap;

use snap_core::overlay::{depth_for, peers};
use snap_core::schedule::table_sizes;
use snap_core::{build_overlay, derive_neighbor_tables, per_peer_upload_load, simulate_slots, LevelPolicy, PeerId};

fn policies(n: usize) -> Vec<LevelPolicy> {
    if n.is_power_of_two() {
        vec![LevelPolicy::Auto]
    } else {
        LevelPolicy::all_builtin().to_vec()
    }
}

#[test]
fn oracle_optimal_up_to_64() {
    for n in 2..=64usize {
        for policy in policies(n) {
            let o = build_overlay(&peers(0..n as u32), &policy).unwrap();
            let run = simulate_slots(&o, 4 * o.period() as u64).unwrap();
            assert!(run.violations.is_empty(), "N = {n} {policy:?}: {:?}", run.violations[0]);
            assert!(run.max_lag() <= depth_for(n) as u64, "N = {n} {policy:?}");
            for s in &run.slots {
                let mut seen = std::collections::HashSet::new();
                assert!(s.uploads.iter().all(|e| seen.insert(e.edge.origin)));
            }
        }
    }
}

#[test]
fn steady_state_conservation() {
    for n in 2..=40usize {
        for policy in policies(n) {
            let o = build_overlay(&peers(0..n as u32), &policy).unwrap();
            let run = simulate_slots(&o, 4 * o.period() as u64 + 8).unwrap();
            let load = per_peer_upload_load(&run.traces, &o);
            let total: f64 = load.values().sum();
            assert!((total - (n - 1) as f64).abs() < 1e-9, "N = {n}: {total}");
            assert!(load.values().all(|&x| x <= 1.0 + 1e-12));
        }
    }
}

#[test]
fn tables_replay_tree_edges() {
    for n in [3u32, 8, 16, 20, 37] {
        let o = build_overlay(&peers(0..n), &LevelPolicy::Auto).unwrap();
        let tables = derive_neighbor_tables(&o).unwrap();
        let mut from_tables: HashMap<(usize, PeerId, PeerId), usize> = HashMap::new();
        for t in tables.values() {
            for (tree, kids) in &t.subsets {
                for k in kids {
                    *from_tables.entry((*tree, t.owner, *k)).or_default() += 1;
                }
            }
        }
        let mut from_trees: HashMap<(usize, PeerId, PeerId), usize> = HashMap::new();
        for (i, t) in o.trees().iter().enumerate() {
            for e in t.edges(i) {
                *from_trees.entry((i, e.origin, e.dest)).or_default() += 1;
            }
        }
        assert_eq!(from_tables, from_trees);
    }
}

#[test]
fn table_bound_default_policies() {
    for n in 2..=4096usize {
        let k = depth_for(n);
        for policy in [LevelPolicy::Auto, LevelPolicy::Greedy] {
            let o = build_overlay(&peers(0..n as u32), &policy).unwrap();
            for s in table_sizes(&o) {
                assert!(s.distinct <= 1 + k * (k - 1) / 2, "N = {n}: {s:?}");
                if k >= 2 && s.deepest_internal + 2 >= k {
                    assert!(s.distinct <= 3, "N = {n}: {s:?}");
                }
            }
        }
    }
}
