use std::collections::BTreeSet;

use snap_core::membership::{admit, handle_departure, join_backbone, neighbourhood, PeerProfile};
use snap_core::overlay::peers;
use snap_core::{build_overlay, simulate_slots, validate_prop2, LevelPolicy, PeerId};

use proptest::prelude::*;

#[test]
fn repair_closure_3_to_64() {
    let (mut local, mut rebuilt) = (0, 0);
    for n in 3..=64u32 {
        let o = build_overlay(&peers(0..n), &LevelPolicy::Auto).unwrap();
        for d in 0..n {
            let plan = handle_departure(&o, PeerId(d)).unwrap();
            let next = plan.apply(&o).unwrap();
            if let Err(r) = validate_prop2(&next) {
                panic!("N = {n}, departed {d}:\n{r}");
            }
            let run = simulate_slots(&next, 4 * next.period() as u64).unwrap();
            assert!(run.is_optimal(next.depth()), "N = {n}, departed {d}");
            if plan.rebuilt { rebuilt += 1 } else { local += 1 }
        }
    }
    println!("local {local} rebuilt {rebuilt}");
}

#[test]
fn repair_locality() {
    for n in [5u32, 12, 16, 20, 33] {
        let o = build_overlay(&peers(0..n), &LevelPolicy::Auto).unwrap();
        for d in 0..n {
            let plan = handle_departure(&o, PeerId(d)).unwrap();
            let next = plan.apply(&o).unwrap();
            let mut touched: BTreeSet<PeerId> = plan.replacements.iter().flat_map(|r| [r.1, r.2]).collect();
            touched.insert(PeerId(d));
            let near = neighbourhood(&[&o, &next], &touched);
            assert!(plan.table_updates.keys().all(|p| near.contains(p)), "N = {n}, departed {d}");
        }
    }
}

#[test]
fn join_then_leave_keeps_delay_profile() {
    for n in [2u32, 4, 7, 16, 21] {
        let o = build_overlay(&peers(0..n), &LevelPolicy::Auto).unwrap();
        let (grown, _) = join_backbone(&o, PeerId(500), &LevelPolicy::Auto).unwrap();
        let back = handle_departure(&grown, PeerId(500)).unwrap().apply(&grown).unwrap();
        let profile = |o: &snap_core::MultiSbtOverlay| {
            let run = simulate_slots(o, 2 * o.period() as u64).unwrap();
            let mut lags: Vec<u64> = run.traces[0].delivery.values().map(|r| r - run.traces[0].emit_slot).collect();
            lags.sort();
            let max: Vec<u64> = run.traces.iter().map(|t| t.lag()).collect::<BTreeSet<_>>().into_iter().collect();
            (lags, max)
        };
        assert_eq!(profile(&o), profile(&back), "N = {n}");
    }
}

proptest! {
    #[test]
    fn admission_monotone(bw in 0.0f64..2e6, base in 1.0f64..1e6, bump in 0.0f64..1e6, stable: bool) {
        let p = PeerProfile { id: PeerId(0), upload_bw: bw, labeled_stable: stable, truly_stable: stable, join_time: 0.0 };
        let low = admit(&p, base).is_backbone();
        let high = admit(&p, base + bump).is_backbone();
        prop_assert!(!high || low);
    }
}
