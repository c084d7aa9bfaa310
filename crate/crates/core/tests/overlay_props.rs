use snap_core::overlay::{depth_for, peers};
use snap_core::{build_overlay, iset, validate_prop2, LevelPolicy, OverlayDoc, PeerId};

use proptest::prelude::*;

fn policies(n: usize) -> Vec<LevelPolicy> {
    if n.is_power_of_two() {
        vec![LevelPolicy::Auto]
    } else {
        LevelPolicy::all_builtin().to_vec()
    }
}

#[test]
fn prop2_closure_up_to_64() {
    for n in 2..=64u32 {
        for policy in policies(n as usize) {
            let o = build_overlay(&peers(0..n), &policy).unwrap();
            if let Err(r) = validate_prop2(&o) {
                panic!("N = {n} {policy:?}:\n{r}");
            }
        }
    }
}

#[test]
fn iset_distinct_and_sized() {
    for n in 2..=64usize {
        let k = depth_for(n);
        for policy in policies(n) {
            let o = build_overlay(&peers(0..n as u32), &policy).unwrap();
            for a in 0..o.period() {
                let s = iset(&o, a).unwrap();
                if n.is_power_of_two() {
                    assert_eq!(s.members.len(), n - 1);
                } else {
                    assert!(s.members.len() >= 1 << (k - 1) && s.members.len() < 1 << k);
                }
            }
        }
    }
}

#[test]
fn periods_are_common_multiples() {
    for n in 2..=200u32 {
        let o = build_overlay(&peers(0..n), &LevelPolicy::Auto).unwrap();
        for r in o.rosters().iter().filter(|r| !r.is_fill()) {
            assert_eq!(o.period() % r.period, 0);
        }
    }
}

proptest! {
    #[test]
    fn constructors_are_pure(mut ids in proptest::collection::hash_set(0u32..10_000, 2..80)) {
        let list: Vec<PeerId> = ids.drain().map(PeerId).collect();
        let a = build_overlay(&list, &LevelPolicy::Greedy).unwrap();
        let b = build_overlay(&list, &LevelPolicy::Greedy).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(validate_prop2(&a).is_ok());
    }

    #[test]
    fn document_round_trip(n in 2u32..70) {
        let o = build_overlay(&peers(0..n), &LevelPolicy::LowLevels).unwrap();
        let back = OverlayDoc::from_json(&OverlayDoc::from_overlay(&o).to_json()).unwrap().to_overlay().unwrap();
        prop_assert!(o.same_structure(&back));
    }
}
