//! Admission, joins and departure repair for the backbone overlay.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::overlay::{
    build_overlay, depth_for, validate_prop2, EdgeRef, LevelPolicy, MultiSbtOverlay, OverlayError,
    PeerId, SbtTree,
};
use crate::schedule::{derive_neighbor_tables, NeighborTable, ScheduleError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeerProfile {
    pub id: PeerId,
    /// Upload capacity in bits per second.
    pub upload_bw: f64,
    pub labeled_stable: bool,
    pub truly_stable: bool,
    pub join_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "tier")]
pub enum Admission {
    Backbone { surplus: f64 },
    SecondTier { surplus: f64 },
}

impl Admission {
    pub fn is_backbone(&self) -> bool {
        matches!(self, Admission::Backbone { .. })
    }

    /// Bandwidth left for serving pulls.
    pub fn surplus(&self) -> f64 {
        match *self {
            Admission::Backbone { surplus } | Admission::SecondTier { surplus } => surplus,
        }
    }
}

/// Backbone iff labeled stable and able to sustain `b_base`; the rest of the
/// uplink is left for the second tier.
pub fn admit(profile: &PeerProfile, b_base: f64) -> Admission {
    assert!(b_base > 0.0, "b_base must be positive");
    if profile.labeled_stable && profile.upload_bw >= b_base {
        Admission::Backbone {
            surplus: profile.upload_bw - b_base,
        }
    } else {
        Admission::SecondTier {
            surplus: profile.upload_bw.max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MembershipError {
    #[error(transparent)]
    Overlay(#[from] OverlayError),
    #[error("peer {0} is already in the overlay")]
    AlreadyMember(PeerId),
    #[error("overlay would shrink below 2 peers")]
    TooSmall,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

fn table_diff(
    old: &BTreeMap<PeerId, NeighborTable>,
    new: &BTreeMap<PeerId, NeighborTable>,
) -> BTreeMap<PeerId, NeighborTable> {
    new.iter()
        .filter(|(p, t)| old.get(p).map_or(true, |o| o.subsets != t.subsets))
        .map(|(p, t)| (*p, t.clone()))
        .collect()
}

fn tables(o: &MultiSbtOverlay) -> Result<BTreeMap<PeerId, NeighborTable>, MembershipError> {
    Ok(derive_neighbor_tables(o)?)
}

/// Adds `peers` in one reshaping: the overlay is rebuilt on the existing peer
/// order with the newcomers appended, so the power-of-two base and every
/// roster block not touched by the period adjustment keep their occupants.
pub fn join_backbone_batch(
    overlay: &MultiSbtOverlay,
    peers: &[PeerId],
    policy: &LevelPolicy,
) -> Result<(MultiSbtOverlay, BTreeMap<PeerId, NeighborTable>), MembershipError> {
    let mut order = overlay.peer_order();
    for p in peers {
        if overlay.contains(*p) || order.contains(p) {
            return Err(MembershipError::AlreadyMember(*p));
        }
        order.push(*p);
    }
    let before = tables(overlay)?;
    let next = build_overlay(&order, policy)?;
    let after = tables(&next)?;
    Ok((next, table_diff(&before, &after)))
}

pub fn join_backbone(
    overlay: &MultiSbtOverlay,
    peer: PeerId,
    policy: &LevelPolicy,
) -> Result<(MultiSbtOverlay, BTreeMap<PeerId, NeighborTable>), MembershipError> {
    join_backbone_batch(overlay, &[peer], policy)
}

/// Children left without a parent in each tree where `departed` is internal.
pub fn starvation_alerts(
    overlay: &MultiSbtOverlay,
    departed: PeerId,
) -> Result<BTreeMap<usize, Vec<PeerId>>, OverlayError> {
    if !overlay.contains(departed) {
        return Err(OverlayError::UnknownPeer(departed));
    }
    Ok(overlay
        .trees()
        .iter()
        .enumerate()
        .filter_map(|(i, t)| {
            let kids = t.children_of(departed);
            (!kids.is_empty()).then_some((i, kids))
        })
        .collect())
}

/// `(tree, old, new)`: `new` takes over the position `old` held in `tree`.
pub type Replacement = (usize, PeerId, PeerId);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairPlan {
    pub departed: PeerId,
    pub replacements: Vec<Replacement>,
    pub removed_edges: Vec<EdgeRef>,
    pub table_updates: BTreeMap<PeerId, NeighborTable>,
    /// No local promotion chain existed and the overlay was rebuilt.
    pub rebuilt: bool,
    #[serde(skip)]
    result: Option<MultiSbtOverlay>,
}

impl RepairPlan {
    /// The repaired overlay.
    pub fn apply(&self, overlay: &MultiSbtOverlay) -> Result<MultiSbtOverlay, MembershipError> {
        match &self.result {
            Some(o) => Ok(o.clone()),
            None => Ok(handle_departure(overlay, self.departed)?
                .result
                .expect("fresh plan carries its result")),
        }
    }
}

/// Per-peer upload counts by slot residue mod `P`.
struct Busy {
    p: usize,
    slots: HashMap<PeerId, Vec<u16>>,
}

impl Busy {
    fn of(trees: &[SbtTree]) -> Self {
        let p = trees.len();
        let mut b = Busy {
            p,
            slots: HashMap::new(),
        };
        for (i, t) in trees.iter().enumerate() {
            for (k, level) in t.levels.iter().enumerate() {
                for &x in level {
                    let m = child_count(t, x);
                    b.add(x, &residues(i, k, m, p));
                }
            }
        }
        b
    }

    fn add(&mut self, peer: PeerId, rs: &[usize]) {
        let e = self.slots.entry(peer).or_insert_with(|| vec![0; self.p]);
        for &r in rs {
            e[r] += 1;
        }
    }

    fn remove(&mut self, peer: PeerId, rs: &[usize]) {
        if let Some(e) = self.slots.get_mut(&peer) {
            for &r in rs {
                e[r] -= 1;
            }
        }
    }

    fn free(&self, peer: PeerId, rs: &[usize]) -> bool {
        self.slots
            .get(&peer)
            .is_none_or(|e| rs.iter().all(|&r| e[r] == 0))
    }
}

fn child_count(t: &SbtTree, x: PeerId) -> usize {
    t.parents.iter().flatten().filter(|&&p| p == x).count()
}

/// Slot residues in which the occupant of a level-`k` position with `m` children uploads.
fn residues(tree: usize, k: usize, m: usize, p: usize) -> Vec<usize> {
    (0..m).map(|j| (tree + k + j) % p).collect()
}

/// Promotion chain for the vacancy at `(level, idx)` of tree `i`.
///
/// Returns positions `(level, idx)` of the promoted peers in order; the last one
/// is on the final level and simply disappears. Shorter chains come first
/// (each link costs table updates), ties go to the lowest peer ids.
fn find_chain(
    t: &SbtTree,
    i: usize,
    vacancy: (usize, usize),
    busy: &mut Busy,
    budget: &mut usize,
) -> Option<Vec<(usize, usize)>> {
    let depth = t.levels.len() - 1;
    for len in 1..=depth - vacancy.0 {
        let mut chain = Vec::new();
        if dfs(t, i, vacancy, len, busy, &mut chain, budget) {
            return Some(chain);
        }
        if *budget == 0 {
            return None;
        }
    }
    None
}

fn dfs(
    t: &SbtTree,
    i: usize,
    vacancy: (usize, usize),
    left: usize,
    busy: &mut Busy,
    chain: &mut Vec<(usize, usize)>,
    budget: &mut usize,
) -> bool {
    let depth = t.levels.len() - 1;
    let p = busy.p;
    let holder = t.levels[vacancy.0][vacancy.1];
    let need = residues(i, vacancy.0, child_count(t, holder), p);
    let mut cands: Vec<(PeerId, usize, usize)> = Vec::new();
    if left == 1 {
        cands.extend(t.levels[depth].iter().enumerate().map(|(x, &id)| (id, depth, x)));
    } else {
        for k in vacancy.0 + 1..depth {
            cands.extend(t.levels[k].iter().enumerate().map(|(x, &id)| (id, k, x)));
        }
    }
    cands.sort();
    for (x, k, idx) in cands {
        if *budget == 0 {
            return false;
        }
        *budget -= 1;
        if chain.iter().any(|&(ck, ci)| t.levels[ck][ci] == x) {
            continue;
        }
        let own = residues(i, k, child_count(t, x), p);
        busy.remove(x, &own);
        let ok = busy.free(x, &need);
        if ok {
            busy.add(x, &need);
            chain.push((k, idx));
            if left == 1 || dfs(t, i, (k, idx), left - 1, busy, chain, budget) {
                return true;
            }
            chain.pop();
            busy.remove(x, &need);
        }
        busy.add(x, &own);
    }
    false
}

/// Applies a chain inside one tree. The vacancy keeps its children, each
/// promoted peer inherits the children of the position it moves into.
/// Returns the swaps and the final parent of the removed leaf.
fn apply_chain(
    t: &mut SbtTree,
    vacancy: (usize, usize),
    chain: &[(usize, usize)],
) -> (Vec<(PeerId, PeerId)>, PeerId) {
    let mut positions = vec![vacancy];
    positions.extend_from_slice(chain);
    let occupant = |t: &SbtTree, (k, x): (usize, usize)| t.levels[k][x];
    let kids: Vec<Vec<(usize, usize)>> = positions
        .iter()
        .map(|&pos| {
            let id = occupant(t, pos);
            let mut v = Vec::new();
            for (k, ps) in t.parents.iter().enumerate() {
                for (x, &par) in ps.iter().enumerate() {
                    if par == id {
                        v.push((k, x));
                    }
                }
            }
            v
        })
        .collect();
    let movers: Vec<PeerId> = chain.iter().map(|&pos| occupant(t, pos)).collect();
    let mut swaps = Vec::new();
    for (j, mover) in movers.iter().enumerate() {
        let (k, x) = positions[j];
        swaps.push((t.levels[k][x], *mover));
        t.levels[k][x] = *mover;
        for &(ck, cx) in &kids[j] {
            t.parents[ck][cx] = *mover;
        }
    }
    let (k, x) = *positions.last().expect("chain is non-empty");
    t.levels[k].remove(x);
    (swaps, t.parents[k].remove(x))
}

fn local_repair(
    trees: &[SbtTree],
    departed: PeerId,
) -> Option<(Vec<SbtTree>, Vec<Replacement>)> {
    let depth = trees[0].levels.len() - 1;
    let mut trees = trees.to_vec();
    let mut busy = Busy::of(&trees);
    busy.slots.remove(&departed);
    let mut replacements = Vec::new();
    // leaf appearances first: they only release slots
    for (i, t) in trees.iter_mut().enumerate() {
        if let Some(x) = t.levels[depth].iter().position(|&p| p == departed) {
            // a final-level child is always its parent's last upload
            let parent = t.parents[depth][x];
            busy.remove(parent, &[(i + depth - 1) % busy.p]);
            t.levels[depth].remove(x);
            t.parents[depth].remove(x);
        }
    }
    let mut budget = 200_000usize;
    for i in 0..trees.len() {
        let Some(k) = trees[i].level_of(departed) else {
            continue;
        };
        let x = trees[i].levels[k].iter().position(|&p| p == departed).unwrap();
        let chain = find_chain(&trees[i], i, (k, x), &mut busy, &mut budget)?;
        let (swaps, leaf_parent) = apply_chain(&mut trees[i], (k, x), &chain);
        busy.remove(leaf_parent, &[(i + depth - 1) % busy.p]);
        replacements.extend(swaps.into_iter().map(|(o, n)| (i, o, n)));
    }
    Some((trees, replacements))
}

/// Position-wise differences between two tree families.
fn diff_positions(old: &[SbtTree], new: &[SbtTree]) -> Vec<Replacement> {
    let mut out = Vec::new();
    for (i, (a, b)) in old.iter().zip(new).enumerate() {
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            for (x, y) in la.iter().zip(lb) {
                if x != y {
                    out.push((i, *x, *y));
                }
            }
        }
    }
    out
}

/// Repairs the overlay after `departed` leaves, using the default level policy
/// if a rebuild is needed.
pub fn handle_departure(overlay: &MultiSbtOverlay, departed: PeerId) -> Result<RepairPlan, MembershipError> {
    handle_departure_with(overlay, departed, &LevelPolicy::Auto)
}

pub fn handle_departure_with(
    overlay: &MultiSbtOverlay,
    departed: PeerId,
    policy: &LevelPolicy,
) -> Result<RepairPlan, MembershipError> {
    if !overlay.contains(departed) {
        return Err(OverlayError::UnknownPeer(departed).into());
    }
    let n = overlay.n();
    if n <= 2 {
        return Err(MembershipError::TooSmall);
    }
    let trees = overlay.trees();
    let removed_edges: Vec<EdgeRef> = trees
        .iter()
        .enumerate()
        .flat_map(|(i, t)| t.edges(i).collect::<Vec<_>>())
        .filter(|e| e.dest == departed || e.origin == departed)
        .collect();
    let before = tables(overlay)?;
    let same_depth = depth_for(n - 1) == overlay.depth();
    let local = if same_depth {
        local_repair(&trees, departed).and_then(|(t, r)| {
            let o = MultiSbtOverlay::from_trees(t).ok()?;
            validate_prop2(&o).ok()?;
            Some((o, r))
        })
    } else {
        None
    };
    let (next, replacements, rebuilt) = match local {
        Some((o, r)) => (o, r, false),
        None => {
            let order: Vec<PeerId> = overlay.peer_order().into_iter().filter(|&p| p != departed).collect();
            let o = build_overlay(&order, policy)?;
            let r = diff_positions(&trees, &o.trees());
            (o, r, true)
        }
    };
    let after = tables(&next)?;
    Ok(RepairPlan {
        departed,
        replacements,
        removed_edges,
        table_updates: table_diff(&before, &after),
        rebuilt,
        result: Some(next),
    })
}

/// Peers adjacent to `who` (parent or child in some tree) in either overlay.
pub fn neighbourhood(overlays: &[&MultiSbtOverlay], who: &BTreeSet<PeerId>) -> BTreeSet<PeerId> {
    let mut out = who.clone();
    for o in overlays {
        for t in o.trees() {
            for k in 1..t.levels.len() {
                for (c, p) in t.levels[k].iter().zip(&t.parents[k]) {
                    if who.contains(c) {
                        out.insert(*p);
                    }
                    if who.contains(p) {
                        out.insert(*c);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::overlay::peers;
    use crate::schedule::simulate_slots;

    fn profile(bw: f64, stable: bool) -> PeerProfile {
        PeerProfile {
            id: PeerId(1),
            upload_bw: bw,
            labeled_stable: stable,
            truly_stable: stable,
            join_time: 0.0,
        }
    }

    #[test]
    fn admission() {
        assert_eq!(admit(&profile(500e3, true), 300e3), Admission::Backbone { surplus: 200e3 });
        assert_eq!(admit(&profile(300e3, true), 300e3), Admission::Backbone { surplus: 0.0 });
        assert!(!admit(&profile(1000e3, false), 300e3).is_backbone());
        assert!(!admit(&profile(200e3, true), 300e3).is_backbone());
    }

    #[test]
    fn joins_validate() {
        for (n, policy) in [(16u32, LevelPolicy::SingleLevel), (16, LevelPolicy::Auto), (4, LevelPolicy::Auto), (2, LevelPolicy::Auto)] {
            let o = build_overlay(&peers(0..n), &LevelPolicy::Auto).unwrap();
            let (next, updates) = join_backbone(&o, PeerId(1000), &policy).unwrap();
            validate_prop2(&next).unwrap();
            assert_eq!(next.n(), n as usize + 1);
            assert!(!updates.is_empty());
            assert!(simulate_slots(&next, 4 * next.period() as u64).unwrap().max_lag() <= next.depth() as u64);
        }
        let o = build_overlay(&peers(0..4), &LevelPolicy::Auto).unwrap();
        let (five, _) = join_backbone(&o, PeerId(9), &LevelPolicy::Auto).unwrap();
        assert!(five.trees().iter().all(|t| t.levels[3].len() == 1));
        assert!(join_backbone(&o, PeerId(2), &LevelPolicy::Auto).is_err());
    }

    #[test]
    fn alerts() {
        let o = build_overlay(&peers(0..16), &LevelPolicy::Auto).unwrap();
        let leaf = (0..16u32)
            .map(PeerId)
            .find(|&p| o.trees().iter().all(|t| t.children_of(p).is_empty()));
        if let Some(leaf) = leaf {
            assert!(starvation_alerts(&o, leaf).unwrap().is_empty());
        }
        let root = o.tree(0).root();
        let alerts = starvation_alerts(&o, root).unwrap();
        assert_eq!(alerts[&0], o.tree(0).children_of(root));
        assert!(starvation_alerts(&o, PeerId(99)).is_err());
    }

    #[test]
    fn departure_sixteen() {
        let o = build_overlay(&peers(0..16), &LevelPolicy::Auto).unwrap();
        for d in 0..16u32 {
            let plan = handle_departure(&o, PeerId(d)).unwrap();
            let next = plan.apply(&o).unwrap();
            validate_prop2(&next).unwrap();
            let run = simulate_slots(&next, 4 * next.period() as u64).unwrap();
            assert!(run.is_optimal(4));
            assert!(!next.contains(PeerId(d)));
        }
    }

    #[test]
    fn plan_json() {
        let o = build_overlay(&peers(0..12), &LevelPolicy::Auto).unwrap();
        let plan = handle_departure(&o, PeerId(3)).unwrap();
        let text = serde_json::to_string(&plan).unwrap();
        let back: RepairPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(back.replacements, plan.replacements);
        assert_eq!(back.table_updates, plan.table_updates);
        assert!(back.apply(&o).unwrap().same_structure(&plan.apply(&o).unwrap()));
    }

    #[test]
    fn too_small() {
        let o = build_overlay(&peers(0..2), &LevelPolicy::Auto).unwrap();
        assert_eq!(handle_departure(&o, PeerId(0)).unwrap_err(), MembershipError::TooSmall);
    }
}
