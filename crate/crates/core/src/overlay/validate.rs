use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{depth_for, level_width, EdgeRef, MultiSbtOverlay, OverlayError, PeerId, SbtTree};

/// An edge scheduled in a slot, tagged with the chunk it carries.
///
/// The chunk number (not just the tree index) fixes the time offset between
/// two edges, which matters once `P` is smaller than the depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScheduledEdge {
    pub chunk: i64,
    pub edge: EdgeRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prop1Violation {
    /// One origin would upload twice in the same slot.
    SharedOrigin { first: ScheduledEdge, second: ScheduledEdge },
    /// Same tree and chunk, different edge level sets.
    MixedLevels { first: ScheduledEdge, second: ScheduledEdge },
    /// The earlier chunk is further along than the slot gap allows.
    Causality { later: ScheduledEdge, earlier: ScheduledEdge },
}

impl fmt::Display for Prop1Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = |s: &ScheduledEdge| {
            format!(
                "chunk {} tree {} level {} {}->{}",
                s.chunk, s.edge.tree, s.edge.level, s.edge.origin, s.edge.dest
            )
        };
        match self {
            Prop1Violation::SharedOrigin { first, second } => {
                write!(f, "shared origin: [{}] and [{}]", e(first), e(second))
            }
            Prop1Violation::MixedLevels { first, second } => {
                write!(f, "mixed levels in one tree: [{}] and [{}]", e(first), e(second))
            }
            Prop1Violation::Causality { later, earlier } => {
                write!(f, "causality: [{}] and [{}]", e(later), e(earlier))
            }
        }
    }
}

fn edge_exists(trees: &[SbtTree], e: &ScheduledEdge) -> bool {
    let p = trees.len() as i64;
    let t = &e.edge;
    if e.chunk.rem_euclid(p) as usize != t.tree {
        return false;
    }
    let tree = &trees[t.tree];
    tree.levels
        .get(t.level)
        .and_then(|l| l.iter().position(|&x| x == t.dest))
        .is_some_and(|pos| t.level > 0 && tree.parents[t.level][pos] == t.origin)
}

pub(crate) fn prop1_on(schedule: &[ScheduledEdge]) -> Vec<Prop1Violation> {
    let mut out = Vec::new();
    for (x, a) in schedule.iter().enumerate() {
        for b in &schedule[x + 1..] {
            if a.edge.origin == b.edge.origin {
                out.push(Prop1Violation::SharedOrigin { first: *a, second: *b });
                continue;
            }
            if a.chunk == b.chunk {
                if a.edge.level != b.edge.level {
                    out.push(Prop1Violation::MixedLevels { first: *a, second: *b });
                }
                continue;
            }
            let (later, earlier) = if a.chunk > b.chunk { (a, b) } else { (b, a) };
            let gap = later.chunk - earlier.chunk;
            if earlier.edge.level as i64 - later.edge.level as i64 > gap {
                out.push(Prop1Violation::Causality {
                    later: *later,
                    earlier: *earlier,
                });
            }
        }
    }
    out
}

/// Checks that the edges of one slot may upload concurrently.
///
/// Returns the (possibly empty) list of violated pairs; an edge that is not
/// part of the overlay is an error.
pub fn validate_prop1(
    schedule: &[ScheduledEdge],
    overlay: &MultiSbtOverlay,
) -> Result<Vec<Prop1Violation>, OverlayError> {
    let trees = overlay.trees();
    if let Some(bad) = schedule.iter().find(|e| !edge_exists(&trees, e)) {
        return Err(OverlayError::UnknownEdge(bad.edge));
    }
    Ok(prop1_on(schedule))
}

/// Origins of the maximal concurrent schedule anchored at a tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Iset {
    pub anchor: usize,
    pub members: Vec<PeerId>,
    pub edges: Vec<ScheduledEdge>,
}

/// Edges of the anchored schedule: level 1 of `T_i`, level `k` of `T_{i-k+1}`.
pub(crate) fn anchored_schedule(trees: &[SbtTree], anchor: usize) -> Vec<ScheduledEdge> {
    let p = trees.len() as i64;
    let depth = trees[0].levels.len() - 1;
    let mut edges = Vec::new();
    for k in 1..=depth {
        let chunk = anchor as i64 - (k as i64 - 1);
        let tree = chunk.rem_euclid(p) as usize;
        let t = &trees[tree];
        for (dest, origin) in t.levels[k].iter().zip(&t.parents[k]) {
            edges.push(ScheduledEdge {
                chunk,
                edge: EdgeRef {
                    tree,
                    level: k,
                    origin: *origin,
                    dest: *dest,
                },
            });
        }
    }
    edges
}

/// The ISet anchored at tree `anchor`. A repeated member means the overlay is broken.
pub fn iset(overlay: &MultiSbtOverlay, anchor: usize) -> Result<Iset, OverlayError> {
    if anchor >= overlay.period() {
        return Err(OverlayError::AnchorOutOfRange {
            anchor,
            period: overlay.period(),
        });
    }
    let trees = overlay.trees();
    iset_on(&trees, anchor)
}

pub(crate) fn iset_on(trees: &[SbtTree], anchor: usize) -> Result<Iset, OverlayError> {
    let edges = anchored_schedule(trees, anchor);
    let mut seen = HashSet::new();
    let mut members = Vec::with_capacity(edges.len());
    for e in &edges {
        if !seen.insert(e.edge.origin) {
            return Err(OverlayError::Malformed(format!(
                "peer {} appears twice in the ISet anchored at {anchor}",
                e.edge.origin
            )));
        }
        members.push(e.edge.origin);
    }
    Ok(Iset {
        anchor,
        members,
        edges,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prop2Failure {
    Shape(String),
    DuplicateInTree { tree: usize, peer: PeerId },
    DuplicateInRoster { level: usize, peer: PeerId },
    /// A parent's children do not occupy consecutive levels right below it.
    UploadOrder { tree: usize, parent: PeerId },
    DuplicateInIset { anchor: usize, peer: PeerId },
    Concurrency { anchor: usize, violation: Prop1Violation },
}

impl fmt::Display for Prop2Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prop2Failure::Shape(s) => write!(f, "shape: {s}"),
            Prop2Failure::DuplicateInTree { tree, peer } => {
                write!(f, "peer {peer} appears twice in tree {tree}")
            }
            Prop2Failure::DuplicateInRoster { level, peer } => {
                write!(f, "peer {peer} appears twice in the rosters (level {level})")
            }
            Prop2Failure::UploadOrder { tree, parent } => {
                write!(f, "children of {parent} in tree {tree} skip a level")
            }
            Prop2Failure::DuplicateInIset { anchor, peer } => {
                write!(f, "peer {peer} appears twice in the ISet anchored at {anchor}")
            }
            Prop2Failure::Concurrency { anchor, violation } => {
                write!(f, "anchor {anchor}: {violation}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prop2Report {
    pub failures: Vec<Prop2Failure>,
}

impl fmt::Display for Prop2Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for x in &self.failures {
            writeln!(f, "{x}")?;
        }
        Ok(())
    }
}

impl std::error::Error for Prop2Report {}

fn shape_failures(trees: &[SbtTree], n: usize, depth: usize) -> Vec<Prop2Failure> {
    let mut out = Vec::new();
    if n < 2 {
        out.push(Prop2Failure::Shape(format!("{n} peers")));
        return out;
    }
    if depth != depth_for(n) {
        out.push(Prop2Failure::Shape(format!("depth {depth} for {n} peers")));
        return out;
    }
    let universe: HashSet<PeerId> = trees[0].levels.iter().flatten().copied().collect();
    for (i, t) in trees.iter().enumerate() {
        if t.levels.len() != depth + 1 {
            out.push(Prop2Failure::Shape(format!("tree {i} has {} levels", t.levels.len())));
            continue;
        }
        for k in 0..=depth {
            let want = if k < depth { level_width(k) } else { n - (1 << (depth - 1)) };
            if t.levels[k].len() != want {
                out.push(Prop2Failure::Shape(format!(
                    "tree {i} level {k} holds {} peers, expected {want}",
                    t.levels[k].len()
                )));
            }
        }
        let mut level_of = HashMap::with_capacity(n);
        for (k, l) in t.levels.iter().enumerate() {
            for &p in l {
                if level_of.insert(p, k).is_some() {
                    out.push(Prop2Failure::DuplicateInTree { tree: i, peer: p });
                }
                if !universe.contains(&p) {
                    out.push(Prop2Failure::Shape(format!("tree {i} has unknown peer {p}")));
                }
            }
        }
        if level_of.len() != universe.len() {
            out.push(Prop2Failure::Shape(format!(
                "tree {i} covers {} of {} peers",
                level_of.len(),
                universe.len()
            )));
        }
        let mut child_levels: HashMap<PeerId, Vec<usize>> = HashMap::new();
        for k in 1..=depth {
            for &parent in &t.parents[k] {
                child_levels.entry(parent).or_default().push(k);
            }
        }
        for (parent, mut ks) in child_levels {
            ks.sort_unstable();
            let ok = level_of.get(&parent).is_some_and(|&pl| {
                ks.iter().enumerate().all(|(j, &k)| k == pl + 1 + j)
            });
            if !ok {
                out.push(Prop2Failure::UploadOrder { tree: i, parent });
            }
        }
    }
    out
}

/// Checks the minimum-delay condition on every anchor, plus the shape it relies on.
pub fn validate_prop2(overlay: &MultiSbtOverlay) -> Result<(), Prop2Report> {
    let trees = overlay.trees();
    validate_trees(&trees, overlay)
}

pub(crate) fn validate_trees(trees: &[SbtTree], overlay: &MultiSbtOverlay) -> Result<(), Prop2Report> {
    let mut failures = shape_failures(trees, overlay.n(), overlay.depth());
    let mut seen = HashSet::new();
    for r in overlay.rosters().iter().filter(|r| !r.is_fill()) {
        for &p in &r.peers {
            if !seen.insert(p) {
                failures.push(Prop2Failure::DuplicateInRoster { level: r.level, peer: p });
            }
        }
    }
    if failures.is_empty() {
        for anchor in 0..trees.len() {
            let edges = anchored_schedule(trees, anchor);
            let mut members = HashSet::new();
            for e in &edges {
                if !members.insert(e.edge.origin) {
                    failures.push(Prop2Failure::DuplicateInIset {
                        anchor,
                        peer: e.edge.origin,
                    });
                }
            }
            failures.extend(
                prop1_on(&edges)
                    .into_iter()
                    .map(|violation| Prop2Failure::Concurrency { anchor, violation }),
            );
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Prop2Report { failures })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::overlay::{build_multi_sbt_pow2, extend_multi_sbt, peers, LevelPolicy};

    fn sched(chunk: i64, tree: usize, level: usize, origin: u32, dest: u32) -> ScheduledEdge {
        ScheduledEdge {
            chunk,
            edge: EdgeRef {
                tree,
                level,
                origin: PeerId(origin),
                dest: PeerId(dest),
            },
        }
    }

    #[test]
    fn prop1_pairs() {
        assert!(prop1_on(&[sched(5, 1, 2, 1, 2), sched(5, 1, 2, 3, 4)]).is_empty());
        assert!(matches!(
            prop1_on(&[sched(5, 1, 2, 1, 2), sched(4, 0, 3, 1, 4)])[0],
            Prop1Violation::SharedOrigin { .. }
        ));
        // level 1 of T_i against level 3 of T_{i-1}: gap 1 < 3 - 1
        assert!(matches!(
            prop1_on(&[sched(5, 1, 1, 1, 2), sched(4, 0, 3, 3, 4)])[0],
            Prop1Violation::Causality { .. }
        ));
        assert!(matches!(
            prop1_on(&[sched(5, 1, 1, 1, 2), sched(5, 1, 2, 3, 4)])[0],
            Prop1Violation::MixedLevels { .. }
        ));
    }

    #[test]
    fn unknown_edge_rejected() {
        let o = build_multi_sbt_pow2(&peers(0..4)).unwrap();
        let err = validate_prop1(&[sched(0, 0, 1, 3, 2)], &o).unwrap_err();
        assert!(matches!(err, OverlayError::UnknownEdge(_)));
    }

    #[test]
    fn iset_sizes() {
        let o = build_multi_sbt_pow2(&peers(0..16)).unwrap();
        for a in 0..o.period() {
            assert_eq!(iset(&o, a).unwrap().members.len(), 15);
        }
        let two = build_multi_sbt_pow2(&peers(0..2)).unwrap();
        assert_eq!(iset(&two, 0).unwrap().members, vec![PeerId(0)]);
        let twenty = extend_multi_sbt(&peers(0..20), &LevelPolicy::Auto).unwrap();
        for a in 0..twenty.period() {
            assert_eq!(iset(&twenty, a).unwrap().members.len(), 19);
        }
        assert!(iset(&o, 4).is_err());
    }

    #[test]
    fn constructed_overlays_pass() {
        validate_prop2(&build_multi_sbt_pow2(&peers(0..16)).unwrap()).unwrap();
        for policy in [LevelPolicy::SingleLevel, LevelPolicy::LowLevels, LevelPolicy::Greedy] {
            validate_prop2(&extend_multi_sbt(&peers(0..20), &policy).unwrap()).unwrap();
        }
    }

    #[test]
    fn duplicated_peer_is_named() {
        let o = build_multi_sbt_pow2(&peers(0..16)).unwrap();
        let mut trees = o.trees();
        let root = trees[0].levels[0][0];
        let victim = trees[0].levels[2][1];
        trees[0].levels[2][1] = root;
        let bad = MultiSbtOverlay::from_trees(trees).unwrap();
        let report = validate_prop2(&bad).unwrap_err();
        assert!(report
            .failures
            .contains(&Prop2Failure::DuplicateInTree { tree: 0, peer: root }));
        assert_ne!(root, victim);
    }
}
