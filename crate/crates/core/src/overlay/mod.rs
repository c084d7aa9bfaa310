//! Multi snowball-tree overlays.
//!
//! An overlay is a family of `P` snowball trees. The server pushes chunk `c`
//! to tree `c mod P`; inside one tree the peer at level 0 receives the chunk
//! first and every holder keeps uploading it once per slot, so level `k`
//! (`k < K`) holds `2^{(k-1)+}` peers and the final level `K` holds whatever
//! is left. Occupants of level `k` rotate through a roster of `P_k` blocks,
//! which is what lets consecutive trees share peers without two uploads of
//! one peer ever landing in the same slot.

mod construct;
mod doc;
pub(crate) mod validate;

pub use construct::{build_multi_sbt_pow2, build_overlay, extend_multi_sbt, LevelPolicy};
pub use doc::{OverlayDoc, TreeDoc};
pub use validate::{
    iset, validate_prop1, validate_prop2, Iset, Prop1Violation, Prop2Failure, Prop2Report,
    ScheduledEdge,
};

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a peer, unique within a session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PeerId(pub u32);

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for PeerId {
    fn from(v: u32) -> Self {
        PeerId(v)
    }
}

/// Convenience for tests and examples: `peers(0..16)`.
pub fn peers(range: impl IntoIterator<Item = u32>) -> Vec<PeerId> {
    range.into_iter().map(PeerId).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OverlayError {
    #[error("peer count {0} is not a power of two (>= 2)")]
    NotPowerOfTwo(usize),
    #[error("peer count {0} is an exact power of two; use the power-of-two constructor")]
    PowerOfTwo(usize),
    #[error("need at least {min} peers, got {got}")]
    TooFewPeers { min: usize, got: usize },
    #[error("duplicate peer {0}")]
    DuplicatePeer(PeerId),
    #[error("level set {levels:?} cannot absorb {remainder} extra peers")]
    InvalidLevelSet { levels: Vec<usize>, remainder: usize },
    #[error("tree index {anchor} out of range (P = {period})")]
    AnchorOutOfRange { anchor: usize, period: usize },
    #[error("edge {0:?} does not exist in the overlay")]
    UnknownEdge(EdgeRef),
    #[error("peer {0} is not in the overlay")]
    UnknownPeer(PeerId),
    #[error("malformed overlay: {0}")]
    Malformed(String),
}

/// Number of peers at level `k` of a full tree level: `2^{(k-1)+}`.
pub fn level_width(k: usize) -> usize {
    if k == 0 {
        1
    } else {
        1usize << (k - 1)
    }
}

/// `ceil(log2 n)`, with `depth_for(1) == 0`.
pub fn depth_for(n: usize) -> usize {
    assert!(n >= 1);
    (usize::BITS - (n - 1).leading_zeros()) as usize
}

/// Number of holders before level `k` in holder order (`2^{k-1}` for `k >= 1`).
fn holders_before(k: usize) -> usize {
    if k == 0 {
        0
    } else {
        1usize << (k - 1)
    }
}

/// The roster `s_k`: peers cycling through level `k` with period `P_k`.
///
/// A level without a roster (the unrostered fill level `K-1` of an extended
/// overlay, or any level of a hand-edited overlay) has `period == 0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelRoster {
    pub level: usize,
    pub peers: Vec<PeerId>,
    pub period: usize,
}

impl LevelRoster {
    pub fn is_fill(&self) -> bool {
        self.period == 0
    }

    /// Block `b` of the roster: the occupants of level `k` in trees `i` with `i mod P_k == b`.
    pub fn block(&self, b: usize) -> &[PeerId] {
        let w = level_width(self.level);
        &self.peers[b * w..(b + 1) * w]
    }
}

/// Directed tree edge: `origin` uploads to `dest`, which sits at `level` of `tree`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeRef {
    pub tree: usize,
    pub level: usize,
    pub origin: PeerId,
    pub dest: PeerId,
}

/// One snowball tree. `parents[k][p]` is the parent of `levels[k][p]`; level 0 has none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SbtTree {
    pub levels: Vec<Vec<PeerId>>,
    pub parents: Vec<Vec<PeerId>>,
}

impl SbtTree {
    pub fn level_of(&self, peer: PeerId) -> Option<usize> {
        self.levels.iter().position(|l| l.contains(&peer))
    }

    pub fn root(&self) -> PeerId {
        self.levels[0][0]
    }

    pub fn parent_of(&self, peer: PeerId) -> Option<PeerId> {
        for (k, level) in self.levels.iter().enumerate().skip(1) {
            if let Some(p) = level.iter().position(|&x| x == peer) {
                return Some(self.parents[k][p]);
            }
        }
        None
    }

    /// Children of `peer` in upload order (ascending level).
    pub fn children_of(&self, peer: PeerId) -> Vec<PeerId> {
        let mut out = Vec::new();
        for (k, ps) in self.parents.iter().enumerate().skip(1) {
            for (p, &parent) in ps.iter().enumerate() {
                if parent == peer {
                    out.push(self.levels[k][p]);
                }
            }
        }
        out
    }

    /// All edges of the tree, grouped by destination level.
    pub fn edges(&self, tree: usize) -> impl Iterator<Item = EdgeRef> + '_ {
        self.levels
            .iter()
            .enumerate()
            .skip(1)
            .flat_map(move |(k, level)| {
                level.iter().zip(&self.parents[k]).map(move |(&dest, &origin)| EdgeRef {
                    tree,
                    level: k,
                    origin,
                    dest,
                })
            })
    }

    pub fn peer_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Layout {
    /// Trees are generated on demand from the rosters.
    Periodic,
    /// Trees stored verbatim (imported documents, locally repaired overlays).
    Explicit(Vec<SbtTree>),
}

/// A periodic family of snowball trees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiSbtOverlay {
    n: usize,
    depth: usize,
    period: usize,
    rosters: Vec<LevelRoster>,
    /// Peers in no roster; they only ever appear as fill (leaves).
    unrostered: Vec<PeerId>,
    layout: Layout,
}

impl MultiSbtOverlay {
    pub(crate) fn periodic(
        n: usize,
        depth: usize,
        rosters: Vec<LevelRoster>,
        unrostered: Vec<PeerId>,
    ) -> Self {
        let period = rosters
            .iter()
            .filter(|r| !r.is_fill())
            .fold(1usize, |acc, r| num_integer::lcm(acc, r.period));
        MultiSbtOverlay {
            n,
            depth,
            period,
            rosters,
            unrostered,
            layout: Layout::Periodic,
        }
    }

    /// Overlay from explicit trees. Performs only shape checks; run
    /// [`validate_prop2`] for the scheduling guarantees.
    pub fn from_trees(trees: Vec<SbtTree>) -> Result<Self, OverlayError> {
        let first = trees
            .first()
            .ok_or_else(|| OverlayError::Malformed("no trees".into()))?;
        let n = first.peer_count();
        let depth = first.levels.len().saturating_sub(1);
        for (i, t) in trees.iter().enumerate() {
            if t.levels.len() != depth + 1 || t.parents.len() != depth + 1 {
                return Err(OverlayError::Malformed(format!("tree {i} has the wrong depth")));
            }
            for (k, (l, p)) in t.levels.iter().zip(&t.parents).enumerate() {
                let expect = if k == 0 { 0 } else { l.len() };
                if p.len() != expect {
                    return Err(OverlayError::Malformed(format!(
                        "tree {i} level {k}: {} peers but {} parents",
                        l.len(),
                        p.len()
                    )));
                }
            }
        }
        let rosters = derive_rosters(&trees, depth);
        Ok(MultiSbtOverlay {
            n,
            depth,
            period: trees.len(),
            rosters,
            unrostered: Vec::new(),
            layout: Layout::Explicit(trees),
        })
    }

    /// Number of peers `N`.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Tree depth `K = ceil(log2 N)`.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Pattern period `P` (number of distinct trees).
    pub fn period(&self) -> usize {
        self.period
    }

    pub fn rosters(&self) -> &[LevelRoster] {
        &self.rosters
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self.layout, Layout::Periodic)
    }

    /// Every peer, in roster order followed by the remaining peers in first-appearance order.
    pub fn peer_order(&self) -> Vec<PeerId> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(self.n);
        for p in self.rosters.iter().flat_map(|r| &r.peers).chain(&self.unrostered) {
            if seen.insert(*p) {
                out.push(*p);
            }
        }
        if let Layout::Explicit(trees) = &self.layout {
            for t in trees {
                for p in t.levels.iter().flatten() {
                    if seen.insert(*p) {
                        out.push(*p);
                    }
                }
            }
        }
        out
    }

    pub fn contains(&self, peer: PeerId) -> bool {
        match &self.layout {
            Layout::Periodic => {
                self.unrostered.contains(&peer)
                    || self.rosters.iter().any(|r| r.peers.contains(&peer))
            }
            Layout::Explicit(trees) => trees[0].level_of(peer).is_some(),
        }
    }

    /// Tree `T_i`.
    pub fn tree(&self, i: usize) -> SbtTree {
        assert!(i < self.period, "tree index {i} out of range");
        match &self.layout {
            Layout::Explicit(trees) => trees[i].clone(),
            Layout::Periodic => self.generate_tree(i),
        }
    }

    /// All `P` trees.
    pub fn trees(&self) -> Vec<SbtTree> {
        match &self.layout {
            Layout::Explicit(trees) => trees.clone(),
            Layout::Periodic => (0..self.period).map(|i| self.generate_tree(i)).collect(),
        }
    }

    /// Same overlay with the trees stored explicitly.
    pub fn to_explicit(&self) -> MultiSbtOverlay {
        let trees = self.trees();
        MultiSbtOverlay {
            layout: Layout::Explicit(trees),
            ..self.clone()
        }
    }

    /// Whether level `k` peers also upload to level `K` (their period leaves room for it).
    fn sends_to_last_level(&self, k: usize) -> bool {
        let r = &self.rosters[k];
        !r.is_fill() && r.period >= self.depth - k
    }

    /// Element `j` of the fill list of tree `i`: absent roster blocks grouped by
    /// level in roster order, then unrostered peers.
    fn fill_at(&self, i: usize, mut j: usize) -> PeerId {
        for r in self.rosters.iter().filter(|r| !r.is_fill()) {
            let w = level_width(r.level);
            let group = (r.period - 1) * w;
            if j < group {
                let b = j / w;
                let b = if b >= i % r.period { b + 1 } else { b };
                return r.peers[b * w + j % w];
            }
            j -= group;
        }
        self.unrostered[j]
    }

    /// Occupant of position `idx` at level `k` of tree `i` (periodic layout only).
    fn occupant(&self, i: usize, k: usize, idx: usize) -> PeerId {
        if k < self.depth {
            let r = &self.rosters[k];
            if !r.is_fill() {
                return r.block(i % r.period)[idx];
            }
            return self.fill_at(i, idx);
        }
        let offset = self
            .rosters
            .iter()
            .filter(|r| r.is_fill())
            .map(|r| level_width(r.level))
            .sum::<usize>();
        self.fill_at(i, offset + idx)
    }

    fn last_level_len(&self) -> usize {
        self.n - holders_before(self.depth)
    }

    fn generate_tree(&self, i: usize) -> SbtTree {
        let k_max = self.depth;
        let mut levels = Vec::with_capacity(k_max + 1);
        for k in 0..k_max {
            levels.push((0..level_width(k)).map(|p| self.occupant(i, k, p)).collect::<Vec<_>>());
        }
        levels.push(
            (0..self.last_level_len())
                .map(|p| self.occupant(i, k_max, p))
                .collect::<Vec<_>>(),
        );
        let mut parents = vec![Vec::new(); k_max + 1];
        let mut holders: Vec<PeerId> = Vec::with_capacity(self.n);
        for k in 1..=k_max {
            holders.extend_from_slice(&levels[k - 1]);
            if k < k_max {
                parents[k] = holders[..levels[k].len()].to_vec();
            } else {
                let eligible: Vec<PeerId> = (0..k_max)
                    .filter(|&m| self.sends_to_last_level(m))
                    .flat_map(|m| levels[m].iter().copied())
                    .collect();
                assert!(
                    eligible.len() >= levels[k_max].len(),
                    "not enough last-level uploaders"
                );
                parents[k] = eligible[..levels[k_max].len()].to_vec();
            }
        }
        SbtTree { levels, parents }
    }

    /// Child slots `(level, index)` of the roster-`m` peer at block position `q`.
    /// The shape is the same in every tree the peer is internal in.
    pub(crate) fn child_slots(&self, m: usize, q: usize) -> Vec<(usize, usize)> {
        let h = holders_before(m) + q;
        let mut out: Vec<(usize, usize)> =
            (m + 1..self.depth).filter(|&k| h < level_width(k)).map(|k| (k, h)).collect();
        if self.sends_to_last_level(m) {
            let e = (0..m)
                .filter(|&x| self.sends_to_last_level(x))
                .map(level_width)
                .sum::<usize>()
                + q;
            if e < self.last_level_len() {
                out.push((self.depth, e));
            }
        }
        out
    }

    /// Every peer that occupies slot `(k, idx)` in some tree `i` with
    /// `i = residue (mod modulus)`; `modulus` must divide `P`.
    pub(crate) fn occupants_over(&self, k: usize, idx: usize, modulus: usize, residue: usize) -> Vec<PeerId> {
        use num_integer::Integer;
        if k < self.depth && !self.rosters[k].is_fill() {
            let r = &self.rosters[k];
            let g = modulus.gcd(&r.period);
            return (0..r.period)
                .filter(|x| x % g == residue % g)
                .map(|x| r.block(x)[idx])
                .collect();
        }
        let mut j = if k < self.depth {
            idx
        } else {
            idx + self
                .rosters
                .iter()
                .filter(|r| r.is_fill())
                .map(|r| level_width(r.level))
                .sum::<usize>()
        };
        for r in self.rosters.iter().filter(|r| !r.is_fill()) {
            let w = level_width(r.level);
            let group = (r.period - 1) * w;
            if j < group {
                let g = modulus.gcd(&r.period);
                let b0 = j / w;
                let mut out = Vec::new();
                for x in (0..r.period).filter(|x| x % g == residue % g) {
                    let b = if b0 >= x { b0 + 1 } else { b0 };
                    let v = r.peers[b * w + j % w];
                    if !out.contains(&v) {
                        out.push(v);
                    }
                }
                return out;
            }
            j -= group;
        }
        vec![self.unrostered[j]]
    }
}

/// Rosters of an explicit overlay: distinct level occupants in first-appearance
/// order, with the smallest period under which the level repeats.
fn derive_rosters(trees: &[SbtTree], depth: usize) -> Vec<LevelRoster> {
    let p = trees.len();
    (0..depth)
        .map(|k| {
            let period = (1..=p)
                .filter(|d| p % d == 0)
                .find(|&d| (0..p).all(|i| trees[i].levels[k] == trees[(i + d) % p].levels[k]))
                .unwrap_or(p);
            let mut seen = HashSet::new();
            let peers = (0..period)
                .flat_map(|i| trees[i].levels[k].iter().copied())
                .filter(|x| seen.insert(*x))
                .collect::<Vec<_>>();
            let regular = peers.len() == period * level_width(k);
            LevelRoster {
                level: k,
                peers,
                period: if regular { period } else { 0 },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_and_width() {
        assert_eq!(depth_for(2), 1);
        assert_eq!(depth_for(3), 2);
        assert_eq!(depth_for(16), 4);
        assert_eq!(depth_for(17), 5);
        assert_eq!(level_width(0), 1);
        assert_eq!(level_width(1), 1);
        assert_eq!(level_width(4), 8);
    }

    #[test]
    fn roster_size_identity() {
        for k_depth in 1..=16usize {
            let sum: usize = (0..k_depth).map(|k| (k_depth - k) * level_width(k)).sum();
            assert_eq!(sum, (1 << k_depth) - 1, "K = {k_depth}");
        }
    }
}
