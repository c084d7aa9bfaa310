//! Neighbor tables and the synchronous slot oracle.
//!
//! A slot is one chunk transmission time. The server hands chunk `c` to the
//! root of tree `c mod P` at the start of slot `c`; a peer holding a chunk at the
//! start of slot `s` may upload it during `s`, and the receiver holds it from
//! slot `s + 1`. So the root of a chunk has lag 0 and a level-`k` peer lag `k`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::overlay::{
    level_width, EdgeRef, MultiSbtOverlay, PeerId, Prop1Violation, Prop2Report,
    ScheduledEdge, SbtTree,
};
use crate::overlay::validate::prop1_on;

/// Per-peer push table: the peer's children in each tree where it is internal.
///
/// Subsets are kept in the order the peer serves them: by arrival phase of
/// the corresponding chunks, starting from the lowest tree index. For overlays
/// built by the constructors a peer sits at the same level in all of its
/// trees, so this is plain tree order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborTable {
    pub owner: PeerId,
    pub subsets: Vec<(usize, Vec<PeerId>)>,
    pub cursor: usize,
}

impl NeighborTable {
    /// Number of distinct peers across all subsets.
    pub fn distinct_entries(&self) -> usize {
        self.subsets
            .iter()
            .flat_map(|(_, c)| c)
            .collect::<HashSet<_>>()
            .len()
    }

    pub fn subset_for(&self, tree: usize) -> Option<&[PeerId]> {
        self.subsets
            .iter()
            .find(|(t, _)| *t == tree)
            .map(|(_, c)| c.as_slice())
    }

    pub fn current(&self) -> Option<&(usize, Vec<PeerId>)> {
        self.subsets.get(self.cursor)
    }

    pub fn advance(&mut self) {
        if !self.subsets.is_empty() {
            self.cursor = (self.cursor + 1) % self.subsets.len();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("overlay fails validation:\n{0}")]
    Invalid(Prop2Report),
    #[error("peer {peer} starved in slot {slot}: waits for chunk {waiting_for} while holding chunk {holding}")]
    Starvation {
        peer: PeerId,
        slot: u64,
        waiting_for: u64,
        holding: u64,
    },
    #[error("chunk {chunk} never reached peer {peer}")]
    Incomplete { chunk: u64, peer: PeerId },
}

fn tables_from_trees(trees: &[SbtTree]) -> BTreeMap<PeerId, NeighborTable> {
    let p = trees.len();
    let mut entries: BTreeMap<PeerId, Vec<(usize, usize, Vec<PeerId>)>> = BTreeMap::new();
    for peer in trees[0].levels.iter().flatten() {
        entries.entry(*peer).or_default();
    }
    for (i, t) in trees.iter().enumerate() {
        let mut kids: BTreeMap<PeerId, Vec<PeerId>> = BTreeMap::new();
        for k in 1..t.levels.len() {
            for (child, parent) in t.levels[k].iter().zip(&t.parents[k]) {
                kids.entry(*parent).or_default().push(*child);
            }
        }
        for (parent, children) in kids {
            let level = t.level_of(parent).unwrap_or(0);
            entries.entry(parent).or_default().push((i, level, children));
        }
    }
    entries
        .into_iter()
        .map(|(owner, mut subs)| {
            if let Some(&(i0, l0, _)) = subs.first() {
                let origin = (i0 + l0) as i64;
                subs.sort_by_key(|&(i, l, _)| (((i + l) as i64 - origin).rem_euclid(p as i64), i));
            }
            let table = NeighborTable {
                owner,
                subsets: subs.into_iter().map(|(i, _, c)| (i, c)).collect(),
                cursor: 0,
            };
            (owner, table)
        })
        .collect()
}

/// Neighbor tables of a validated overlay, one per peer (leaf-only peers get an empty table).
pub fn derive_neighbor_tables(
    overlay: &MultiSbtOverlay,
) -> Result<BTreeMap<PeerId, NeighborTable>, ScheduleError> {
    let trees = overlay.trees();
    crate::overlay::validate::validate_trees(&trees, overlay).map_err(ScheduleError::Invalid)?;
    Ok(tables_from_trees(&trees))
}

/// Distinct-entry count of one peer's table, with the deepest level at which it is internal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSize {
    pub peer: PeerId,
    pub deepest_internal: usize,
    pub distinct: usize,
}

/// Table sizes of every internal peer.
///
/// Periodic overlays are handled block by block without expanding the `P`
/// trees, which keeps large `N` (where `P` runs into the thousands) cheap.
pub fn table_sizes(overlay: &MultiSbtOverlay) -> Vec<TableSize> {
    if overlay.is_periodic() {
        let mut out = Vec::new();
        for r in overlay.rosters().iter().filter(|r| !r.is_fill()) {
            let w = level_width(r.level);
            for b in 0..r.period {
                for q in 0..w {
                    let slots = overlay.child_slots(r.level, q);
                    if slots.is_empty() {
                        continue;
                    }
                    let mut set = HashSet::new();
                    for (k, idx) in slots {
                        set.extend(overlay.occupants_over(k, idx, r.period, b));
                    }
                    out.push(TableSize {
                        peer: r.block(b)[q],
                        deepest_internal: r.level,
                        distinct: set.len(),
                    });
                }
            }
        }
        out.sort_by_key(|t| t.peer);
        out
    } else {
        let trees = overlay.trees();
        let tables = tables_from_trees(&trees);
        tables
            .values()
            .filter(|t| !t.subsets.is_empty())
            .map(|t| TableSize {
                peer: t.owner,
                deepest_internal: t
                    .subsets
                    .iter()
                    .filter_map(|(i, _)| trees[*i].level_of(t.owner))
                    .max()
                    .unwrap_or(0),
                distinct: t.distinct_entries(),
            })
            .collect()
    }
}

/// Uploads of one slot plus the tree receiving the server's new chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSchedule {
    pub slot: u64,
    pub uploads: Vec<ScheduledEdge>,
    pub server_target: Option<usize>,
}

/// Round-robin server plan: chunk `c` goes to tree `c mod P` in slot `c`.
pub fn server_push_plan(overlay: &MultiSbtOverlay, num_chunks: u64) -> Vec<SlotSchedule> {
    let p = overlay.period() as u64;
    (0..num_chunks)
        .map(|c| SlotSchedule {
            slot: c,
            uploads: Vec::new(),
            server_target: Some((c % p) as usize),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkTrace {
    pub chunk: u64,
    pub emit_slot: u64,
    pub delivery: BTreeMap<PeerId, u64>,
}

impl ChunkTrace {
    /// Slots from emission until the last peer holds the chunk.
    pub fn lag(&self) -> u64 {
        self.delivery.values().max().map_or(0, |r| r - self.emit_slot)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotRun {
    pub traces: Vec<ChunkTrace>,
    pub slots: Vec<SlotSchedule>,
    pub violations: Vec<(u64, Prop1Violation)>,
}

impl SlotRun {
    pub fn max_lag(&self) -> u64 {
        self.traces.iter().map(ChunkTrace::lag).max().unwrap_or(0)
    }

    /// Every chunk within `depth` slots and no concurrency violation.
    pub fn is_optimal(&self, depth: usize) -> bool {
        self.violations.is_empty() && self.max_lag() <= depth as u64
    }
}

struct PeerState {
    table: NeighborTable,
    /// Next chunk to forward, per subset.
    next_chunk: Vec<u64>,
    /// Current job: (subset, chunk, next child index).
    job: Option<(usize, u64, usize)>,
}

/// Brute-force synchronous oracle.
///
/// Every peer serves its subsets strictly round-robin, one upload per slot.
/// A peer that must wait for its current subset's chunk while already holding
/// another chunk it owes its children is reported as starved.
pub fn simulate_slots(overlay: &MultiSbtOverlay, num_chunks: u64) -> Result<SlotRun, ScheduleError> {
    let trees = overlay.trees();
    simulate_on(&trees, num_chunks)
}

pub(crate) fn simulate_on(trees: &[SbtTree], num_chunks: u64) -> Result<SlotRun, ScheduleError> {
    let p = trees.len() as u64;
    let depth = trees[0].levels.len() - 1;
    let tables = tables_from_trees(trees);
    let ids: Vec<PeerId> = tables.keys().copied().collect();
    let index: HashMap<PeerId, usize> = ids.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let mut states: Vec<PeerState> = tables
        .into_values()
        .map(|table| PeerState {
            next_chunk: table.subsets.iter().map(|(t, _)| *t as u64).collect(),
            table,
            job: None,
        })
        .collect();
    // recv[c][peer]
    let mut recv: Vec<Vec<Option<u64>>> = vec![vec![None; ids.len()]; num_chunks as usize];
    let mut slots = Vec::new();
    let mut violations = Vec::new();
    let horizon = num_chunks + 2 * p + 4 * depth as u64 + 4;
    let holds = |recv: &Vec<Vec<Option<u64>>>, c: u64, peer: usize, s: u64| {
        recv.get(c as usize).and_then(|r| r[peer]).is_some_and(|r| r <= s)
    };
    for s in 0..horizon {
        let mut target = None;
        if s < num_chunks {
            let tree = (s % p) as usize;
            let root = index[&trees[tree].root()];
            recv[s as usize][root].get_or_insert(s);
            target = Some(tree);
        }
        let mut uploads = Vec::new();
        let mut arrivals = Vec::new();
        for (pi, st) in states.iter_mut().enumerate() {
            if st.table.subsets.is_empty() {
                continue;
            }
            if st.job.is_none() {
                let sub = st.table.cursor;
                let c = st.next_chunk[sub];
                if c >= num_chunks {
                    continue;
                }
                if holds(&recv, c, pi, s) {
                    st.job = Some((sub, c, 0));
                } else if let Some(h) = (0..st.next_chunk.len())
                    .map(|x| st.next_chunk[x])
                    .find(|&h| h < num_chunks && holds(&recv, h, pi, s))
                {
                    return Err(ScheduleError::Starvation {
                        peer: ids[pi],
                        slot: s,
                        waiting_for: c,
                        holding: h,
                    });
                }
            }
            if let Some((sub, c, x)) = st.job {
                let (tree, children) = &st.table.subsets[sub];
                let child = children[x];
                let level = trees[*tree].level_of(child).unwrap_or(0);
                uploads.push(ScheduledEdge {
                    chunk: c as i64,
                    edge: EdgeRef {
                        tree: *tree,
                        level,
                        origin: ids[pi],
                        dest: child,
                    },
                });
                arrivals.push((c, index[&child]));
                if x + 1 == children.len() {
                    st.job = None;
                    st.next_chunk[sub] += p;
                    st.table.advance();
                } else {
                    st.job = Some((sub, c, x + 1));
                }
            }
        }
        for (c, peer) in arrivals {
            recv[c as usize][peer].get_or_insert(s + 1);
        }
        violations.extend(prop1_on(&uploads).into_iter().map(|v| (s, v)));
        slots.push(SlotSchedule {
            slot: s,
            uploads,
            server_target: target,
        });
        let done = s + 1 >= num_chunks
            && recv.iter().all(|r| r.iter().all(Option::is_some))
            && states.iter().all(|st| st.job.is_none());
        if done {
            break;
        }
    }
    let mut traces = Vec::with_capacity(num_chunks as usize);
    for (c, r) in recv.iter().enumerate() {
        let mut delivery = BTreeMap::new();
        for (pi, slot) in r.iter().enumerate() {
            match slot {
                Some(slot) => {
                    delivery.insert(ids[pi], *slot);
                }
                None => {
                    return Err(ScheduleError::Incomplete {
                        chunk: c as u64,
                        peer: ids[pi],
                    })
                }
            }
        }
        traces.push(ChunkTrace {
            chunk: c as u64,
            emit_slot: c as u64,
            delivery,
        });
    }
    Ok(SlotRun {
        traces,
        slots,
        violations,
    })
}

/// Mean uploads per slot of every peer over the steady window `[K, num_chunks)`.
pub fn per_peer_upload_load(traces: &[ChunkTrace], overlay: &MultiSbtOverlay) -> BTreeMap<PeerId, f64> {
    let trees = overlay.trees();
    let p = trees.len() as u64;
    let from = overlay.depth() as u64;
    let to = traces.len() as u64;
    let mut counts: BTreeMap<PeerId, u64> = overlay.peer_order().into_iter().map(|x| (x, 0)).collect();
    for tr in traces {
        let tree = &trees[(tr.chunk % p) as usize];
        for (&peer, &slot) in &tr.delivery {
            if slot == tr.emit_slot || slot == 0 {
                continue;
            }
            let up = slot - 1;
            if up >= from && up < to {
                if let Some(parent) = tree.parent_of(peer) {
                    *counts.entry(parent).or_default() += 1;
                }
            }
        }
    }
    let window = to.saturating_sub(from).max(1) as f64;
    counts
        .into_iter()
        .map(|(k, v)| (k, if to > from { v as f64 / window } else { 0.0 }))
        .collect()
}

/// Writes `chunk_id,peer_id,emit_slot,recv_slot` rows, ordered by chunk then receipt.
pub fn write_traces_csv<W: io::Write>(traces: &[ChunkTrace], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["chunk_id", "peer_id", "emit_slot", "recv_slot"])?;
    for tr in traces {
        let mut rows: Vec<(u64, PeerId)> = tr.delivery.iter().map(|(p, s)| (*s, *p)).collect();
        rows.sort();
        for (slot, peer) in rows {
            out.serialize((tr.chunk, peer.0, tr.emit_slot, slot))?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::overlay::{build_overlay, peers, LevelPolicy};

    fn overlay(n: u32) -> MultiSbtOverlay {
        build_overlay(&peers(0..n), &LevelPolicy::Auto).unwrap()
    }

    #[test]
    fn push_plan_is_round_robin() {
        let o = overlay(16);
        let targets: Vec<_> = server_push_plan(&o, 8).iter().map(|s| s.server_target.unwrap()).collect();
        assert_eq!(targets, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(server_push_plan(&o, 11)[10].server_target, Some(2));
        assert_eq!(server_push_plan(&overlay(8), 6)[5].server_target, Some(2));
    }

    #[test]
    fn two_peer_tables_and_oracle() {
        let o = overlay(2);
        let t = derive_neighbor_tables(&o).unwrap();
        assert_eq!(t[&PeerId(0)].subsets, vec![(0, vec![PeerId(1)])]);
        assert!(t[&PeerId(1)].subsets.is_empty());
        let run = simulate_slots(&o, 5).unwrap();
        assert!(run.traces.iter().all(|tr| tr.lag() == 1));
        let load = per_peer_upload_load(&run.traces, &o);
        assert_eq!(load[&PeerId(0)], 1.0);
        assert_eq!(load[&PeerId(1)], 0.0);
    }

    #[test]
    fn sixteen_peers_oracle() {
        let o = overlay(16);
        let run = simulate_slots(&o, 16).unwrap();
        assert!(run.violations.is_empty());
        assert!(run.traces.iter().all(|tr| tr.lag() == 4));
        let sizes = table_sizes(&o);
        assert!(sizes.iter().all(|s| s.distinct <= 7));
        assert!(sizes.iter().filter(|s| s.deepest_internal >= 2).all(|s| s.distinct <= 3));
    }

    #[test]
    fn four_peers_two_slots() {
        let run = simulate_slots(&overlay(4), 8).unwrap();
        for tr in &run.traces {
            assert!(tr.delivery.values().all(|&r| r <= tr.chunk + 2));
        }
    }

    #[test]
    fn conservation_eight_peers() {
        let o = overlay(8);
        let run = simulate_slots(&o, 4 * o.period() as u64).unwrap();
        let load = per_peer_upload_load(&run.traces, &o);
        assert!((load.values().sum::<f64>() - 7.0).abs() < 1e-9);
    }

    #[test]
    fn fast_table_sizes_agree() {
        for n in 2..=80u32 {
            for policy in LevelPolicy::all_builtin() {
                let o = build_overlay(&peers(0..n), &policy).unwrap();
                let mut fast = table_sizes(&o);
                let mut slow = table_sizes(&o.to_explicit());
                fast.sort_by_key(|t| t.peer);
                slow.sort_by_key(|t| t.peer);
                assert_eq!(fast, slow, "N = {n} {policy:?}");
            }
        }
    }

    #[test]
    fn csv_header_and_rows() {
        let run = simulate_slots(&overlay(2), 2).unwrap();
        let mut buf = Vec::new();
        write_traces_csv(&run.traces, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "chunk_id,peer_id,emit_slot,recv_slot\n0,0,0,0\n0,1,0,1\n1,0,1,1\n1,1,1,2\n");
    }
}
