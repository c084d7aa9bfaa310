//! Pull-mesh peer logic: buffer-map advertisements, gossip and chunk requests.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::overlay::PeerId;

use super::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshParams {
    pub neighbors: usize,
    /// Seconds between membership gossip rounds.
    pub gossip_period: f64,
    /// Seconds between buffer-map advertisements.
    pub buffermap_period: f64,
    /// Playback window, in chunks.
    pub window: u64,
    /// A request unanswered after this many seconds may be re-issued elsewhere.
    pub request_timeout: f64,
    pub max_outstanding: usize,
    /// Chunks this close (in chunk periods) to leaving the window are fetched
    /// earliest deadline first, ahead of the rarest-first order.
    pub urgent: u64,
    /// A holder drops requests once its pull queue is this many seconds deep.
    pub max_backlog: f64,
    pub buffermap_bytes_per_chunk: u64,
}

impl Default for MeshParams {
    fn default() -> Self {
        MeshParams {
            neighbors: 8,
            gossip_period: 5.0,
            buffermap_period: 1.0,
            window: 30,
            request_timeout: 3.0,
            max_outstanding: 6,
            urgent: 0,
            max_backlog: 2.0,
            buffermap_bytes_per_chunk: 2,
        }
    }
}

impl MeshParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field, message: &str| ConfigError {
            field,
            message: message.to_string(),
        };
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if self.neighbors == 0 {
            return Err(bad("mesh.neighbors", "must be >= 1"));
        }
        if !pos(self.gossip_period) {
            return Err(bad("mesh.gossip_period", "must be > 0"));
        }
        if !pos(self.buffermap_period) {
            return Err(bad("mesh.buffermap_period", "must be > 0"));
        }
        if self.window == 0 {
            return Err(bad("mesh.window", "must be >= 1"));
        }
        if !pos(self.request_timeout) {
            return Err(bad("mesh.request_timeout", "must be > 0"));
        }
        if self.max_outstanding == 0 {
            return Err(bad("mesh.max_outstanding", "must be >= 1"));
        }
        if !(self.max_backlog >= 0.0) {
            return Err(bad("mesh.max_backlog", "must be >= 0"));
        }
        Ok(())
    }

    pub fn buffermap_bytes(&self) -> u64 {
        self.window * self.buffermap_bytes_per_chunk
    }
}

/// What a peer last heard from one neighbor.
#[derive(Debug, Clone, Copy)]
pub struct NeighborView<'a> {
    pub id: PeerId,
    /// Chunks in the neighbor's last buffer map.
    pub has: &'a BTreeSet<u64>,
    /// Advertised pull bandwidth in bits per second; zero means the holder
    /// has nothing left for pulls.
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshPeer {
    pub id: PeerId,
    pub have: BTreeSet<u64>,
    /// First chunk this peer wants.
    pub playback_point: u64,
    /// Newest chunk this peer may request; push-fed peers hold back until
    /// the push path has had its chance.
    pub eligible_upto: Option<u64>,
    /// chunk -> (holder asked, give-up time)
    pub outstanding: BTreeMap<u64, (PeerId, f64)>,
    /// Holders that refused or timed out on a chunk; avoided on the retry.
    pub refused: BTreeMap<u64, BTreeSet<PeerId>>,
    pub next_buffermap: f64,
    pub next_gossip: f64,
}

impl MeshPeer {
    pub fn new(id: PeerId, playback_point: u64, now: f64) -> Self {
        MeshPeer {
            id,
            have: BTreeSet::new(),
            playback_point,
            eligible_upto: None,
            outstanding: BTreeMap::new(),
            refused: BTreeMap::new(),
            next_buffermap: now,
            next_gossip: now,
        }
    }

    /// Records a receipt; false if it was a duplicate.
    pub fn receive(&mut self, chunk: u64) -> bool {
        self.outstanding.remove(&chunk);
        self.refused.remove(&chunk);
        self.have.insert(chunk)
    }

    /// The holder turned the request down; the chunk may be asked for again.
    pub fn rejected(&mut self, chunk: u64, by: PeerId) {
        if self.outstanding.get(&chunk).is_some_and(|(h, _)| *h == by) {
            self.outstanding.remove(&chunk);
            self.refused.entry(chunk).or_default().insert(by);
        }
    }

    /// Chunks in the advertised part of the window ending at `newest`.
    pub fn advertisement(&self, newest: u64, window: u64) -> BTreeSet<u64> {
        let lo = (newest + 1).saturating_sub(window);
        self.have.range(lo..=newest).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum MeshAction {
    BufferMap { to: PeerId, bytes: u64 },
    Gossip { to: PeerId },
    Request { chunk: u64, to: PeerId },
}

/// One decision round for `peer` at `now`, with `newest` the newest chunk
/// emitted so far. Missing window chunks close to their deadline go first;
/// the rest are requested rarest first, then earliest deadline first. Each
/// request goes to the holder with the most advertised bandwidth per request
/// already sent its way.
pub fn pull_mesh_step(
    peer: &mut MeshPeer,
    neighbors: &[NeighborView<'_>],
    now: f64,
    newest: Option<u64>,
    params: &MeshParams,
) -> Vec<MeshAction> {
    let mut out = Vec::new();
    let expired: Vec<(u64, PeerId)> = peer
        .outstanding
        .iter()
        .filter(|(_, (_, until))| *until <= now)
        .map(|(c, (h, _))| (*c, *h))
        .collect();
    for (c, h) in expired {
        peer.outstanding.remove(&c);
        peer.refused.entry(c).or_default().insert(h);
    }
    let lo_keep = peer.playback_point.max(newest.map_or(0, |n| (n + 1).saturating_sub(params.window)));
    peer.refused = peer.refused.split_off(&lo_keep);
    if now >= peer.next_buffermap {
        out.extend(neighbors.iter().map(|n| MeshAction::BufferMap {
            to: n.id,
            bytes: params.buffermap_bytes(),
        }));
        while peer.next_buffermap <= now {
            peer.next_buffermap += params.buffermap_period;
        }
    }
    if now >= peer.next_gossip {
        out.extend(neighbors.iter().map(|n| MeshAction::Gossip { to: n.id }));
        while peer.next_gossip <= now {
            peer.next_gossip += params.gossip_period;
        }
    }
    let Some(newest) = newest else {
        return out;
    };
    let hi = peer.eligible_upto.map_or(newest, |e| e.min(newest));
    let lo = peer.playback_point.max((newest + 1).saturating_sub(params.window));
    if lo > hi || peer.outstanding.len() >= params.max_outstanding {
        return out;
    }
    let mut wanted: Vec<(usize, u64, Vec<PeerId>)> = (lo..=hi)
        .filter(|c| !peer.have.contains(c) && !peer.outstanding.contains_key(c))
        .filter_map(|c| {
            let holders: Vec<PeerId> = neighbors
                .iter()
                .filter(|n| n.capacity > 0.0 && n.has.contains(&c))
                .map(|n| n.id)
                .collect();
            (!holders.is_empty()).then_some((holders.len(), c, holders))
        })
        .collect();
    let urgent_below = (newest + 1 + params.urgent).saturating_sub(params.window);
    wanted.sort_by_key(|&(rarity, c, _)| if c < urgent_below { (0, 0, c) } else { (1, rarity, c) });
    let mut load: BTreeMap<PeerId, usize> = BTreeMap::new();
    for (holder, _) in peer.outstanding.values() {
        *load.entry(*holder).or_default() += 1;
    }
    let capacity: BTreeMap<PeerId, f64> = neighbors.iter().map(|n| (n.id, n.capacity)).collect();
    for (_, c, mut holders) in wanted {
        if peer.outstanding.len() >= params.max_outstanding {
            break;
        }
        if let Some(r) = peer.refused.get(&c) {
            if holders.iter().all(|h| r.contains(h)) {
                peer.refused.remove(&c);
            } else {
                holders.retain(|h| !r.contains(h));
            }
        }
        // most bandwidth per request already sent its way
        let score = |h: &PeerId| capacity[h] / (1 + load.get(h).copied().unwrap_or(0)) as f64;
        let best = holders.iter().map(score).fold(0.0, f64::max);
        let top: Vec<PeerId> = holders.iter().copied().filter(|h| score(h) >= best * (1.0 - 1e-9)).collect();
        // rotate among equals so that peers do not all converge on the lowest id
        let to = top[(c as usize + peer.id.0 as usize) % top.len()];
        *load.entry(to).or_default() += 1;
        peer.outstanding.insert(c, (to, now + params.request_timeout));
        out.push(MeshAction::Request { chunk: c, to });
    }
    out
}
