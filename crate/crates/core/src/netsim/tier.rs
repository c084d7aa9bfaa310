//! Sub-overlays hung off a backbone peer for second-tier members.

use thiserror::Error;

use crate::overlay::{build_overlay, LevelPolicy, MultiSbtOverlay, OverlayError, PeerId};

use super::engine::LinkDelays;
use super::Tier2Mode;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TierError {
    #[error("parent {parent} has surplus {available} but the sub-overlay needs {needed}")]
    InsufficientSurplus { parent: PeerId, needed: f64, available: f64 },
    #[error("pull_mesh is not a sub-overlay mode")]
    NotSubMode,
    #[error(transparent)]
    Overlay(#[from] OverlayError),
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Empty,
    /// Reduced-rate snowball trees; `None` for a single member.
    Snap { overlay: Option<MultiSbtOverlay>, tx: f64 },
    /// Sequential packet relay from the parent.
    Opst { packets: usize, packet_tx: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubOverlay {
    pub parent: PeerId,
    pub members: Vec<PeerId>,
    shape: Shape,
}

/// Builds the sub-overlay for `members` under `parent`.
///
/// `rate` is the full stream rate and `chunk_time` the chunk period at that
/// rate. A `sub_snap(f)` overlay carries an `f`-rate re-encoding whose chunks
/// take `chunk_time / f` to send; the parent feeds one root per chunk, so it
/// needs `f * rate` of surplus. A `sub_opst` parent sends every packet to every
/// member itself and needs `members * rate`.
pub fn attach_sub_overlay(
    parent: PeerId,
    surplus: f64,
    members: &[PeerId],
    mode: Tier2Mode,
    rate: f64,
    chunk_time: f64,
    packets: usize,
) -> Result<SubOverlay, TierError> {
    let shape = if members.is_empty() {
        Shape::Empty
    } else {
        match mode {
            Tier2Mode::PullMesh => return Err(TierError::NotSubMode),
            Tier2Mode::SubSnap(f) => {
                let needed = f * rate;
                if surplus + 1e-9 < needed {
                    return Err(TierError::InsufficientSurplus { parent, needed, available: surplus });
                }
                let overlay = if members.len() >= 2 {
                    Some(build_overlay(members, &LevelPolicy::Auto)?)
                } else {
                    None
                };
                Shape::Snap { overlay, tx: chunk_time / f }
            }
            Tier2Mode::SubOpst => {
                let needed = members.len() as f64 * rate;
                if surplus + 1e-9 < needed {
                    return Err(TierError::InsufficientSurplus { parent, needed, available: surplus });
                }
                let packets = packets.max(1);
                let packet_bits = rate * chunk_time / packets as f64;
                Shape::Opst {
                    packets,
                    packet_tx: packet_bits / surplus,
                }
            }
        }
    };
    Ok(SubOverlay {
        parent,
        members: members.to_vec(),
        shape,
    })
}

impl SubOverlay {
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn depth(&self) -> usize {
        match &self.shape {
            Shape::Snap { overlay: Some(o), .. } => o.depth(),
            _ => 0,
        }
    }

    /// Upper bound on any member's delay behind the parent, given the largest link delay.
    pub fn bound(&self, dmax: f64) -> f64 {
        match &self.shape {
            Shape::Empty | Shape::Snap { overlay: None, .. } => 0.0,
            Shape::Snap { overlay: Some(o), tx } => o.depth() as f64 * (dmax + tx),
            Shape::Opst { packets, packet_tx } => dmax + (packets * self.members.len()) as f64 * packet_tx,
        }
    }

    /// Delay of each member behind the parent for `chunk`.
    ///
    /// The sub-snap root plays the role a backbone root plays for the server
    /// (the hand-off is free) and the rest of the tree is charged hop by hop.
    pub fn offsets(&self, chunk: u64, links: &mut LinkDelays) -> Vec<(PeerId, f64)> {
        match &self.shape {
            Shape::Empty => Vec::new(),
            Shape::Snap { overlay: None, .. } => vec![(self.members[0], 0.0)],
            Shape::Snap { overlay: Some(o), tx } => {
                let t = o.tree((chunk % o.period() as u64) as usize);
                let mut at = vec![vec![0.0; 1]];
                let mut out = vec![(t.root(), 0.0)];
                for k in 1..t.levels.len() {
                    let mut row = Vec::with_capacity(t.levels[k].len());
                    for (c, p) in t.levels[k].iter().zip(&t.parents[k]) {
                        let pk = t.level_of(*p).expect("parent in tree");
                        let pi = t.levels[pk].iter().position(|x| x == p).expect("parent listed");
                        let v = at[pk][pi] + links.get(*p, *c) + tx;
                        row.push(v);
                        out.push((*c, v));
                    }
                    at.push(row);
                }
                out
            }
            Shape::Opst { packets, packet_tx } => {
                let m = self.members.len();
                self.members
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| {
                        let d = links.get(self.parent, p);
                        (p, d + ((packets - 1) * m + j + 1) as f64 * packet_tx)
                    })
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::overlay::peers;

    #[test]
    fn sub_snap_eight_members_half_rate() {
        let s = attach_sub_overlay(PeerId(100), 0.5, &peers(0..8), Tier2Mode::SubSnap(0.5), 1.0, 1.0, 10).unwrap();
        let mut links = LinkDelays::new(0, [0.2, 0.2]);
        for c in 0..6 {
            let off = s.offsets(c, &mut links);
            assert_eq!(off.len(), 8);
            let max = off.iter().map(|x| x.1).fold(0.0, f64::max);
            assert!((max - 3.0 * (0.2 + 2.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn sub_opst_packets() {
        let s = attach_sub_overlay(PeerId(9), 4.0, &peers(0..4), Tier2Mode::SubOpst, 1.0, 1.0, 10).unwrap();
        let mut links = LinkDelays::new(0, [0.0, 0.0]);
        let off = s.offsets(0, &mut links);
        // packet time 0.1 / 4; last member gets its last packet after 40 packet slots
        assert!((off[3].1 - 40.0 * 0.025).abs() < 1e-12);
        assert!((off[0].1 - 37.0 * 0.025).abs() < 1e-12);
    }

    #[test]
    fn errors_and_empty() {
        let e = attach_sub_overlay(PeerId(1), 0.2, &peers(2..4), Tier2Mode::SubSnap(0.5), 1.0, 1.0, 10);
        assert!(matches!(e, Err(TierError::InsufficientSurplus { .. })));
        let e = attach_sub_overlay(PeerId(1), 1.0, &peers(2..4), Tier2Mode::SubOpst, 1.0, 1.0, 10);
        assert!(matches!(e, Err(TierError::InsufficientSurplus { .. })));
        let s = attach_sub_overlay(PeerId(1), 0.0, &[], Tier2Mode::SubOpst, 1.0, 1.0, 10).unwrap();
        assert!(s.is_empty());
        assert!(s.offsets(0, &mut LinkDelays::new(0, [0.1, 0.1])).is_empty());
    }
}
