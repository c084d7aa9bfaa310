use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{depth_for, level_width, LevelRoster, MultiSbtOverlay, OverlayError, PeerId};

/// How the peers beyond the largest power of two are spread over levels.
///
/// Each chosen level `k` receives one extra block of `2^{(k-1)+}` peers, so its
/// period grows by one; the chosen widths must sum to the remainder.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevelPolicy {
    /// Single level when the remainder is one block wide, else greedy.
    #[default]
    Auto,
    /// Exactly one level whose block width equals the remainder.
    SingleLevel,
    /// Binary decomposition from the deepest level upward.
    Greedy,
    /// Lexicographically smallest level set (favours the top of the trees).
    LowLevels,
    Explicit(Vec<usize>),
}

impl LevelPolicy {
    pub fn all_builtin() -> [LevelPolicy; 3] {
        [LevelPolicy::Auto, LevelPolicy::Greedy, LevelPolicy::LowLevels]
    }

    /// Levels in `0..=max_level` (ascending) absorbing `remainder` peers.
    pub fn choose(&self, remainder: usize, max_level: usize) -> Result<Vec<usize>, OverlayError> {
        let invalid = |levels: Vec<usize>| OverlayError::InvalidLevelSet { levels, remainder };
        match self {
            LevelPolicy::Auto => LevelPolicy::SingleLevel
                .choose(remainder, max_level)
                .or_else(|_| LevelPolicy::Greedy.choose(remainder, max_level)),
            LevelPolicy::SingleLevel => (0..=max_level)
                .rev()
                .find(|&k| level_width(k) == remainder)
                .map(|k| vec![k])
                .ok_or_else(|| invalid(Vec::new())),
            LevelPolicy::Greedy => {
                let mut rem = remainder;
                let mut out = Vec::new();
                for k in (1..=max_level).rev() {
                    if level_width(k) <= rem {
                        rem -= level_width(k);
                        out.push(k);
                    }
                }
                if rem == 1 {
                    out.push(0);
                    rem = 0;
                }
                out.sort_unstable();
                if rem == 0 {
                    Ok(out)
                } else {
                    Err(invalid(out))
                }
            }
            LevelPolicy::LowLevels => {
                // Subset sums of widths of levels `from..=max_level`.
                let reachable = |r: usize, from: usize| -> bool {
                    if from > max_level {
                        return r == 0;
                    }
                    if from == 0 {
                        return r <= (1usize << max_level);
                    }
                    let unit = level_width(from);
                    r % unit == 0 && r <= (1usize << max_level) - (1usize << (from - 1))
                };
                let mut rem = remainder;
                let mut out = Vec::new();
                for k in 0..=max_level {
                    let w = level_width(k);
                    if w <= rem && reachable(rem - w, k + 1) {
                        rem -= w;
                        out.push(k);
                    } else if !reachable(rem, k + 1) {
                        return Err(invalid(out));
                    }
                }
                if rem == 0 {
                    Ok(out)
                } else {
                    Err(invalid(out))
                }
            }
            LevelPolicy::Explicit(levels) => {
                let mut levels = levels.clone();
                levels.sort_unstable();
                let distinct = levels.windows(2).all(|w| w[0] != w[1]);
                let sum: usize = levels.iter().map(|&k| level_width(k)).sum();
                if distinct && sum == remainder && levels.iter().all(|&k| k <= max_level) {
                    Ok(levels)
                } else {
                    Err(invalid(levels))
                }
            }
        }
    }
}

fn check_distinct(peers: &[PeerId]) -> Result<(), OverlayError> {
    let mut seen = HashSet::with_capacity(peers.len());
    for p in peers {
        if !seen.insert(*p) {
            return Err(OverlayError::DuplicatePeer(*p));
        }
    }
    Ok(())
}

/// Rosters of the power-of-two construction on `peers` (`|peers| = 2^depth`).
///
/// Level `k` takes the next `(K-k) 2^{(k-1)+}` peers in input order; the one
/// peer left over joins `s_1`, lifting `P_1` to `K`. With `K = 1` there is no
/// level-1 roster and the leftover becomes the sole level-1 peer.
fn pow2_rosters(peers: &[PeerId], depth: usize) -> (Vec<LevelRoster>, Vec<PeerId>) {
    let mut rest = peers;
    let mut rosters = Vec::with_capacity(depth);
    for k in 0..depth {
        let len = (depth - k) * level_width(k);
        let (take, tail) = rest.split_at(len);
        rosters.push(LevelRoster {
            level: k,
            peers: take.to_vec(),
            period: depth - k,
        });
        rest = tail;
    }
    debug_assert_eq!(rest.len(), 1);
    if depth >= 2 {
        rosters[1].peers.push(rest[0]);
        rosters[1].period += 1;
        (rosters, Vec::new())
    } else {
        (rosters, rest.to_vec())
    }
}

/// Multi-SBT construction for `N = 2^K` peers.
pub fn build_multi_sbt_pow2(peers: &[PeerId]) -> Result<MultiSbtOverlay, OverlayError> {
    let n = peers.len();
    if n < 2 || !n.is_power_of_two() {
        return Err(OverlayError::NotPowerOfTwo(n));
    }
    check_distinct(peers)?;
    let depth = depth_for(n);
    let (rosters, unrostered) = pow2_rosters(peers, depth);
    Ok(MultiSbtOverlay::periodic(n, depth, rosters, unrostered))
}

/// Multi-SBT construction for `2^{K-1} < N < 2^K`.
///
/// The first `2^{K-1}` peers form a power-of-two base; the rest are spread as
/// extra roster blocks over the levels picked by `policy`. Level `K-1` only
/// gets a roster when the policy selects it, otherwise it is filled per tree.
pub fn extend_multi_sbt(
    peers: &[PeerId],
    policy: &LevelPolicy,
) -> Result<MultiSbtOverlay, OverlayError> {
    let n = peers.len();
    if n < 3 {
        return Err(OverlayError::TooFewPeers { min: 3, got: n });
    }
    if n.is_power_of_two() {
        return Err(OverlayError::PowerOfTwo(n));
    }
    check_distinct(peers)?;
    let depth = depth_for(n);
    let base_n = 1usize << (depth - 1);
    let base_depth = depth - 1;
    let (mut rosters, unrostered) = pow2_rosters(&peers[..base_n], base_depth);
    rosters.push(LevelRoster {
        level: base_depth,
        peers: Vec::new(),
        period: 0,
    });
    let levels = policy.choose(n - base_n, base_depth)?;
    let mut rest = &peers[base_n..];
    for k in levels {
        let (take, tail) = rest.split_at(level_width(k));
        rosters[k].peers.extend_from_slice(take);
        rosters[k].period += 1;
        rest = tail;
    }
    assert!(rest.is_empty(), "level set must absorb every extra peer");
    Ok(MultiSbtOverlay::periodic(n, depth, rosters, unrostered))
}

/// Picks the right constructor for `|peers|`.
pub fn build_overlay(peers: &[PeerId], policy: &LevelPolicy) -> Result<MultiSbtOverlay, OverlayError> {
    if peers.len() >= 2 && peers.len().is_power_of_two() {
        build_multi_sbt_pow2(peers)
    } else {
        extend_multi_sbt(peers, policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::overlay::peers;

    fn sizes(o: &MultiSbtOverlay) -> Vec<(usize, usize)> {
        o.rosters().iter().map(|r| (r.peers.len(), r.period)).collect()
    }

    #[test]
    fn sixteen_peers_period_four() {
        let o = build_multi_sbt_pow2(&peers(0..16)).unwrap();
        assert_eq!(sizes(&o), vec![(4, 4), (4, 4), (4, 2), (4, 1)]);
        assert_eq!(o.period(), 4);
        assert_eq!(o.depth(), 4);
    }

    #[test]
    fn two_peers_single_tree() {
        let o = build_multi_sbt_pow2(&peers(0..2)).unwrap();
        assert_eq!(o.period(), 1);
        let t = o.tree(0);
        assert_eq!(t.levels, vec![vec![PeerId(0)], vec![PeerId(1)]]);
        assert_eq!(t.parents[1], vec![PeerId(0)]);
    }

    #[test]
    fn eight_peers() {
        let o = build_multi_sbt_pow2(&peers(0..8)).unwrap();
        assert_eq!(sizes(&o), vec![(3, 3), (3, 3), (2, 1)]);
        assert_eq!(o.period(), 3);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(
            build_multi_sbt_pow2(&peers(0..6)).unwrap_err(),
            OverlayError::NotPowerOfTwo(6)
        );
        let mut dup = peers(0..4);
        dup[3] = PeerId(1);
        assert_eq!(
            build_multi_sbt_pow2(&dup).unwrap_err(),
            OverlayError::DuplicatePeer(PeerId(1))
        );
        assert_eq!(
            extend_multi_sbt(&peers(0..8), &LevelPolicy::Auto).unwrap_err(),
            OverlayError::PowerOfTwo(8)
        );
    }

    #[test]
    fn twenty_peer_policies() {
        let single = extend_multi_sbt(&peers(0..20), &LevelPolicy::SingleLevel).unwrap();
        assert_eq!(single.rosters()[3].period, 2);
        assert_eq!(single.rosters()[0].period, 4);
        let low = extend_multi_sbt(&peers(0..20), &LevelPolicy::LowLevels).unwrap();
        let periods: Vec<usize> = low.rosters().iter().map(|r| r.period).collect();
        assert_eq!(periods, vec![5, 5, 3, 1, 0]);
        assert_eq!(LevelPolicy::Auto.choose(4, 4).unwrap(), vec![3]);
        assert_eq!(LevelPolicy::LowLevels.choose(4, 4).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn greedy_decomposition() {
        assert_eq!(LevelPolicy::Greedy.choose(3, 4).unwrap(), vec![1, 2]);
        assert_eq!(LevelPolicy::Greedy.choose(15, 4).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(LevelPolicy::Auto.choose(1, 4).unwrap(), vec![1]);
        assert_eq!(LevelPolicy::LowLevels.choose(3, 4).unwrap(), vec![0, 2]);
        assert!(LevelPolicy::SingleLevel.choose(3, 4).is_err());
        assert!(LevelPolicy::Explicit(vec![0, 0]).choose(2, 4).is_err());
        assert_eq!(LevelPolicy::Explicit(vec![3]).choose(4, 4).unwrap(), vec![3]);
    }

    #[test]
    fn five_peers_last_level_single() {
        let o = extend_multi_sbt(&peers(0..5), &LevelPolicy::Auto).unwrap();
        assert_eq!(o.depth(), 3);
        for i in 0..o.period() {
            assert_eq!(o.tree(i).levels[3].len(), 1);
        }
    }

    #[test]
    fn deterministic() {
        let a = extend_multi_sbt(&peers(0..45), &LevelPolicy::Greedy).unwrap();
        let b = extend_multi_sbt(&peers(0..45), &LevelPolicy::Greedy).unwrap();
        assert_eq!(a, b);
    }
}
